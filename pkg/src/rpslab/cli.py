"""Command-line front end.

Exit codes: 0 success (or passing verdict), 2 failing verdict, 1 error.
Every output file is a deterministic function of the input system, seed, dt and
ensemble size.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .conditions import MCBudget, assemble_report, optimize_lambda
from .linearflow import decay_envelope
from .operators import (GainConfig, PeriodicProcess, export_quantiles_csv,
                        export_residuals_json, picard_blocks, picard_fixed_point, realize_rps)
from .presets import PRESETS, load_preset
from .pullback import crosscheck_pullback_vs_fixpoint, envelope_diagnostics, run_pullback
from .sdeflow import evolve_indices, export_summary_json, export_trajectory_csv, period_steps
from .specparse import parse_real, parse_system
from .system import SpecError
from .wiener import Ensemble

log = logging.getLogger("rpslab")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
OUTPUT_FILES = ("report.json", "simulate.json", "pullback.json", "fixpoint.json")


class CLIError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str
    spec_path: Optional[str]
    preset: Optional[str]
    seed: int
    dt: float
    paths: int
    nmax: int
    M_trunc: Optional[float]
    tol: float
    out: str
    lambda_override: Optional[float]
    scheme: str
    kmax: int
    t1: Optional[float]
    x0: Optional[tuple]
    optimize_lambda: bool
    threads: Optional[int]


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpslab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rpslab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("check", "assumption checks and the small-gain verdict"),
        ("simulate", "forward trajectories of the nonlinear flow"),
        ("pullback", "pull-back fan and envelope diagnostics"),
        ("fixpoint", "Picard iteration of the gain operator"),
        ("report", "collect earlier outputs into one file"),
    ]:
        sp = sub.add_parser(name, help=help_)
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--spec", help="spec file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="embedded spec")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--dt", default=None, help="step size; rounded to T / round(T / dt)")
        sp.add_argument("--paths", type=int, default=None)
        sp.add_argument("--nmax", type=int, default=8)
        sp.add_argument("--mtrunc", type=float, default=None)
        sp.add_argument("--tol", type=float, default=1e-10)
        sp.add_argument("--out", default=".")
        sp.add_argument("--lambda-override", type=float, default=None)
        sp.add_argument("--scheme", choices=("em", "milstein"), default="em")
        sp.add_argument("--kmax", type=int, default=12, help="Picard iteration cap")
        sp.add_argument("--t1", default=None, help="simulation end time (default 2T)")
        sp.add_argument("--x0", default=None, help="initial state, comma separated")
        sp.add_argument("--optimize-lambda", action="store_true",
                        help="grid-search lambda to minimise kappa")
    return p


def _config(args) -> RunConfig:
    threads = os.environ.get("RPSLAB_THREADS")
    if threads is not None:
        if not threads.isdigit() or int(threads) < 1:
            raise CLIError("RPSLAB_THREADS must be a positive integer")
        threads = int(threads)
    default_paths = {"check": 128, "simulate": 10, "pullback": 64, "fixpoint": 64}
    paths = args.paths if args.paths is not None else default_paths.get(args.command, 1)
    for name, val in [("paths", paths), ("nmax", args.nmax), ("tol", args.tol),
                      ("kmax", args.kmax)]:
        if not val > 0:
            raise CLIError(f"--{name} must be positive")
    if args.mtrunc is not None and not args.mtrunc > 0:
        raise CLIError("--mtrunc must be positive")
    x0 = None
    if args.x0 is not None:
        x0 = tuple(parse_real(v) for v in args.x0.split(","))
    dt = parse_real(args.dt) if args.dt is not None else float("nan")
    if args.dt is not None and not dt > 0:
        raise CLIError("--dt must be positive")
    return RunConfig(args.command, args.spec, args.preset, args.seed, dt, paths, args.nmax,
                     args.mtrunc, args.tol, args.out, args.lambda_override, args.scheme,
                     args.kmax, parse_real(args.t1) if args.t1 else None, x0,
                     args.optimize_lambda, threads)


def _load_spec(cfg: RunConfig):
    if cfg.preset:
        return load_preset(cfg.preset)
    if not cfg.spec_path:
        raise CLIError("give --spec or --preset")
    path = Path(cfg.spec_path)
    if not path.is_file():
        raise CLIError(f"spec file not found: {path}")
    return parse_system(path.read_text(encoding="utf-8"), name=path.stem)


def _grid_dt(spec, cfg: RunConfig) -> float:
    """Step dividing T exactly; defaults to T / 1000."""
    if math.isnan(cfg.dt):
        return spec.T / 1000
    P = round(spec.T / cfg.dt)
    if P < 1 or abs(P * cfg.dt - spec.T) > 1e-6 * spec.T:
        raise CLIError(f"T / dt = {spec.T / cfg.dt:.9g} is not an integer")
    return spec.T / P


def _envelope(spec, cfg: RunConfig):
    if cfg.optimize_lambda:
        return optimize_lambda(spec)[2]
    return decay_envelope(spec, lam=cfg.lambda_override)


def _provenance(spec, cfg: RunConfig, dt: float) -> dict:
    return {
        "command": cfg.command, "spec": spec.name, "seed": cfg.seed, "dt": dt,
        "paths": cfg.paths, "scheme": cfg.scheme,
        "versions": {"rpslab": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
    }


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_plain) + "\n")


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)


def _seeds(cfg: RunConfig) -> list:
    return [cfg.seed + k for k in range(cfg.paths)]


# -- commands ------------------------------------------------------------------


def cmd_check(cfg: RunConfig) -> int:
    spec = _load_spec(cfg)
    env = _envelope(spec, cfg)
    dt = 1e-3 if math.isnan(cfg.dt) else cfg.dt
    budget = MCBudget(paths=cfg.paths, seed=cfg.seed, dt=dt) if env.closed_form else None
    log.info("check: %s, lambda=%g, envelope %s", spec.name, env.lam, env.method)
    report = assemble_report(spec, env, budget)
    out = Path(cfg.out)
    data = report.as_dict()
    data["provenance"] = _provenance(spec, cfg, dt)
    _write_json(out / "report.json", data)
    (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.verdict else EXIT_FAIL


def cmd_simulate(cfg: RunConfig) -> int:
    spec = _load_spec(cfg)
    dt = _grid_dt(spec, cfg)
    t1 = 2 * spec.T if cfg.t1 is None else cfg.t1
    n = int(round(t1 / dt))
    x0 = np.ones(spec.d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    if x0.shape != (spec.d,):
        raise CLIError(f"--x0 needs {spec.d} components")
    out = Path(cfg.out)
    ens = Ensemble.from_seeds(_seeds(cfg), dt, -1, max(n, 1), spec.d)
    log.info("simulate: %d paths, %d steps", cfg.paths, n)
    traj = evolve_indices(spec, ens, 0, n, x0, cfg.scheme)
    files = []
    for p, seed in enumerate(ens.seeds):
        name = f"trajectory_seed{seed}.csv"
        export_trajectory_csv(traj, out / name, path_index=p)
        files.append(name)
    finite = bool(np.all(np.isfinite(traj.samples)))
    nonneg = bool(np.all(traj.samples >= 0))
    _write_json(out / "simulate.json", {
        "files": files, "t1": n * dt, "x0": x0, "projection_events": traj.projection_events,
        "projection_fraction": traj.projection_fraction, "finite": finite,
        "nonnegative": nonneg, "provenance": _provenance(spec, cfg, dt),
    })
    return EXIT_OK


def cmd_pullback(cfg: RunConfig) -> int:
    spec = _load_spec(cfg)
    dt = _grid_dt(spec, cfg)
    P = period_steps(spec, dt)
    env = _envelope(spec, cfg)
    ns = list(range(1, cfg.nmax + 1))
    ens = Ensemble.from_seeds(_seeds(cfg), dt, -cfg.nmax * P, 0, spec.d)
    X0 = [np.zeros(spec.d), np.ones(spec.d), np.full(spec.d, 5.0)]
    log.info("pullback: n = 1..%d, %d paths", cfg.nmax, cfg.paths)
    fan = run_pullback(spec, ens, 0.0, 0.0, ns, X0, cfg.scheme, lam=env.lam)
    diag = envelope_diagnostics(spec, ens, 0.0, 0.0, ns, X0[-1], cfg.scheme)
    out = Path(cfg.out)
    fan.to_csv(out / "pullback.csv", envelope_gaps=diag.mean_gap())
    summary = fan.summary()
    if len(ns) < 2:
        summary["fit_slope"] = None
        summary["slope_in_band"] = None
    summary["slope_note"] = "heuristic band anchored to the linear envelope rate"
    summary["envelope_checks"] = diag.check()
    summary["mean_envelope_gap"] = diag.mean_gap()
    summary["provenance"] = _provenance(spec, cfg, dt)
    _write_json(out / "pullback.json", summary)
    return EXIT_OK


def cmd_fixpoint(cfg: RunConfig) -> int:
    spec = _load_spec(cfg)
    dt = _grid_dt(spec, cfg)
    P = period_steps(spec, dt)
    env = _envelope(spec, cfg)
    gcfg = GainConfig(M_trunc=cfg.M_trunc, scheme=cfg.scheme)
    nb = picard_blocks(spec, env, gcfg, cfg.kmax)
    ens = Ensemble.from_seeds(_seeds(cfg), dt, -(nb - 1) * P, P, spec.d)
    kappa = spec.feedback.L * spec.d**2 * env.sup_ER_bound / env.lam
    log.info("fixpoint: %d paths, %d periods of window", cfg.paths, nb)
    res = picard_fixed_point(spec, env, gcfg, spec.feedback.N / 2, k_max=cfg.kmax,
                             tol=cfg.tol, ensemble=ens, kappa=kappa)
    Y = realize_rps(spec, env, gcfg, res.u)
    out = Path(cfg.out)
    export_quantiles_csv(Y, out / "Y_quantiles.csv")
    export_residuals_json(res, out / "residuals.json")
    _write_json(out / "fixpoint.json", {
        **res.as_dict(), "kappa": kappa, "clamped": Y.clamped,
        "provenance": _provenance(spec, cfg, dt),
    })
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    found = {}
    for name in OUTPUT_FILES:
        f = out / name
        if f.is_file():
            found[name.removesuffix(".json")] = json.loads(f.read_text())
    if not found:
        raise CLIError("nothing to report")
    _write_json(out / "full_report.json", {"sections": found, "rpslab": __version__})
    return EXIT_OK


COMMANDS = {"check": cmd_check, "simulate": cmd_simulate, "pullback": cmd_pullback,
            "fixpoint": cmd_fixpoint, "report": cmd_report}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.command](cfg)
    except (CLIError, SpecError, ValueError, OSError, ArithmeticError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
