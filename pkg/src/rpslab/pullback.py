"""Pull-back experiments, envelope diagnostics and random-periodicity checks.

A fan of trajectories ``phi(t, t - alpha - nT, w) x0`` is integrated in a
single forward sweep: every (n, x0) member waits at its initial state until
its start index and then advances with the shared step, which gives the same
bits as separate runs of :func:`rpslab.sdeflow.evolve`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linearflow import DecayEnvelope, step
from .operators import GainConfig, PeriodicProcess
from .sdeflow import evolve_indices, feedback_at, period_steps
from .system import SystemSpec
from .wiener import Ensemble, WienerGrid, to_steps

__all__ = [
    "PullbackFan",
    "run_pullback",
    "EnvelopeDiagnostics",
    "envelope_diagnostics",
    "verify_rps_invariance",
    "crosscheck_pullback_vs_fixpoint",
    "noise_floor",
]


def noise_floor(scale: float, ulps: int = 16) -> float:
    """Differences below this are rounding noise for states of size ``scale``."""
    return ulps * np.finfo(float).eps * max(scale, np.finfo(float).tiny)


@dataclass
class PullbackFan:
    """Terminal states ``phi(t, t - alpha - nT, w) x0`` for every ``n`` and ``x0``.

    ``terminal`` has shape ``(len(ns), len(X0), paths, d)``.
    """

    t: float
    alpha: float
    ns: np.ndarray
    X0: np.ndarray
    terminal: np.ndarray = field(repr=False)
    projection_events: int
    T: float
    lam: Optional[float] = None
    seeds: Optional[tuple] = None

    @property
    def diameters(self) -> np.ndarray:
        """Max-norm diameter of the fan across ``X0``, shape (len(ns), paths)."""
        spread = self.terminal.max(axis=1) - self.terminal.min(axis=1)
        return spread.max(axis=-1)

    @property
    def cauchy(self) -> np.ndarray:
        """``max_x0 |phi_{n+1} - phi_n|`` for consecutive n, shape (len(ns) - 1, paths)."""
        if len(self.ns) < 2:
            return np.zeros((0, self.terminal.shape[2]))
        step_ = np.abs(np.diff(self.terminal, axis=0)).max(axis=-1)
        return step_.max(axis=1)

    def median_diameter(self) -> np.ndarray:
        return np.median(self.diameters, axis=1)

    def fit_slope(self) -> Optional[float]:
        """Slope of log(median diameter) against n; None when fewer than two positive points."""
        med = self.median_diameter()
        ok = med > 0
        if len(self.ns) < 2 or ok.sum() < 2:
            return None
        return float(np.polyfit(self.ns[ok], np.log(med[ok]), 1)[0])

    def heuristic_band(self) -> Optional[tuple]:
        if self.lam is None:
            return None
        r = self.lam * self.T
        return (-1.5 * r, -0.5 * r)

    def summary(self) -> dict:
        band = self.heuristic_band()
        slope = self.fit_slope()
        return {
            "t": self.t, "alpha": self.alpha, "ns": self.ns.tolist(),
            "median_diameter": self.median_diameter().tolist(),
            "median_cauchy": np.median(self.cauchy, axis=1).tolist() if len(self.ns) > 1 else [],
            "fit_slope": slope,
            "heuristic_band": list(band) if band else None,
            "slope_in_band": (None if slope is None or band is None
                              else bool(band[0] <= slope <= band[1])),
            "projection_events": self.projection_events,
        }

    def to_csv(self, path, envelope_gaps: Optional[np.ndarray] = None) -> None:
        """Per n: median diameter, median Cauchy increment and optional envelope gap."""
        med = self.median_diameter()
        cau = np.median(self.cauchy, axis=1) if len(self.ns) > 1 else np.zeros(0)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            head = ["n", "median_diameter", "median_cauchy"]
            if envelope_gaps is not None:
                head.append("mean_envelope_gap")
            wr.writerow(head)
            for k, n in enumerate(self.ns):
                row = [str(int(n)), f"{med[k]:.17g}", f"{cau[k]:.17g}" if k < len(cau) else ""]
                if envelope_gaps is not None:
                    row.append(f"{envelope_gaps[k]:.17g}")
                wr.writerow(row)


def _as_ensemble(w) -> Ensemble:
    return w if isinstance(w, Ensemble) else Ensemble([w])


def run_pullback(spec: SystemSpec, w, t: float, alpha: float, n_range: Sequence[int],
                 X0, scheme: str = "em", lam: Optional[float] = None) -> PullbackFan:
    """Integrate ``phi(t, t - alpha - nT, w) x0`` for all ``n`` in ``n_range`` and ``x0`` in ``X0``."""
    ens = _as_ensemble(w)
    dt = ens.dt
    P = period_steps(spec, dt)
    ns = np.array(sorted(set(int(n) for n in n_range)))
    if len(ns) == 0 or ns[0] < 0:
        raise ValueError("n_range must hold nonnegative integers")
    if not 0 <= alpha < spec.T:
        raise ValueError("alpha must lie in [0, T)")
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[1] != spec.d or np.any(X0 < 0):
        raise ValueError("initial states must be nonnegative d-vectors")
    i_t = to_steps(t, dt)
    i_a = to_steps(alpha, dt)
    starts = i_t - i_a - ns * P
    i0 = int(starts.min())
    if i_t > i0 and not ens.covers(i0, i_t):
        raise IndexError(f"paths do not cover the pull-back window [{i0 * dt}, {t}]")
    paths = len(ens)
    X = np.broadcast_to(X0[None, :, None, :], (len(ns), len(X0), paths, spec.d)).copy()
    dW = ens.inc_steps(i0, i_t) if i_t > i0 else None
    Pp = P if spec.feedback.periodic else None
    b = spec.B
    events = 0
    for m in range(i_t - i0):
        i = i0 + m
        # starts decrease with n, so the active members form a suffix
        k0 = int(np.searchsorted(-starts, -i))
        if k0 == len(ns):
            continue
        sel = slice(k0, None)
        x = X[sel]
        h = feedback_at(spec, i, x, dt, Pp)
        x = step(spec.A, spec.sigma, b, x, dW[:, m], dt, h, scheme)
        neg = x < 0
        if neg.any():
            events += int(np.count_nonzero(neg))
            x = np.where(neg, 0.0, x)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite pull-back state at t={(i + 1) * dt}")
        X[sel] = x
    return PullbackFan(t, alpha, ns, X0, X, events, spec.T, lam, ens.seeds)


@dataclass
class EnvelopeDiagnostics:
    """``a_n = min`` and ``b_n = max`` of ``h(t, phi(t, t - alpha - mT) x)`` over ``m`` in ``[n, n_max]``.

    Arrays have shape ``(len(ns), paths, d)``.
    """

    ns: np.ndarray
    values: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)

    @property
    def gaps(self) -> np.ndarray:
        return self.b - self.a

    def mean_gap(self) -> np.ndarray:
        """Ensemble mean of the max-norm gap per n."""
        return self.gaps.max(axis=-1).mean(axis=-1)

    def check(self) -> dict:
        a, b, h = self.a, self.b, self.values
        return {
            "a_nondecreasing": bool(np.all(np.diff(a, axis=0) >= 0)),
            "b_nonincreasing": bool(np.all(np.diff(b, axis=0) <= 0)),
            "ordered": bool(np.all(a <= b)),
            "squeeze": bool(np.all((a <= h) & (h <= b))),
            "gap_nonincreasing": bool(np.all(np.diff(self.gaps, axis=0) <= 0)),
        }


def envelope_diagnostics(spec: SystemSpec, w, t: float, alpha: float, n_range, x0,
                         scheme: str = "em") -> EnvelopeDiagnostics:
    fan = run_pullback(spec, w, t, alpha, n_range, [x0], scheme)
    dt = _as_ensemble(w).dt
    P = period_steps(spec, dt) if spec.feedback.periodic else None
    H = feedback_at(spec, to_steps(t, dt), fan.terminal[:, 0], dt, P)  # (ns, paths, d)
    # tails m >= n: reverse cumulative extrema
    a = np.minimum.accumulate(H[::-1], axis=0)[::-1]
    b = np.maximum.accumulate(H[::-1], axis=0)[::-1]
    return EnvelopeDiagnostics(fan.ns, H, a, b)


@dataclass
class InvarianceResiduals:
    windows: list
    flow_median: list
    flow_max: list
    shift_residual: float

    def as_dict(self) -> dict:
        return {"windows": self.windows, "flow_median": self.flow_median,
                "flow_max": self.flow_max, "shift_residual": self.shift_residual}


def verify_rps_invariance(spec: SystemSpec, envelope: DecayEnvelope, cfg: GainConfig,
                          Y: PeriodicProcess, windows) -> InvarianceResiduals:
    """Residuals of ``phi(t, s, w) Y(s, w) = Y(t, w)`` and ``Y(r + T, w) = Y(r, theta_T w)``.

    ``windows`` are ``(s, t)`` times inside the stored window of ``Y``.
    """
    ens = Y.ensemble
    W = Y.window()
    start = Y.start_index
    meds, maxs = [], []
    for s, t in windows:
        i_s, i_t = to_steps(s, Y.dt), to_steps(t, Y.dt)
        if not (start <= i_s <= i_t < start + W.shape[1]):
            raise IndexError(f"window ({s}, {t}) outside the stored process")
        out = np.empty((Y.paths, spec.d))
        for p, g in enumerate(ens.grids):
            out[p] = evolve_indices(spec, g, i_s, i_t, W[p, i_s - start], cfg.scheme,
                                    store=False).final
        r = np.abs(out - W[:, i_t - start]).max(axis=-1)
        meds.append(float(np.median(r)))
        maxs.append(float(r.max()))
    shift = 0.0
    if Y.nblocks > 1:
        Ys = Y.shift_back(1)
        for k in range(Ys.nblocks):
            shift = max(shift, float(np.max(np.abs(Ys.block(k) - Y.block(k + 1)))))
    return InvarianceResiduals([list(wd) for wd in windows], meds, maxs, shift)


def crosscheck_pullback_vs_fixpoint(spec: SystemSpec, envelope: DecayEnvelope,
                                    cfg: GainConfig, fan: PullbackFan,
                                    Y: PeriodicProcess) -> dict:
    """Per-n median over paths of ``max_x0 |phi(t, t - alpha - nT) x0 - Y(t)|``."""
    paths = fan.terminal.shape[2]
    if paths != len(Y.ensemble) or (fan.seeds is not None and fan.seeds != Y.ensemble.seeds):
        raise ValueError("fan and process use different path sets")
    i_t = to_steps(fan.t, Y.dt)
    if not 0 <= i_t < Y.P:
        raise ValueError("observation time must lie in the stored period [0, T)")
    y = Y.period[:, i_t]  # (paths, d)
    dist = np.abs(fan.terminal - y[None, None]).max(axis=-1).max(axis=1)  # (ns, paths)
    med = np.median(dist, axis=1)
    return {"ns": fan.ns.tolist(), "median_distance": med.tolist(),
            "max_distance": dist.max(axis=1).tolist(), "final_median": float(med[-1])}
