"""Standing-assumption checks, closed-form small-gain bounds and the assembled report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linearflow import DecayEnvelope, decay_envelope, verify_decay
from .system import FeedbackSpec, SpecError, SystemSpec
from .wiener import Ensemble

__all__ = [
    "Status",
    "check_cooperative",
    "check_monotone_direction",
    "lipschitz_constant",
    "single_loop_sum",
    "goodwin_bound",
    "othmer_tyson_bound",
    "competitive_bound",
    "small_gain_kappa",
    "optimize_lambda",
    "SmallGainReport",
    "assemble_report",
]

VIOLATION_TOL = 1e-12


@dataclass(frozen=True)
class Status:
    name: str
    status: str  # pass | fail | not run | not checkable
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "pass"


def check_cooperative(A) -> Status:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("drift must be a square matrix")
    off = A - np.diag(np.diag(A))
    bad = np.argwhere(off < 0)
    if len(bad):
        i, j = bad[0]
        return Status("A", "fail", f"a_{i + 1}{j + 1} = {A[i, j]:g} < 0")
    return Status("A", "pass", "off-diagonal entries nonnegative")


def _monotone_pairs(d: int, samples: int, seed: int, radius: float = 10.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, radius, size=(samples, d))
    y = x + rng.uniform(0, radius / 2, size=(samples, d)) * (rng.random((samples, d)) < 0.7)
    axis = np.linspace(0.0, radius, 5)
    if 5**d <= 20000:
        grid = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=-1)
    else:
        grid = axis[rng.integers(0, 5, size=(20000, d))]
    lx, ly = [x], [y]
    step = axis[1] - axis[0]
    for j in range(d):
        lo = grid[grid[:, j] < radius]
        hi = lo.copy()
        hi[:, j] += step
        lx.append(lo)
        ly.append(hi)
    return np.concatenate(lx), np.concatenate(ly)


def check_monotone_direction(feedback: FeedbackSpec, d: int, samples: int = 1000,
                             seed: int = 0, structural: bool = True) -> str:
    """Classify ``h(t, .)`` on the orthant as order-preserving, anti-order-preserving or mixed.

    Builtins are classified structurally unless ``structural`` is False.
    A feedback that never changes on the sample is reported as
    order-preserving.
    """
    if structural and feedback.structural_direction is not None:
        return feedback.structural_direction
    x, y = _monotone_pairs(d, samples, seed)
    rng = np.random.default_rng(seed + 1)
    t = rng.uniform(0, feedback.period, size=len(x))[:, None]
    diff = feedback(t[:, 0], y) - feedback(t[:, 0], x)
    up = bool(np.any(diff > VIOLATION_TOL))
    down = bool(np.any(diff < -VIOLATION_TOL))
    if up and down:
        return "mixed"
    if down:
        return "anti-order-preserving"
    return "order-preserving"


def lipschitz_constant(feedback: FeedbackSpec) -> tuple:
    """``(L, provenance)``: closed form for builtins, inflated sampled sup for custom kinds."""
    return feedback.L, feedback.L_provenance


# -- closed-form small-gain bounds -----------------------------------------


def single_loop_sum(sigmas: Sequence[float], lam: float) -> float:
    """``sum_i sum_{j<=i} lam^{-(i-j)} prod_{k=j}^i (1 + sigma_k^2 / (2 k lam))``."""
    s = np.asarray(sigmas, dtype=float)
    n = len(s)
    D = 1.0 + s**2 / (2.0 * np.arange(1, n + 1) * lam)
    total = 0.0
    for i in range(1, n + 1):
        for j in range(1, i + 1):
            total += lam ** (-(i - j)) * float(np.prod(D[j - 1:i]))
    return total


def _single_loop_lambda(alphas, lambda_opt) -> float:
    alphas = np.asarray(alphas, dtype=float)
    lam = float(alphas.min() / (len(alphas) + 1)) if lambda_opt is None else float(lambda_opt)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return lam


def goodwin_bound(n: int, m: float, V: float, K: float, alphas, sigmas,
                  lambda_opt: Optional[float] = None) -> float:
    """``m n^2 V / (lam (K - 1)) * single_loop_sum``."""
    if K <= 2:
        raise SpecError("Goodwin bound requires K > 2")
    lam = _single_loop_lambda(alphas, lambda_opt)
    return m * n**2 * V / (lam * (K - 1.0)) * single_loop_sum(sigmas, lam)


def othmer_tyson_bound(n: int, m: float, k0: float, K: float, alphas, sigmas,
                       lambda_opt: Optional[float] = None) -> float:
    """``m k0 n^2 K / (lam (K - 1)) * single_loop_sum``."""
    if K <= 2:
        raise SpecError("Othmer-Tyson bound requires K > 2")
    lam = _single_loop_lambda(alphas, lambda_opt)
    return m * k0 * n**2 * K / (lam * (K - 1.0)) * single_loop_sum(sigmas, lam)


def competitive_bound(n: int, m: float, K_min: float, alphas, sigmas) -> float:
    """``m n^2 / (lam K_min) * sum_i (1 + sigma_i^2 / (2 lam))`` with ``lam = min alpha / 2``."""
    if K_min <= 1:
        raise SpecError("competitive bound requires K_min > 1")
    lam = float(np.min(alphas)) / 2.0
    s = np.asarray(sigmas, dtype=float)
    return m * n**2 / (lam * K_min) * float(np.sum(1.0 + s**2 / (2.0 * lam)))


def small_gain_kappa(L: float, d: int, sup_ER_bound: float, lam: float) -> float:
    return L * d**2 * sup_ER_bound / lam


def optimize_lambda(spec: SystemSpec, grid: Optional[Sequence[float]] = None,
                    method: Optional[str] = None) -> tuple:
    """Grid search for the lambda minimising kappa; returns ``(lam, kappa, envelope)``."""
    base = decay_envelope(spec, method=method)
    if grid is None:
        if base.method == "diagonal":
            top = spec.alphas.min() / 2
        elif base.method == "last_row":
            # the sharp rates alpha_k - (n+1-k) lam must stay positive
            top = 0.999 * float(np.min(spec.alphas / (spec.d - np.arange(spec.d))))
        else:
            top = spec.alphas.min() / (spec.d + 1)
        grid = np.linspace(top / 50, top, 50)
    best = None
    for lam in grid:
        try:
            env = decay_envelope(spec, lam=float(lam), method=base.method)
        except ValueError:
            continue
        k = small_gain_kappa(spec.feedback.L, spec.d, env.sup_ER_bound, env.lam)
        if best is None or k < best[1]:
            best = (env.lam, k, env)
    if best is None:
        raise ValueError("no admissible lambda on the grid")
    return best


# -- report ------------------------------------------------------------------


@dataclass
class SmallGainReport:
    name: str
    d: int
    lam: float
    L: float
    L_provenance: str
    N: list
    N_provenance: str
    sup_ER_bound: float
    envelope_method: str
    kappa: float
    statuses: list
    notes: list = field(default_factory=list)
    sup_ER_mc: Optional[float] = None
    sup_ER_se: Optional[float] = None
    decay_violation_fraction: Optional[float] = None

    @property
    def verdict(self) -> bool:
        return self.kappa < 1.0

    def as_dict(self) -> dict:
        return {
            "name": self.name, "d": self.d, "lambda": self.lam, "L": self.L,
            "L_provenance": self.L_provenance, "N": self.N, "N_provenance": self.N_provenance,
            "sup_ER_bound": self.sup_ER_bound, "envelope_method": self.envelope_method,
            "sup_ER_mc": self.sup_ER_mc, "sup_ER_se": self.sup_ER_se,
            "decay_violation_fraction": self.decay_violation_fraction,
            "kappa": self.kappa, "verdict": "pass" if self.verdict else "fail",
            "statuses": [{"name": s.name, "status": s.status, "detail": s.detail}
                         for s in self.statuses],
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [
            ("system", self.name or "-"),
            ("d", str(self.d)),
            ("lambda", f"{self.lam:.10g}"),
            ("envelope", self.envelope_method),
            ("L", f"{self.L:.10g} ({self.L_provenance})"),
            ("sup E R bound", f"{self.sup_ER_bound:.10g}"),
        ]
        if self.sup_ER_mc is not None:
            rows.append(("sup E R (MC)", f"{self.sup_ER_mc:.6g} +- {self.sup_ER_se:.2g}"))
        if self.decay_violation_fraction is not None:
            rows.append(("envelope violations", f"{self.decay_violation_fraction:.3g}"))
        rows.append(("kappa = L d^2 supER / lambda", f"{self.kappa:.10g}"))
        rows.append(("verdict", "PASS" if self.verdict else "FAIL"))
        for s in self.statuses:
            rows.append((f"[{s.name}]", f"{s.status}" + (f": {s.detail}" if s.detail else "")))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MCBudget:
    paths: int = 256
    seed: int = 0
    dt: float = 1e-3
    horizon: Optional[float] = None


def assemble_report(spec: SystemSpec, envelope: Optional[DecayEnvelope] = None,
                    mc_budget: Optional[MCBudget] = None) -> SmallGainReport:
    """Check the assumptions and evaluate ``kappa``; the verdict uses only analytic constants."""
    env = decay_envelope(spec) if envelope is None else envelope
    fb = spec.feedback
    L, prov = lipschitz_constant(fb)
    kappa = small_gain_kappa(L, spec.d, env.sup_ER_bound, env.lam)
    statuses = [check_cooperative(spec.A)]
    direction = check_monotone_direction(fb, spec.d)
    statuses.append(Status("H", "fail" if direction == "mixed" else "pass", direction))
    notes = []
    mc = se = frac = None
    if mc_budget is not None and env.closed_form:
        horizon = mc_budget.horizon or 10.0 / env.lam
        n = int(math.ceil(horizon / mc_budget.dt))
        seeds = [mc_budget.seed + k for k in range(mc_budget.paths)]
        ens = Ensemble.from_seeds(seeds, mc_budget.dt, -1, n, spec.d)
        chk = verify_decay(spec, env, ens, horizon=n * mc_budget.dt)
        mc, se, frac = chk.sup_ER_mc, chk.sup_ER_se, chk.violation_fraction
        statuses.append(Status("L", "pass" if frac <= 1e-3 else "fail",
                               f"violation fraction {frac:.3g} over {chk.n_checks} checks"))
        if frac > 1e-3:
            notes.append("the decay envelope does not dominate ||Phi|| on sampled paths; "
                         "the bound it yields is not a certified constant")
    elif not env.closed_form:
        statuses.append(Status("L", "not checkable", "user-supplied envelope"))
    else:
        statuses.append(Status("L", "not run", "no Monte Carlo budget"))
    statuses.append(Status("R", "not checkable", "temperedness is not checkable at finite horizon"))
    statuses.append(Status("H1", "pass" if kappa < 1 else "fail", f"kappa = {kappa:.6g}"))
    if fb.estimated:
        notes.append("N and L are sampled estimates inflated by 5%")
    if env.method == "last_row":
        notes.append("envelope sums only the last row of R_ij")
    return SmallGainReport(
        name=spec.name, d=spec.d, lam=env.lam, L=L, L_provenance=prov,
        N=[float(v) for v in fb.N], N_provenance=fb.N_provenance,
        sup_ER_bound=env.sup_ER_bound, envelope_method=env.method, kappa=kappa,
        statuses=statuses, notes=notes, sup_ER_mc=mc, sup_ER_se=se,
        decay_violation_fraction=frac,
    )
