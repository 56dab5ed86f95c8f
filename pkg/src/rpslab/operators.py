"""Input-to-state operator K, gain operator K^h, the metric rho and Picard iteration.

A :class:`PeriodicProcess` lives on an ensemble of paths and stores a window
of whole periods ending at ``T``.  Block ``k`` (times ``[-kT, -kT + T)`` on
``w``) *is* the process over ``[0, T)`` on the shifted path
``theta_{-kT} w``; shifting an ensemble back by whole periods is therefore a
relabelling of stored blocks, and shift consistency holds by construction.

K is computed by the recursion ``X(m+1) = G_m (X(m) + v_m dt)`` with ``G_m``
the one-step propagator, started from zero at the window start.  This is the
left-endpoint quadrature of ``int Phi(t-s, theta_s w) v(s) ds`` with the
discrete factorisation ``Psi(t) Psi(s)^{-1}``, evaluated without forming
inverses.  Each application drops the ``B - 1`` oldest blocks, whose
integration horizon would be shorter than ``M_trunc``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linearflow import DecayEnvelope, _check_scheme, step
from .sdeflow import period_steps
from .system import SystemSpec
from .wiener import Ensemble

__all__ = [
    "GainConfig",
    "PeriodicProcess",
    "TruncationError",
    "WindowError",
    "apply_K",
    "apply_Kh",
    "metric_rho",
    "RhoEstimate",
    "contraction_ratio",
    "picard_fixed_point",
    "PicardResult",
    "realize_rps",
    "picard_blocks",
    "export_residuals_json",
    "export_quantiles_csv",
]


class TruncationError(ValueError):
    pass


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class GainConfig:
    """Truncation of the lower integration limit of K.

    ``M_trunc`` defaults to ``max(10 / lam, 5 T)``, lengthened when needed so
    that the tail ``e^{-lam M} sup_ER_bound max(N) / lam`` stays below ``tail_tol``.
    """

    M_trunc: Optional[float] = None
    tail_tol: float = 1e-6
    quadrature: str = "left-endpoint"
    scheme: str = "em"

    def horizon(self, spec: SystemSpec, env: DecayEnvelope) -> float:
        if self.M_trunc is not None:
            if not self.M_trunc > 0:
                raise ValueError("M_trunc must be positive")
            return float(self.M_trunc)
        M = max(10.0 / env.lam, 5.0 * spec.T)
        scale = env.sup_ER_bound * float(np.max(spec.feedback.N)) / env.lam
        if scale > self.tail_tol:
            M = max(M, (1 + 1e-9) * math.log(scale / self.tail_tol) / env.lam)
        return M

    def blocks(self, spec: SystemSpec, env: DecayEnvelope) -> int:
        """``B = 1 + ceil(M / T)``: blocks an input needs per output block."""
        return 1 + int(math.ceil(self.horizon(spec, env) / spec.T - 1e-12))

    def tail_bound(self, spec: SystemSpec, env: DecayEnvelope) -> float:
        M = self.horizon(spec, env)
        return math.exp(-env.lam * M) * env.sup_ER_bound * float(np.max(spec.feedback.N)) / env.lam

    def check_tail(self, spec: SystemSpec, env: DecayEnvelope) -> float:
        tail = self.tail_bound(spec, env)
        if tail > self.tail_tol:
            raise TruncationError(
                f"truncation tail {tail:.3g} exceeds tail_tol={self.tail_tol:g}; increase M_trunc"
            )
        return tail


class PeriodicProcess:
    """Process on ``ensemble`` stored as whole-period blocks, oldest first.

    ``values`` has shape ``(paths, nblocks, P, d)``; ``values[:, -1]`` is the
    period ``[0, T)`` and ``values[:, -1 - k]`` the block ``[-kT, -kT + T)``.
    """

    def __init__(self, values: np.ndarray, ensemble: Ensemble, T: float, dt: float,
                 clamped: int = 0, bound: Optional[np.ndarray] = None, check: bool = True):
        values = np.asarray(values)
        if values.ndim != 4 or values.shape[0] != len(ensemble):
            raise ValueError("values must have shape (paths, blocks, P, d)")
        P = values.shape[2]
        if abs(P * dt - T) > 1e-9 * T:
            raise ValueError("block length does not match the period")
        self.values = values
        self.ensemble = ensemble
        self.T = T
        self.dt = dt
        self.clamped = clamped
        self.bound = None if bound is None else np.asarray(bound, dtype=float)
        if check and self.bound is not None:
            tol = 1e-12 * max(1.0, float(self.bound.max()))
            if np.any(values < -tol) or np.any(values > self.bound + tol):
                raise ValueError("process leaves the order interval [0, N]")

    # -- geometry ------------------------------------------------------------

    @property
    def paths(self) -> int:
        return self.values.shape[0]

    @property
    def nblocks(self) -> int:
        return self.values.shape[1]

    @property
    def P(self) -> int:
        return self.values.shape[2]

    @property
    def d(self) -> int:
        return self.values.shape[3]

    @property
    def start_index(self) -> int:
        return -(self.nblocks - 1) * self.P

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.P) * self.dt

    def block(self, k: int) -> np.ndarray:
        """Values on ``[-kT, -kT + T)``, equivalently on ``[0, T)`` along ``theta_{-kT} w``."""
        if not 0 <= k < self.nblocks:
            raise IndexError(f"block {k} not stored (have {self.nblocks})")
        return self.values[:, self.nblocks - 1 - k]

    @property
    def period(self) -> np.ndarray:
        return self.block(0)

    def window(self) -> np.ndarray:
        return self.values.reshape(self.paths, self.nblocks * self.P, self.d)

    def shift_back(self, j: int) -> "PeriodicProcess":
        """The same process read along ``theta_{-jT} w`` for every path."""
        if not 0 <= j < self.nblocks:
            raise IndexError("cannot shift past the stored window")
        if j == 0:
            return self
        return PeriodicProcess(self.values[:, : self.nblocks - j],
                               self.ensemble.shift_steps(-j * self.P), self.T, self.dt,
                               bound=self.bound, check=False)

    def same_paths(self, other: "PeriodicProcess") -> bool:
        a, b = self.ensemble, other.ensemble
        return (len(a) == len(b) and self.P == other.P and self.dt == other.dt
                and all(g.seed == h.seed and g.offset == h.offset
                        for g, h in zip(a.grids, b.grids)))

    # -- constructors ----------------------------------------------------------

    @classmethod
    def constant(cls, ensemble: Ensemble, spec: SystemSpec, value, nblocks: int,
                 bound=None) -> "PeriodicProcess":
        """A deterministic constant; stored as a broadcast view, so it costs no memory."""
        P = period_steps(spec, ensemble.dt)
        value = np.broadcast_to(np.asarray(value, dtype=float), (spec.d,))
        vals = np.broadcast_to(value, (len(ensemble), nblocks, P, spec.d))
        return cls(vals, ensemble, spec.T, ensemble.dt,
                   bound=spec.feedback.N if bound is None else bound)

    @classmethod
    def from_phase(cls, ensemble: Ensemble, spec: SystemSpec, fn: Callable, nblocks: int
                   ) -> "PeriodicProcess":
        """Deterministic T-periodic process ``fn(t)`` for phases ``t`` in ``[0, T)``."""
        P = period_steps(spec, ensemble.dt)
        per = np.asarray(fn(np.arange(P) * ensemble.dt), dtype=float).reshape(P, spec.d)
        vals = np.broadcast_to(per, (len(ensemble), nblocks, P, spec.d))
        return cls(vals, ensemble, spec.T, ensemble.dt, bound=spec.feedback.N)

    @classmethod
    def random(cls, ensemble: Ensemble, spec: SystemSpec, nblocks: int, seed: int,
               lag: Optional[float] = None) -> "PeriodicProcess":
        """A random element of M: ``N_i (1 + sin(a_i + b_i sin(2 pi t/T + c_i) + g_i dW_i)) / 2``.

        ``dW_i`` is the path increment over the preceding ``lag`` (default T/8),
        so the process at ``t + T`` on ``w`` equals the one at ``t`` on
        ``theta_T w``.
        """
        rng = np.random.default_rng(seed)
        d = spec.d
        P = period_steps(spec, ensemble.dt)
        a, c = rng.uniform(0, 2 * math.pi, size=(2, d))
        b = rng.uniform(0.5, 3.0, size=d)
        g = rng.uniform(1.0, 6.0, size=d)
        lag_steps = max(1, int(round((spec.T / 8 if lag is None else lag) / ensemble.dt)))
        i0 = -(nblocks - 1) * P
        inc = ensemble.inc_steps(i0 - lag_steps, P)
        csum = np.concatenate([np.zeros((len(ensemble), 1, d)), np.cumsum(inc, axis=1)], axis=1)
        lagged = csum[:, lag_steps: lag_steps + nblocks * P] - csum[:, : nblocks * P]
        phase = np.tile(np.arange(P) * ensemble.dt, nblocks)[None, :, None]
        N = spec.feedback.N
        vals = 0.5 * N * (1.0 + np.sin(a + b * np.sin(2 * math.pi * phase / spec.T + c) + g * lagged))
        vals = np.clip(vals, 0.0, N)
        return cls(vals.reshape(len(ensemble), nblocks, P, d), ensemble, spec.T, ensemble.dt,
                   bound=N)


# -- operators -----------------------------------------------------------------


def apply_K(spec: SystemSpec, envelope: DecayEnvelope, v: PeriodicProcess,
            cfg: GainConfig = GainConfig()) -> PeriodicProcess:
    """``K(v)(t) = int_{-inf}^t Phi(t-s, theta_s w) v(s) ds`` truncated at ``M_trunc``.

    The result keeps ``v.nblocks - (B - 1)`` blocks, each integrated over at
    least ``M_trunc``.  Negative quadrature artifacts are set to zero and
    counted in ``clamped``.
    """
    _check_scheme(cfg.scheme)
    cfg.check_tail(spec, envelope)
    B = cfg.blocks(spec, envelope)
    nb_out = v.nblocks - (B - 1)
    if nb_out < 1:
        raise WindowError(f"input holds {v.nblocks} periods, K needs at least {B}")
    P, dt = v.P, v.dt
    n = v.nblocks * P
    first = (B - 1) * P
    dW = v.ensemble.inc_steps(v.start_index, P)
    V = v.window()
    X = np.zeros((v.paths, spec.d))
    out = np.empty((v.paths, nb_out * P, spec.d))
    b = spec.B
    for m in range(n):
        if m >= first:
            out[:, m - first] = X
        X = step(spec.A, spec.sigma, b, X + V[:, m] * dt, dW[:, m], dt, None, cfg.scheme)
    neg = out < 0
    clamped = int(np.count_nonzero(neg))
    if clamped:
        out[neg] = 0.0
    return PeriodicProcess(out.reshape(v.paths, nb_out, P, spec.d), v.ensemble, v.T, dt,
                           clamped=clamped, check=False)


def _feedback_blocks(spec: SystemSpec, Y: PeriodicProcess) -> np.ndarray:
    fb = spec.feedback
    if fb.periodic:
        t = np.arange(Y.P) * Y.dt
        t = np.broadcast_to(t, (Y.nblocks, Y.P))
    else:
        t = (Y.start_index + np.arange(Y.nblocks * Y.P)).reshape(Y.nblocks, Y.P) * Y.dt
    return fb(t[None, :, :], Y.values)


def apply_Kh(spec: SystemSpec, envelope: DecayEnvelope, u: PeriodicProcess,
             cfg: GainConfig = GainConfig()) -> PeriodicProcess:
    """Gain operator ``K^h(u)(t) = h(t, K(u)(t))``."""
    Y = apply_K(spec, envelope, u, cfg)
    out = PeriodicProcess(_feedback_blocks(spec, Y), u.ensemble, u.T, u.dt,
                          bound=spec.feedback.N, check=not spec.feedback.estimated)
    out.state = Y
    return out


@dataclass(frozen=True)
class RhoEstimate:
    value: float
    se: float
    argmax_t: float
    per_t_mean: np.ndarray = field(repr=False)
    per_t_se: np.ndarray = field(repr=False)

    def __float__(self):
        return self.value


def metric_rho(f1: PeriodicProcess, f2: PeriodicProcess) -> RhoEstimate:
    """``sup_t E max_i |f1_i - f2_i|`` over the stored period ``[0, T)``."""
    if not f1.same_paths(f2):
        raise ValueError("processes live on different ensembles or grids")
    diff = np.abs(f1.period - f2.period).max(axis=-1)  # (paths, P)
    n = diff.shape[0]
    # shifted mean: exact when every path agrees
    mean = diff[0] + (diff - diff[0]).mean(axis=0)
    se = diff.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    k = int(np.argmax(mean))
    return RhoEstimate(float(mean[k]), float(se[k]), k * f1.dt, mean, se)


@dataclass(frozen=True)
class ContractionSample:
    ratio: float
    se: float
    rho_in: RhoEstimate
    rho_out: RhoEstimate


def contraction_ratio(spec: SystemSpec, envelope: DecayEnvelope, f1: PeriodicProcess,
                      f2: PeriodicProcess, cfg: GainConfig = GainConfig()) -> ContractionSample:
    """``rho(K^h f1, K^h f2) / rho(f1, f2)`` with a delta-method standard error."""
    g1 = apply_Kh(spec, envelope, f1, cfg)
    g2 = apply_Kh(spec, envelope, f2, cfg)
    r_in = metric_rho(f1, f2)
    r_out = metric_rho(g1, g2)
    if r_in.value == 0:
        raise ValueError("the two inputs coincide")
    ratio = r_out.value / r_in.value
    rel = math.hypot(r_in.se / r_in.value, r_out.se / r_out.value if r_out.value else 0.0)
    return ContractionSample(ratio, ratio * rel, r_in, r_out)


def picard_blocks(spec: SystemSpec, envelope: DecayEnvelope, cfg: GainConfig, k_max: int) -> int:
    """Blocks an initial process needs for ``k_max`` iterations plus one final K."""
    B = cfg.blocks(spec, envelope)
    return B + k_max * (B - 1)


@dataclass
class PicardResult:
    u: PeriodicProcess
    residuals: list
    residual_se: list
    converged: bool
    iterations: int

    @property
    def ratios(self) -> list:
        r = self.residuals
        return [r[k + 1] / r[k] for k in range(len(r) - 1) if r[k] > 0]

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    def as_dict(self) -> dict:
        return {"residuals": self.residuals, "residual_se": self.residual_se,
                "ratios": self.ratios, "max_ratio": self.max_ratio,
                "converged": self.converged, "iterations": self.iterations}


def picard_fixed_point(spec: SystemSpec, envelope: DecayEnvelope, cfg: GainConfig, u0,
                       k_max: int = 12, tol: float = 1e-10, ensemble: Optional[Ensemble] = None,
                       kappa: Optional[float] = None) -> PicardResult:
    """Iterate ``u_{k+1} = K^h(u_k)`` until ``rho(u_{k+1}, u_k) <= tol``.

    ``u0`` is a :class:`PeriodicProcess` or a constant vector (then
    ``ensemble`` is required and the window is sized for ``k_max``
    iterations).  Warns when the supplied small-gain constant is not below 1.
    """
    if kappa is not None and not kappa < 1:
        warnings.warn(f"small-gain constant {kappa:.4g} >= 1; convergence is not guaranteed")
    if not isinstance(u0, PeriodicProcess):
        if ensemble is None:
            raise ValueError("a constant start needs an ensemble")
        u0 = PeriodicProcess.constant(ensemble, spec, u0,
                                      picard_blocks(spec, envelope, cfg, k_max))
    B = cfg.blocks(spec, envelope)
    u = u0
    residuals, ses = [], []
    converged = False
    k = 0
    while k < k_max and u.nblocks - (B - 1) >= B:
        nxt = apply_Kh(spec, envelope, u, cfg)
        r = metric_rho(nxt, u)
        residuals.append(r.value)
        ses.append(r.se)
        u = nxt
        k += 1
        if r.value <= tol:
            converged = True
            break
    return PicardResult(u, residuals, ses, converged, k)


def realize_rps(spec: SystemSpec, envelope: DecayEnvelope, cfg: GainConfig,
                u_star: PeriodicProcess) -> PeriodicProcess:
    """The random periodic solution ``Y = K(u*)``."""
    return apply_K(spec, envelope, u_star, cfg)


# -- export --------------------------------------------------------------------


def export_residuals_json(result: PicardResult, path, **extra) -> None:
    data = result.as_dict()
    data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_quantiles_csv(Y: PeriodicProcess, path) -> None:
    """Per grid time of ``[0, T)``: 5%, 50% and 95% ensemble quantiles of each component."""
    q = np.quantile(Y.period, [0.05, 0.5, 0.95], axis=0)  # (3, P, d)
    header = ["t"]
    for i in range(Y.d):
        header += [f"x{i + 1}_q05", f"x{i + 1}_median", f"x{i + 1}_q95"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for p, t in enumerate(Y.times):
            row = [f"{t:.17g}"]
            for i in range(Y.d):
                row += [f"{q[j, p, i]:.17g}" for j in range(3)]
            wr.writerow(row)
