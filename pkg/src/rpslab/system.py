"""System data model: drift, diagonal multiplicative noise and periodic feedback."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.optimize

from .expr import ExprEvalError, FeedbackExpr

__all__ = [
    "SpecError",
    "FeedbackSpec",
    "SystemSpec",
    "goodwin_feedback",
    "othmer_tyson_feedback",
    "competitive_feedback",
    "custom_feedback",
    "othmer_tyson_exact_lipschitz",
]

TWO_PI = 2.0 * math.pi
BUILTIN_KINDS = ("goodwin", "othmer_tyson", "competitive")


class SpecError(ValueError):
    """Invalid system description.  ``line``/``col`` are 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None):
        self.line = line
        self.col = col
        loc = ""
        if line is not None:
            loc = f"line {line}" + (f", column {col}" if col is not None else "") + ": "
        super().__init__(loc + message)


@dataclass(frozen=True, eq=False)
class FeedbackSpec:
    """Feedback ``h(t, x)`` together with its sup bound ``N`` and Lipschitz constant ``L``.

    ``periodic`` means evaluation may use the phase ``t mod T`` of the
    calling grid; it is True for builtins and for custom expressions whose
    periodicity passed validation.
    """

    kind: str
    d: int
    period: float
    N: np.ndarray
    L: float
    L_provenance: str
    N_provenance: str
    params: dict = field(default_factory=dict)
    exprs: tuple = ()
    periodic: bool = True

    @property
    def estimated(self) -> bool:
        return self.L_provenance == "estimated" or self.N_provenance == "estimated"

    @property
    def structural_direction(self) -> Optional[str]:
        if self.kind == "othmer_tyson":
            return "order-preserving"
        if self.kind in ("goodwin", "competitive"):
            return "anti-order-preserving"
        return None

    def __call__(self, t, x):
        """Evaluate h(t, |x|); ``x`` has the state on its last axis."""
        x = np.abs(np.asarray(x, dtype=float))
        if self.kind == "custom":
            comps = [e(t, x) for e in self.exprs]
            shape = np.broadcast_shapes(np.shape(t), x.shape[:-1])
            return np.stack([np.broadcast_to(c, shape) for c in comps], axis=-1)
        p = self.params
        s = np.sin(t)
        if self.kind == "competitive":
            m = p["m"]
            K = np.asarray(p["K"], dtype=float)
            total = np.power(x[..., 0], m)
            for j in range(1, self.d):
                total = total + np.power(x[..., j], m)
            return np.abs(s)[..., None] + 1.0 / (K + total[..., None])
        xm = np.power(x[..., self.d - 1], p["m"])
        if self.kind == "goodwin":
            first = p["V"] / (p["K"] + s + xm)
        else:
            first = p["k0"] * (1.0 + xm) / (p["K"] + s + xm)
        out = np.zeros(np.broadcast_shapes(np.shape(first), x.shape[:-1]) + (self.d,))
        out[..., 0] = first
        return out

    def with_periodic(self, periodic: bool) -> "FeedbackSpec":
        return replace(self, periodic=periodic)


def goodwin_feedback(d: int, V: float, K: float, m: float) -> FeedbackSpec:
    """``h = (V / (K + sin t + x_d^m), 0, ..., 0)``; decreasing in the state."""
    _check_hill(K, m, V, "V")
    N = np.zeros(d)
    N[0] = V / (K - 1.0)
    return FeedbackSpec(
        "goodwin", d, TWO_PI, N, m * V / (K - 1.0), "closed-form", "closed-form",
        params={"V": float(V), "K": float(K), "m": float(m)},
    )


def othmer_tyson_feedback(
    d: int, k0: float, K: float, m: float, lipschitz: str = "bound"
) -> FeedbackSpec:
    """``h = (k0 (1 + x_d^m) / (K + sin t + x_d^m), 0, ..., 0)``; increasing in the state.

    ``lipschitz="bound"`` gives m k0 K / (K - 1); ``"exact"`` the attained
    supremum of the derivative.
    """
    _check_hill(K, m, k0, "k0")
    N = np.zeros(d)
    # (1 + y) / (c + y) increases to 1 as y grows because c = K + sin t > 1
    N[0] = k0
    if lipschitz == "bound":
        L, prov = m * k0 * K / (K - 1.0), "closed-form"
    elif lipschitz == "exact":
        L, prov = othmer_tyson_exact_lipschitz(k0, K, m), "closed-form-exact"
    else:
        raise SpecError(f"unknown lipschitz mode {lipschitz!r}")
    return FeedbackSpec(
        "othmer_tyson", d, TWO_PI, N, L, prov, "closed-form",
        params={"k0": float(k0), "K": float(K), "m": float(m), "lipschitz": lipschitz},
    )


def othmer_tyson_exact_lipschitz(k0: float, K: float, m: float) -> float:
    """sup over t, x >= 0 of k0 m (K + sin t - 1) x^(m-1) / (K + sin t + x^m)^2.

    For fixed c = K + sin t the maximiser is x^m = (m-1) c / (m+1); the
    remaining factor (c-1) c^(-(m+1)/m) peaks at c = m + 1, clipped to
    [K-1, K+1].
    """
    c = min(max(m + 1.0, K - 1.0), K + 1.0)
    y = (m - 1.0) * c / (m + 1.0)
    return k0 * m * (c - 1.0) * y ** ((m - 1.0) / m) / (c + y) ** 2


def competitive_feedback(Ks: Sequence[float], m: float) -> FeedbackSpec:
    """``h_i = |sin t| + 1 / (K_i + sum_j x_j^m)``; decreasing, period pi."""
    Ks = np.asarray(Ks, dtype=float)
    if np.any(Ks <= 1.0):
        raise SpecError("competitive feedback requires every K_i > 1")
    if m <= 1.0:
        raise SpecError("feedback exponent m must exceed 1")
    d = len(Ks)
    return FeedbackSpec(
        "competitive", d, math.pi, 1.0 + 1.0 / Ks, m / float(Ks.min()),
        "closed-form", "closed-form",
        params={"K": tuple(float(k) for k in Ks), "m": float(m)},
    )


def _check_hill(K, m, scale, scale_name):
    if K <= 2.0:
        raise SpecError("feedback requires K > 2")
    if m <= 1.0:
        raise SpecError("feedback exponent m must exceed 1")
    if scale <= 0.0:
        raise SpecError(f"feedback requires {scale_name} > 0")


# -- custom feedback -------------------------------------------------------

SAMPLE_SEED = 20240607
PERIODIC_SAMPLES = 64
SAFETY_FACTOR = 1.05


def _orthant_lattice(d: int, radius: float = 1e6, per_axis: int = 13, max_points: int = 4096):
    axis = np.concatenate([[0.0], np.logspace(-4, math.log10(radius), per_axis - 1)])
    if per_axis**d <= max_points:
        grids = np.meshgrid(*([axis] * d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)
    rng = np.random.default_rng(SAMPLE_SEED)
    return axis[rng.integers(0, per_axis, size=(max_points, d))]


def custom_feedback(
    exprs: Sequence[FeedbackExpr], T: float, validate_periodicity: bool = True
) -> FeedbackSpec:
    """Build a custom feedback, estimating N and L by sampling.

    Periodicity is checked on 64 times and 64 random states; the estimates
    are sampled suprema inflated by 5%.  With ``validate_periodicity=False``
    the check is skipped and the feedback is evaluated at absolute time.
    """
    exprs = tuple(exprs)
    d = len(exprs)
    if any(e.d != d for e in exprs):
        raise SpecError("every feedback expression must use the system dimension")
    fb = FeedbackSpec("custom", d, float(T), np.zeros(d), 0.0, "estimated", "estimated",
                      exprs=exprs, periodic=False)
    rng = np.random.default_rng(SAMPLE_SEED)
    ts = np.linspace(0.0, T, 16, endpoint=False)
    pts = _orthant_lattice(d)
    try:
        if validate_periodicity:
            tp = np.linspace(0.0, T, PERIODIC_SAMPLES, endpoint=False)[:, None]
            xp = rng.uniform(0.0, 10.0, size=(PERIODIC_SAMPLES, d))[None, :, :]
            h0 = fb(tp, xp)
            h1 = fb(tp + T, xp)
            tol = 1e-12 * np.maximum(1.0, np.abs(h0))
            if np.any(np.abs(h1 - h0) > tol):
                raise SpecError(f"custom feedback is not {T}-periodic in t")
        vals = fb(ts[:, None], pts[None, :, :])
        if np.any(vals < 0):
            raise SpecError("custom feedback takes negative values on the orthant")
        N = SAFETY_FACTOR * np.abs(vals).max(axis=(0, 1))
        L = SAFETY_FACTOR * _sampled_lipschitz(fb, ts, pts)
    except ExprEvalError as exc:
        raise SpecError(f"feedback not finite on the orthant sample: {exc}") from exc
    return replace(fb, N=N, L=float(L), periodic=validate_periodicity)


def _partials(fb: FeedbackSpec, t, pts, j: int) -> np.ndarray:
    """Central differences of every ``h_i`` in ``x_j`` (one-sided at the boundary)."""
    step = 1e-6 * np.maximum(1.0, pts[..., j])
    central = pts[..., j] >= step
    up = pts.copy()
    up[..., j] += step
    down = pts.copy()
    down[..., j] = np.where(central, pts[..., j] - step, pts[..., j])
    width = np.where(central, 2 * step, step)
    return (fb(t, up) - fb(t, down)) / width[..., None]


def _sampled_lipschitz(fb: FeedbackSpec, ts, pts, refine: int = 8) -> float:
    """Largest sampled partial derivative, polished by local searches from the best candidates."""
    rng = np.random.default_rng(SAMPLE_SEED + 1)
    d = pts.shape[1]
    near = rng.uniform(0.0, 10.0, size=(4096, d))
    cand = np.concatenate([pts, near])
    best = 0.0
    starts = []
    for j in range(d):
        deriv = np.abs(_partials(fb, ts[:, None], cand[None], j))  # (t, pts, i)
        flat = deriv.max(axis=-1)
        best = max(best, float(flat.max()))
        for k in np.argsort(flat, axis=None)[::-1][:refine]:
            it, ip = np.unravel_index(k, flat.shape)
            starts.append((j, ts[it], cand[ip]))

    for j, t0, x0 in starts:
        def neg(z, j=j):
            x = np.abs(z[1:])
            return -float(np.abs(_partials(fb, z[0], x, j)).max())
        res = scipy.optimize.minimize(neg, np.concatenate([[t0], x0]), method="Nelder-Mead",
                                      options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 400 * (d + 1)})
        best = max(best, -float(res.fun))
    return best


# -- system ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """dX = (A X + h(t, X)) dt + sum_k sigma_k X dW^k with diagonal sigma_k.

    ``sigma[k, i]`` is the i-th diagonal entry of the k-th noise matrix.
    ``lam`` and ``envelope_method`` carry optional decay-envelope choices
    from the spec file.
    """

    d: int
    A: np.ndarray
    sigma: np.ndarray
    feedback: FeedbackSpec
    T: float
    name: str = ""
    lam: Optional[float] = None
    envelope_method: Optional[str] = None

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        sigma = np.array(self.sigma, dtype=float)
        d = self.d
        if A.shape != (d, d):
            raise SpecError(f"drift matrix must be {d}x{d}, got {A.shape}")
        if sigma.shape != (d, d):
            raise SpecError(f"noise must be {d} diagonals of length {d}, got {sigma.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(sigma))):
            raise SpecError("drift and noise entries must be finite")
        off = A - np.diag(np.diag(A))
        if np.any(off < 0):
            i, j = np.argwhere(off < 0)[0]
            raise SpecError(f"non-cooperative drift: a_{i + 1}{j + 1} = {A[i, j]} < 0")
        if not self.T > 0:
            raise SpecError("period T must be positive")
        if self.feedback.d != d:
            raise SpecError(f"feedback has dimension {self.feedback.d}, system has {d}")
        if self.feedback.kind != "custom":
            ratio = self.T / self.feedback.period
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise SpecError(
                    f"period T={self.T} is not a multiple of the feedback period "
                    f"{self.feedback.period}"
                )
        A.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_matrices(cls, A, sigma_mats, feedback, T, **kw) -> "SystemSpec":
        """Build from full noise matrices, rejecting non-diagonal ones."""
        mats = [np.asarray(s, dtype=float) for s in sigma_mats]
        d = len(A)
        if len(mats) > d:
            raise SpecError(f"at most {d} noise matrices allowed")
        sigma = np.zeros((d, d))
        for k, s in enumerate(mats):
            if s.shape != (d, d):
                raise SpecError(f"noise matrix {k + 1} must be {d}x{d}")
            if np.any(s - np.diag(np.diag(s))):
                raise SpecError(f"noise matrix {k + 1} is not diagonal")
            sigma[k] = np.diag(s)
        return cls(d, A, sigma, feedback, T, **kw)

    @property
    def B(self) -> np.ndarray:
        """Diagonal of sum_k sigma_k^2 (the Ito-Stratonovich correction)."""
        return (self.sigma**2).sum(axis=0)

    @property
    def alphas(self) -> np.ndarray:
        return -np.diag(self.A)

    @property
    def component_sigmas(self) -> np.ndarray:
        """sigma_i when each component has its own noise source (``sigma[k,i]=0`` for k != i)."""
        return np.diag(self.sigma).copy()

    def has_component_noise(self) -> bool:
        return not np.any(self.sigma - np.diag(np.diag(self.sigma)))

    def is_single_loop(self) -> bool:
        d = self.d
        expect = np.diag(np.diag(self.A)) + np.diag(np.ones(d - 1), -1)
        return (
            bool(np.all(np.diag(self.A) < 0))
            and np.array_equal(self.A, expect)
            and self.has_component_noise()
        )

    def is_diagonal(self) -> bool:
        return (
            bool(np.all(np.diag(self.A) < 0))
            and not np.any(self.A - np.diag(np.diag(self.A)))
            and self.has_component_noise()
        )

    def with_feedback(self, feedback: FeedbackSpec) -> "SystemSpec":
        return replace(self, feedback=feedback)
