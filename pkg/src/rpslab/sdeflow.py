"""Forward stochastic flow of the feedback system and its exact identities.

All integrators here advance with :func:`rpslab.linearflow.step`, reading
increments by absolute grid index.  A periodic feedback is evaluated at the
phase ``(i mod P) * dt`` where ``P = T / dt``, so a run shifted by whole
periods reproduces every floating-point operation of the unshifted one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linearflow import _check_scheme, integrate_propagator, step
from .system import SystemSpec
from .wiener import Ensemble, WienerGrid, to_steps

__all__ = [
    "Trajectory",
    "BlowUp",
    "evolve",
    "evolve_indices",
    "feedback_at",
    "period_steps",
    "verify_flow_property",
    "verify_period_shift",
    "mild_form_residual",
    "export_trajectory_csv",
    "export_summary_json",
]


class BlowUp(FloatingPointError):
    pass


def period_steps(spec: SystemSpec, dt: float) -> int:
    """``T / dt`` as an integer; raises if the period is not on the grid."""
    try:
        return to_steps(spec.T, dt)
    except ValueError:
        raise ValueError(f"period T={spec.T} is not a multiple of dt={dt}") from None


def feedback_at(spec: SystemSpec, i, x, dt: float, P: Optional[int] = None):
    """``h(t_i, |x|)`` with the time taken modulo the period for periodic feedback."""
    fb = spec.feedback
    if fb.periodic:
        P = period_steps(spec, dt) if P is None else P
        t = np.mod(i, P) * dt
    else:
        t = np.asarray(i) * dt
    return fb(t, x)


@dataclass(frozen=True)
class Trajectory:
    """States at grid indices ``i0..i1``; ``samples[..., m, :]`` is the state at ``i0 + m``."""

    samples: np.ndarray
    i0: int
    dt: float
    x0: np.ndarray
    projection_events: int
    steps: int
    path: object = field(default=None, repr=False, compare=False)

    @property
    def times(self) -> np.ndarray:
        return (self.i0 + np.arange(self.samples.shape[-2])) * self.dt

    @property
    def final(self) -> np.ndarray:
        return self.samples[..., -1, :]

    def at(self, i: int) -> np.ndarray:
        return self.samples[..., i - self.i0, :]

    @property
    def projection_fraction(self) -> float:
        return self.projection_events / max(self.steps, 1)


def evolve_indices(spec: SystemSpec, w, i0: int, i1: int, x0, scheme: str = "em",
                   dW: Optional[np.ndarray] = None, store: bool = True) -> Trajectory:
    """Integrate from grid index ``i0`` to ``i1``.

    ``x0`` broadcasts against the path axis of an ensemble.  After each step
    negative components are set to zero and counted; a non-finite state
    raises :class:`BlowUp`.  ``dW`` overrides the increments read from ``w``.
    """
    _check_scheme(scheme)
    if i1 < i0:
        raise ValueError("end index precedes start index")
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < 0):
        raise ValueError("initial state must lie in the nonnegative orthant")
    dt = w.dt
    if dW is None:
        if i1 > i0 and not w.covers(i0, i1):
            raise IndexError(f"path does not cover [{i0 * dt}, {i1 * dt}]")
        dW = w.inc_steps(i0, i1) if i1 > i0 else None
    lead = dW.shape[:-2] if dW is not None else (len(w),) if isinstance(w, Ensemble) else ()
    x = np.broadcast_to(x0, np.broadcast_shapes(lead + (spec.d,), x0.shape)).copy()
    n = i1 - i0
    P = period_steps(spec, dt) if spec.feedback.periodic else None
    out = np.empty(x.shape[:-1] + (n + 1 if store else 1, spec.d))
    out[..., 0, :] = x
    b = spec.B
    events = 0
    for m in range(n):
        h = feedback_at(spec, i0 + m, x, dt, P)
        x = step(spec.A, spec.sigma, b, x, dW[..., m, :], dt, h, scheme)
        neg = x < 0
        if neg.any():
            events += int(np.count_nonzero(neg))
            x = np.where(neg, 0.0, x)
        if not np.all(np.isfinite(x)):
            raise BlowUp(f"non-finite state at t={(i0 + m + 1) * dt} (step {m + 1} of {n})")
        if store:
            out[..., m + 1, :] = x
    if not store:
        out[..., 0, :] = x
        return Trajectory(out, i1, dt, x0, events, n * int(np.prod(x.shape[:-1])), w)
    return Trajectory(out, i0, dt, x0, events, n * int(np.prod(x.shape[:-1])), w)


def evolve(spec: SystemSpec, w, s: float, t1: float, x0, scheme: str = "em") -> Trajectory:
    """Euler-Maruyama flow ``phi(t, s, w) x0`` on the grid times of ``[s, t1]``."""
    return evolve_indices(spec, w, to_steps(s, w.dt), to_steps(t1, w.dt), x0, scheme)


def verify_flow_property(spec: SystemSpec, w, s: float, r: float, t: float, x0,
                         scheme: str = "em") -> float:
    """``|phi(t,s)x0 - phi(t,r)(phi(r,s)x0)|`` in the max norm."""
    if not s <= r <= t:
        raise ValueError("need s <= r <= t")
    direct = evolve(spec, w, s, t, x0, scheme).final
    mid = evolve(spec, w, s, r, x0, scheme).final
    composed = evolve(spec, w, r, t, mid, scheme).final
    return float(np.max(np.abs(direct - composed)))


def verify_period_shift(spec: SystemSpec, w: WienerGrid, s: float, t: float, x0,
                        scheme: str = "em", periods: int = 1) -> float:
    """``max |phi(. + kT, s + kT, w) x0 - phi(., s, theta_{kT} w) x0|`` over the grid of ``[s, t]``."""
    dt = w.dt
    P = to_steps(spec.T, dt)
    i_s, i_t = to_steps(s, dt), to_steps(t, dt)
    k = periods * P
    on_w = evolve_indices(spec, w, i_s + k, i_t + k, x0, scheme).samples
    on_shift = evolve_indices(spec, w.shift_steps(k), i_s, i_t, x0, scheme).samples
    return float(np.max(np.abs(on_w - on_shift)))


def mild_form_residual(spec: SystemSpec, w: WienerGrid, s: float, t: float, x0,
                       scheme: str = "em") -> float:
    """Compare the flow at ``t`` with ``Phi(t-s) x0 + sum_r Phi(t-r, theta_r w) h(r, X_r) dt``.

    The transition matrices come from one propagator run via
    ``Psi(t) Psi(r)^{-1}``; the integral is a left-endpoint sum.
    """
    traj = evolve(spec, w, s, t, x0, scheme)
    prop = integrate_propagator(spec, w, s, t, scheme)
    dt = w.dt
    i_s, i_t = to_steps(s, dt), to_steps(t, dt)
    x0 = np.asarray(x0, dtype=float)
    # the propagator's columns advance exactly like states, so Psi(t) x0 is exact
    # only for a basis vector; use the matrix product for general x0
    Psi_t = prop.at(i_t)
    total = Psi_t @ x0
    P = period_steps(spec, dt) if spec.feedback.periodic else None
    for i in range(i_s, i_t):
        h = feedback_at(spec, i, traj.at(i), dt, P)
        if np.any(h):
            total = total + prop.transition(i, i_t) @ h * dt
    return float(np.max(np.abs(traj.final - total)))


def export_trajectory_csv(traj: Trajectory, path, path_index: Optional[int] = None) -> None:
    """Columns ``t, x1..xd`` with 17 significant digits."""
    X = traj.samples if path_index is None else traj.samples[path_index]
    if X.ndim != 2:
        raise ValueError("select a single path for export")
    d = X.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"x{i + 1}" for i in range(d)])
        for t, row in zip(traj.times, X):
            wr.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def export_summary_json(path, **fields) -> None:
    with open(path, "w") as fh:
        json.dump(fields, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
