"""Seed-reproducible two-sided Brownian paths on a uniform grid.

Each Gaussian draw is keyed on ``(seed, component, absolute cell index)``
through numpy's counter-based Philox generator, so a grid can be extended in
either direction without touching the draws it already holds.  Shifts
``theta_s`` are index offsets into shared storage, and increments are always
read back as differences of the stored cumulative values so that
``values[i+1] - values[i]`` equals the increment exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "WienerGrid",
    "Ensemble",
    "GridTooLarge",
    "sample_path",
    "shift",
    "increments_on",
    "to_steps",
]

CHUNK = 1024
MEMORY_BUDGET = 2 * 1024**3
_M64 = (1 << 64) - 1
_MAGIC = b"RPSW"
_HEADER = struct.Struct("<4sHdddIQ")


class GridTooLarge(MemoryError):
    pass


def to_steps(t: float, dt: float) -> int:
    """Convert a time to a whole number of steps, rejecting off-grid times."""
    n = round(t / dt)
    if abs(n * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not a multiple of dt={dt}")
    return int(n)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid ``t_i = i * dt`` for ``i_min <= i <= i_max``."""

    dt: float
    i_min: int
    i_max: int
    d: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.i_min < 0 <= self.i_max:
            raise ValueError("grid must satisfy t_min < 0 <= t_max")
        if self.d < 1:
            raise ValueError("path dimension must be positive")

    @classmethod
    def from_times(cls, dt: float, t_min: float, t_max: float, d: int) -> "GridSpec":
        return cls(dt, to_steps(t_min, dt), to_steps(t_max, dt), d)

    @property
    def t_min(self) -> float:
        return self.i_min * self.dt

    @property
    def t_max(self) -> float:
        return self.i_max * self.dt

    @property
    def n_cells(self) -> int:
        return self.i_max - self.i_min


def _draws(seed: int, k: int, i_min: int, i_max: int) -> np.ndarray:
    """Standard normals for cells ``i_min..i_max-1`` of component ``k``."""
    out = np.empty(i_max - i_min)
    c0, c1 = i_min // CHUNK, (i_max - 1) // CHUNK
    key = ((k & 0xFFFFFFFF) << 64) | (seed & _M64)
    for c in range(c0, c1 + 1):
        gen = np.random.Generator(np.random.Philox(key=key, counter=(c & _M64) << 64))
        block = gen.standard_normal(CHUNK)
        lo = max(i_min, c * CHUNK)
        hi = min(i_max, (c + 1) * CHUNK)
        out[lo - i_min: hi - i_min] = block[lo - c * CHUNK: hi - c * CHUNK]
    return out


def _anchor(raw: np.ndarray, i_min: int) -> np.ndarray:
    """Cumulative values with W(0) = 0, accumulated outward from 0."""
    p0 = -i_min
    values = np.empty((raw.shape[0] + 1, raw.shape[1]))
    values[p0] = 0.0
    values[p0 + 1:] = np.cumsum(raw[p0:], axis=0)
    values[:p0] = (-np.cumsum(raw[:p0][::-1], axis=0))[::-1]
    return values


class WienerGrid:
    """A d-dimensional two-sided Brownian path, possibly viewed through a shift.

    ``offset`` is the shift in steps: this object represents
    ``theta_{offset*dt} omega`` where ``omega`` is the stored base path.
    """

    def __init__(self, spec: GridSpec, seed: int, raw: np.ndarray, offset: int = 0,
                 _values: np.ndarray | None = None):
        self.base_spec = spec
        self.seed = int(seed)
        self.raw = raw
        self.offset = int(offset)
        self._values = _anchor(raw, spec.i_min) if _values is None else _values
        for arr in (self.raw, self._values):
            arr.flags.writeable = False

    # -- geometry of this view ---------------------------------------------

    @property
    def dt(self) -> float:
        return self.base_spec.dt

    @property
    def d(self) -> int:
        return self.base_spec.d

    @property
    def i_min(self) -> int:
        return self.base_spec.i_min - self.offset

    @property
    def i_max(self) -> int:
        return self.base_spec.i_max - self.offset

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.dt, min(self.i_min, -1), max(self.i_max, 0), self.d)

    def _pos(self, i):
        return np.asarray(i) + self.offset - self.base_spec.i_min

    # -- data ----------------------------------------------------------------

    @property
    def values(self) -> np.ndarray:
        """W at every grid index ``i_min..i_max`` of this view."""
        return self.values_at(np.arange(self.i_min, self.i_max + 1))

    @property
    def increments(self) -> np.ndarray:
        return self.inc_steps(self.i_min, self.i_max)

    def values_at(self, i) -> np.ndarray:
        i = np.asarray(i)
        if np.any(i < self.i_min) or np.any(i > self.i_max):
            raise IndexError("grid index outside the stored path")
        w = self._values[self._pos(i)]
        if self.offset == 0:
            return w
        return w - self._values[self._pos(0)]

    def W(self, t) -> np.ndarray:
        return self.values_at(to_steps(t, self.dt))

    def inc_steps(self, i0: int, i1: int) -> np.ndarray:
        """Increments of cells ``i0..i1-1``, defined as differences of stored values."""
        if i0 >= i1:
            raise ValueError("empty increment interval")
        if i0 < self.i_min or i1 > self.i_max:
            raise IndexError(f"cells [{i0}, {i1}) outside stored grid [{self.i_min}, {self.i_max})")
        p = self._pos(i0)
        v = self._values[p: p + (i1 - i0) + 1]
        return v[1:] - v[:-1]

    def increments_on(self, a: float, b: float) -> np.ndarray:
        return self.inc_steps(to_steps(a, self.dt), to_steps(b, self.dt))

    # -- shifts and extension ----------------------------------------------

    def shift_steps(self, n: int) -> "WienerGrid":
        if n == 0:
            return self
        return WienerGrid(self.base_spec, self.seed, self.raw, self.offset + n, self._values)

    def shift(self, s: float) -> "WienerGrid":
        """theta_s: ``(theta_s w)(t) = w(t + s) - w(s)``; ``s`` must be on the grid."""
        return self.shift_steps(to_steps(s, self.dt))

    def extend(self, i_min: int | None = None, i_max: int | None = None) -> "WienerGrid":
        """A copy of the base path covering at least ``[i_min, i_max]`` (view indices)."""
        lo = self.base_spec.i_min if i_min is None else min(self.base_spec.i_min, i_min + self.offset)
        hi = self.base_spec.i_max if i_max is None else max(self.base_spec.i_max, i_max + self.offset)
        if lo == self.base_spec.i_min and hi == self.base_spec.i_max:
            return self
        grid = sample_path(GridSpec(self.dt, lo, hi, self.d), self.seed)
        return grid.shift_steps(self.offset)

    def covers(self, i0: int, i1: int) -> bool:
        return self.i_min <= i0 and i1 <= self.i_max

    # -- persistence ---------------------------------------------------------

    def dump(self, path) -> None:
        """Binary dump: header (dt, t_min, t_max, d, seed) then LE float64 draws."""
        if self.offset:
            raise ValueError("only unshifted paths can be dumped")
        s = self.base_spec
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, 1, s.dt, s.t_min, s.t_max, s.d, self.seed & _M64))
            fh.write(np.ascontiguousarray(self.raw, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "WienerGrid":
        data = Path(path).read_bytes()
        magic, version, dt, t_min, t_max, d, seed = _HEADER.unpack_from(data)
        if magic != _MAGIC or version != 1:
            raise ValueError("not a Wiener path dump")
        spec = GridSpec.from_times(dt, t_min, t_max, d)
        raw = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
        return cls(spec, seed, raw.reshape(spec.n_cells, d).copy())

    def __repr__(self):
        return (f"WienerGrid(seed={self.seed}, dt={self.dt}, cells=[{self.i_min}, {self.i_max}), "
                f"d={self.d})")


def sample_path(spec: GridSpec, seed: int, memory_budget: int = MEMORY_BUDGET) -> WienerGrid:
    """Brownian path with N(0, dt) increments keyed on (seed, component, cell)."""
    need = 2 * (spec.n_cells + 1) * spec.d * 8
    if need > memory_budget:
        raise GridTooLarge(f"grid needs {need} bytes, budget is {memory_budget}")
    scale = math.sqrt(spec.dt)
    raw = np.empty((spec.n_cells, spec.d))
    for k in range(spec.d):
        raw[:, k] = _draws(seed, k, spec.i_min, spec.i_max) * scale
    return WienerGrid(spec, seed, raw)


def shift(w: WienerGrid, s: float) -> WienerGrid:
    return w.shift(s)


def increments_on(w: WienerGrid, a: float, b: float) -> np.ndarray:
    return w.increments_on(a, b)


class Ensemble:
    """A fixed, ordered collection of paths sharing dt and dimension."""

    def __init__(self, grids: Sequence[WienerGrid]):
        grids = list(grids)
        if not grids:
            raise ValueError("empty ensemble")
        if len({(g.dt, g.d) for g in grids}) != 1:
            raise ValueError("ensemble paths must share dt and dimension")
        self.grids = grids
        self._cache: dict = {}

    @classmethod
    def from_seeds(cls, seeds: Sequence[int], dt: float, i_min: int, i_max: int, d: int,
                   memory_budget: int = MEMORY_BUDGET) -> "Ensemble":
        spec = GridSpec(dt, min(i_min, -1), max(i_max, 0), d)
        if 2 * (spec.n_cells + 1) * d * 8 * len(seeds) > memory_budget:
            raise GridTooLarge("ensemble exceeds the memory budget")
        return cls([sample_path(spec, s, memory_budget) for s in seeds])

    @property
    def seeds(self) -> tuple:
        return tuple(g.seed for g in self.grids)

    @property
    def dt(self) -> float:
        return self.grids[0].dt

    @property
    def d(self) -> int:
        return self.grids[0].d

    @property
    def size(self) -> int:
        return len(self.grids)

    def __len__(self):
        return len(self.grids)

    def inc_steps(self, i0: int, i1: int) -> np.ndarray:
        """Increments of cells ``i0..i1-1`` for every path, shape (paths, cells, d)."""
        lo, hi = self._cache.get("range", (0, 0))
        if not (lo <= i0 and i1 <= hi):
            self._cache.clear()
            self._cache["inc"] = np.stack([g.inc_steps(i0, i1) for g in self.grids])
            self._cache["range"] = lo, hi = i0, i1
        return self._cache["inc"][:, i0 - lo: i1 - lo]

    def release(self) -> None:
        """Drop the cached stacked increments."""
        self._cache.clear()

    def values_at(self, i) -> np.ndarray:
        return np.stack([g.values_at(i) for g in self.grids])

    def shift_steps(self, n: int) -> "Ensemble":
        return Ensemble([g.shift_steps(n) for g in self.grids])

    def subset(self, idx) -> "Ensemble":
        return Ensemble([self.grids[i] for i in np.atleast_1d(idx)])

    def covers(self, i0: int, i1: int) -> bool:
        return all(g.covers(i0, i1) for g in self.grids)
