"""Reproducible Brownian increments on uniform time grids.

Every Gaussian draw is a pure function of ``(seed, path, step, coord)``: a
SplitMix64 counter hash produces 53 uniform bits which are pushed through
the inverse normal CDF. Nothing depends on the order in which paths are
produced, so a bundle of ``m`` paths always starts with the bundle of
``m' < m`` paths generated from the same seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .errors import AllocationTooLarge, GridMismatch

#: default cap on m_paths * n_steps * d (float64 entries, 800 MB).
MAX_ELEMENTS = 100_000_000

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MAGIC = b"SDGB1"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = t0 + k*dt`` on ``[t0, T]``."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.t0 < 0:
            raise ValueError("t0 must be nonnegative")
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def time(self, k: int) -> float:
        return float(self.times[k])

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        """Grid index of node ``t``; raises GridMismatch if ``t`` is off-grid."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.times[k] - t) > atol * max(1.0, abs(t)):
            raise GridMismatch(f"time {t!r} is not a node of {self}")
        return k


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _path_keys(seed: int, paths: np.ndarray) -> np.ndarray:
    key = _mix64(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)
    return _mix64(key ^ _mix64(paths.astype(np.uint64) * _GOLDEN + _GOLDEN))


def counter_normals(seed: int, paths: np.ndarray, n_per_path: int) -> np.ndarray:
    """Standard normals indexed by (seed, path, j) for ``j < n_per_path``.

    Returns an array of shape ``(len(paths), n_per_path)``.
    """
    with np.errstate(over="ignore"):
        keys = _path_keys(seed, np.asarray(paths))
        ctr = (np.arange(n_per_path, dtype=np.uint64) + np.uint64(1)) * _GOLDEN
        bits = _mix64(keys[:, None] + ctr[None, :])
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Brownian increments for ``m_paths`` paths on ``grid``.

    ``base`` holds the raw N(0, dt) draws; ``shift`` is a deterministic
    per-step drift (Cameron-Martin direction) added on top. Keeping the two
    apart makes ``shift_by(h)`` followed by ``shift_by(-h)`` bit-exact.
    """

    grid: TimeGrid
    d: int
    m_paths: int
    seed: int
    base: np.ndarray
    shift: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def increments(self) -> np.ndarray:
        """``m_paths x n_steps x d`` array of Brownian increments."""
        if self.shift is None or not np.any(self.shift):
            return self.base
        inc = self._cache.get("inc")
        if inc is None:
            inc = self.base + self.shift[None, :, :]
            inc.flags.writeable = False
            self._cache["inc"] = inc
        return inc

    def brownian(self) -> np.ndarray:
        """Cumulative paths ``B_{t_k} - B_{t0}``, shape ``m x (n+1) x d``."""
        out = np.zeros((self.m_paths, self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        return out

    def head(self, m: int) -> "PathBundle":
        """The first ``m`` paths (identical to regenerating with ``m`` paths)."""
        if not 1 <= m <= self.m_paths:
            raise ValueError("m out of range")
        return PathBundle(self.grid, self.d, m, self.seed, self.base[:m], self.shift)

    def same_as(self, other: "PathBundle") -> bool:
        return (
            self.grid == other.grid
            and self.d == other.d
            and self.m_paths == other.m_paths
            and np.array_equal(self.increments, other.increments)
        )

    def dump(self, path: str | Path) -> None:
        header = _MAGIC + struct.pack(
            "<QIIIdd", self.seed & 0xFFFFFFFFFFFFFFFF, self.m_paths,
            self.grid.n_steps, self.d, self.grid.t0, self.grid.T,
        )
        payload = np.ascontiguousarray(self.increments, dtype="<f8").tobytes()
        Path(path).write_bytes(header + payload)

    @classmethod
    def load(cls, path: str | Path) -> "PathBundle":
        raw = Path(path).read_bytes()
        if raw[:5] != _MAGIC:
            raise ValueError("not an SDGB1 bundle")
        seed, m, n, d, t0, T = struct.unpack_from("<QIIIdd", raw, 5)
        offset = 5 + struct.calcsize("<QIIIdd")
        inc = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(m, n, d).copy()
        inc.flags.writeable = False
        return cls(TimeGrid(t0, T, n), d, m, seed, inc)


def generate(grid: TimeGrid, d: int, m_paths: int, seed: int,
             max_elements: int = MAX_ELEMENTS) -> PathBundle:
    """Draw ``m_paths`` Brownian paths of dimension ``d`` on ``grid``."""
    if m_paths < 1 or d < 1:
        raise ValueError("m_paths and d must be >= 1")
    size = m_paths * grid.n_steps * d
    if size > max_elements:
        raise AllocationTooLarge(f"{size} increments exceed the cap of {max_elements}")
    z = counter_normals(seed, np.arange(m_paths), grid.n_steps * d)
    inc = (z * math.sqrt(grid.dt)).reshape(m_paths, grid.n_steps, d)
    inc.flags.writeable = False
    return PathBundle(grid, d, m_paths, int(seed), inc)


def shift_by(bundle: PathBundle, h) -> PathBundle:
    """Add the increments of a deterministic path ``h`` (given on grid nodes).

    ``h`` has shape ``(n_steps+1,)`` or ``(n_steps+1, d)`` with ``h[0] == 0``.
    """
    h = np.asarray(h, dtype=float)
    n = bundle.grid.n_steps
    if h.ndim == 1:
        h = np.repeat(h[:, None], bundle.d, axis=1)
    if h.shape != (n + 1, bundle.d):
        raise GridMismatch(f"shift has shape {h.shape}, expected {(n + 1, bundle.d)}")
    if np.any(h[0] != 0.0):
        raise ValueError("shift path must start at 0")
    dh = np.diff(h, axis=0)
    shift = dh if bundle.shift is None else bundle.shift + dh
    shift.flags.writeable = False
    return PathBundle(bundle.grid, bundle.d, bundle.m_paths, bundle.seed, bundle.base, shift)
