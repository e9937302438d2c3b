"""Discretised controls, feedback strategies, pasting and neutralizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    GridMismatch,
    GrowthViolated,
    MissingNeutralizer,
    NoZeroFound,
    NotAPartition,
    SpaceMismatch,
)
from .mc_paths import TimeGrid
from .model import CoefficientSet, ControlSpace

BISECTION_TOL = 1e-10
CELL_SAMPLES = 8  # per axis, 64 points per dyadic cell
ZERO_SCAN_POINTS = 65


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Control values on the grid: ``values[i, k]`` is used on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray
    space: ControlSpace

    def __post_init__(self):
        vals = np.asarray(self.values, float)
        if vals.ndim == 2:
            vals = vals[..., None]
        if vals.ndim != 3 or vals.shape[1] != self.grid.n_steps or vals.shape[2] != self.space.dim:
            raise GridMismatch(
                f"control values have shape {vals.shape}, expected (m, {self.grid.n_steps}, {self.space.dim})")
        if not self.space.contains(vals):
            raise ValueError("control path leaves its control space")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def m_paths(self) -> int:
        return self.values.shape[0]

    @classmethod
    def constant(cls, grid: TimeGrid, m_paths: int, value, space: ControlSpace) -> "ControlPath":
        value = np.asarray(value, float).reshape(space.dim)
        return cls(grid, np.broadcast_to(value, (m_paths, grid.n_steps, space.dim)).copy(), space)


@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """Feedback control ``u_k = fn(k, x_k)``; ``x`` has shape ``(m, k_state)``."""

    label: str
    fn: Callable
    space: ControlSpace

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(k, x), float)
        return np.broadcast_to(out, x.shape[:-1] + (self.space.dim,))


@dataclass(frozen=True, eq=False)
class FeedbackStrategy:
    """Non-anticipative feedback strategy ``v_k = fn(k, x_k, u_k)``.

    The output at step ``k`` sees only the current state and the opponent's
    current action, so equal inputs before a stopping index give equal
    outputs before it.

    Attributes:
        space: the space the strategy's outputs live in.
        growth_c: constant C in ``gauge(out) <= kappa + C * gauge(in)``.
        kappa: the neutralizer constant of the game the strategy is built for.
    """

    label: str
    fn: Callable
    space: ControlSpace
    growth_c: float
    kappa: float

    def __call__(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(k, x, u), float)
        return np.broadcast_to(out, u.shape[:-1] + (self.space.dim,))


@dataclass(frozen=True)
class _LabelledClass:
    items: tuple

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise ValueError("a control or strategy class must be nonempty")
        labels = [it.label for it in items]
        if len(set(labels)) != len(labels):
            raise ValueError(f"labels must be unique, got {labels}")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def labels(self) -> list:
        return [it.label for it in self.items]


class ControlClass(_LabelledClass):
    pass


class StrategyClass(_LabelledClass):
    pass


# ---------------------------------------------------------------------------
# common constructors
# ---------------------------------------------------------------------------


def constant_control(value, space: ControlSpace, label: str | None = None) -> FeedbackControl:
    value = np.asarray(value, float).reshape(space.dim)
    return FeedbackControl(label or f"const{value.tolist()}", lambda k, x: value, space)


def constant_controls(values: Sequence, space: ControlSpace) -> ControlClass:
    """Constant feedback controls on a lattice of values."""
    return ControlClass(tuple(constant_control(v, space) for v in values))


def table_control(table, space: ControlSpace, label: str) -> FeedbackControl:
    """Open-loop control taking ``table[k]`` at grid step ``k``."""
    table = np.asarray(table, float).reshape(len(table), space.dim)
    return FeedbackControl(label, lambda k, x: table[k], space)


def constant_strategy(value, space: ControlSpace, kappa: float, label: str | None = None) -> FeedbackStrategy:
    value = np.asarray(value, float).reshape(space.dim)
    if space.gauge(value) > kappa:
        raise GrowthViolated(f"constant {value.tolist()} is outside the kappa-ball", value)
    return FeedbackStrategy(label or f"const{value.tolist()}", lambda k, x, u: value, space, 0.0, kappa)


def linear_strategy(scale: float, space: ControlSpace, kappa: float, offset=0.0,
                    label: str | None = None) -> FeedbackStrategy:
    """``v = scale * u + offset``; ``scale = 1`` mirrors, ``scale = -1`` negates."""
    offset = np.broadcast_to(np.asarray(offset, float), (space.dim,))
    if np.linalg.norm(offset) > kappa:
        raise GrowthViolated("offset exceeds kappa", offset)
    return FeedbackStrategy(
        label or f"linear({scale},{offset.tolist()})",
        lambda k, x, u: scale * u + offset, space, abs(scale), kappa,
    )


def clipped_strategy(inner: FeedbackStrategy, radius: float, label: str | None = None) -> FeedbackStrategy:
    """Radially clip another strategy's output to a ball around the base point."""
    base = inner.space.base_point

    def fn(k, x, u):
        out = inner(k, x, u) - base
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        return base + out * np.minimum(1.0, radius / np.where(norm > 0, norm, 1.0))

    return FeedbackStrategy(label or inner.label + f"|clip{radius}", fn, inner.space, inner.growth_c, inner.kappa)


# ---------------------------------------------------------------------------
# pasting
# ---------------------------------------------------------------------------


def paste_controls(mu1: ControlPath, mu2: ControlPath, tau) -> ControlPath:
    """``mu1`` before the per-path grid index ``tau``, ``mu2`` from it on."""
    if mu1.grid != mu2.grid or mu1.m_paths != mu2.m_paths:
        raise GridMismatch("controls live on different grids")
    if not mu1.space.compatible(mu2.space):
        raise SpaceMismatch("controls live in different spaces")
    tau = np.broadcast_to(np.asarray(tau, dtype=int), (mu1.m_paths,))
    if np.any(tau < 0) or np.any(tau > mu1.grid.n_steps):
        raise ValueError("tau must lie in {0..n_steps}")
    before = np.arange(mu1.grid.n_steps)[None, :] < tau[:, None]
    return ControlPath(mu1.grid, np.where(before[..., None], mu1.values, mu2.values), mu1.space)


def paste_by_partition(items: Sequence) -> ControlPath:
    """Combine ``(mask, ControlPath)`` pairs whose masks partition the paths."""
    if not items:
        raise NotAPartition("no items")
    first = items[0][1]
    masks = np.array([np.asarray(m, bool) for m, _ in items])
    for _, cp in items:
        if cp.grid != first.grid or cp.m_paths != first.m_paths:
            raise GridMismatch("controls live on different grids")
        if not cp.space.compatible(first.space):
            raise SpaceMismatch("controls live in different spaces")
    if masks.shape != (len(items), first.m_paths):
        raise NotAPartition("mask length differs from the number of paths")
    counts = masks.sum(axis=0)
    if np.any(counts != 1):
        i = int(np.argmax(counts != 1))
        raise NotAPartition(f"path {i} is covered {int(counts[i])} times", i)
    owner = np.argmax(masks, axis=0)
    stacked = np.stack([cp.values for _, cp in items])
    values = stacked[owner, np.arange(first.m_paths)]
    return ControlPath(first.grid, values, first.space)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


def neutralizer_strategy(cs: CoefficientSet, grid: TimeGrid, player: str = "II") -> FeedbackStrategy:
    """Strategy answering the opponent's control with the game's neutralizer.

    For player II: ``v = v0`` while ``gauge(u) < kappa``, else ``psi(t_k, u)``.
    For player I the roles of ``psi_tilde`` and the spaces are swapped.
    """
    if player == "II":
        neutral, in_space, out_space = cs.psi, cs.u_space, cs.v_space
    else:
        neutral, in_space, out_space = cs.psi_tilde, cs.v_space, cs.u_space
    if neutral is None:
        raise MissingNeutralizer(f"coefficient set {cs.name!r} has no neutralizer for player {player}")
    times = grid.times
    kappa = cs.kappa
    base = out_space.base_point
    # dyadic neutralizers are expensive per call; evaluate them on distinct inputs only
    compress = "psi_n" in cs.meta

    def fn(k, x, u):
        u = np.asarray(u, float)
        t = times[k]
        inside = in_space.gauge(u) < kappa
        shape = u.shape[:-1] + (out_space.dim,)
        if compress:
            uniq, inv = np.unique(u.reshape(-1, u.shape[-1]), axis=0, return_inverse=True)
            vals = np.broadcast_to(np.asarray(neutral(t, uniq), float), (len(uniq), out_space.dim))
            out = vals[inv.ravel()].reshape(shape)
        else:
            out = np.broadcast_to(np.asarray(neutral(t, u), float), shape)
        return np.where(inside[..., None], base, out)

    return FeedbackStrategy("neutralizer", fn, out_space, kappa, kappa)


def evaluate_strategy(strategy: FeedbackStrategy, control_path: ControlPath, state_paths,
                      start_idx: int = 0) -> ControlPath:
    """Opponent path ``beta(mu)``: ``out[i, k] = map(k, X[i, k], mu[i, k])``.

    Entries before ``start_idx`` are set to the output space's base point.

    Raises:
        GrowthViolated: an output exceeds ``kappa + growth_c * gauge(input)``.
    """
    X = state_paths.values
    if X.shape[0] != control_path.m_paths or X.shape[1] != control_path.grid.n_steps + 1:
        raise GridMismatch("state and control shapes differ")
    n = control_path.grid.n_steps
    out = np.broadcast_to(strategy.space.base_point,
                          (control_path.m_paths, n, strategy.space.dim)).copy()
    for k in range(start_idx, n):
        out[:, k] = strategy(k, X[:, k], control_path.values[:, k])
    check_growth(strategy, control_path.values[:, start_idx:], out[:, start_idx:], control_path.space)
    return ControlPath(control_path.grid, out, strategy.space)


def check_growth(strategy: FeedbackStrategy, inputs, outputs, in_space: ControlSpace) -> None:
    lhs = strategy.space.gauge(outputs)
    rhs = strategy.kappa + strategy.growth_c * in_space.gauge(inputs)
    bad = lhs > rhs * (1 + 1e-12) + 1e-12
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise GrowthViolated(
            f"strategy {strategy.label!r} output gauge {float(lhs[idx]):.6g} exceeds "
            f"{float(rhs[idx]):.6g} at {idx}", {"index": idx})


# ---------------------------------------------------------------------------
# neutralizer construction for scalar phi-games
# ---------------------------------------------------------------------------


def zero_set_min(phi: Callable, kappa: float, t, u, scan_points: int = ZERO_SCAN_POINTS,
                 tol: float = BISECTION_TOL) -> np.ndarray:
    """Smallest ``v`` in ``[-kappa|u|, kappa|u|]`` with ``phi(t, u, v) = 0``.

    The interval is scanned on ``scan_points`` nodes for the first node where
    phi vanishes or changes sign, then that bracket is bisected to ``tol``.
    Vectorised over ``t`` and ``u``.

    Raises:
        NoZeroFound: phi keeps one strict sign on the whole interval.
    """
    t, u = np.broadcast_arrays(np.asarray(t, float), np.asarray(u, float))
    t, u = t.ravel(), u.ravel()
    half = kappa * np.abs(u)
    s = np.linspace(-1.0, 1.0, scan_points)
    vs = half[:, None] * s[None, :]
    vals = np.broadcast_to(np.asarray(phi(t[:, None], u[:, None], vs), float), vs.shape)
    zero = vals == 0.0
    change = np.zeros_like(zero)
    # a node that is exactly zero is reported by `zero`, not as a sign change into it
    change[:, :-1] = (np.signbit(vals[:, :-1]) != np.signbit(vals[:, 1:])) & (vals[:, 1:] != 0.0)
    hit = zero | change
    if not np.all(hit.any(axis=1)):
        i = int(np.argmin(hit.any(axis=1)))
        raise NoZeroFound(f"phi has no sign change on [-kappa|u|, kappa|u|] at t={t[i]}, u={u[i]}")
    j = np.argmax(hit, axis=1)
    rows = np.arange(len(u))
    exact = zero[rows, j]
    lo = vs[rows, j]
    hi = vs[rows, np.minimum(j + 1, scan_points - 1)]
    flo = vals[rows, j]
    width = float(np.max(hi - lo)) if len(u) else 0.0
    iters = 0 if width <= tol else int(math.ceil(math.log2(width / tol)))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = np.broadcast_to(np.asarray(phi(t, u, mid), float), mid.shape)
        left = (fm == 0.0) | (np.signbit(fm) != np.signbit(flo))
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fm)
    return np.where(exact, vs[rows, j], 0.5 * (lo + hi))


@dataclass
class DyadicNeutralizer:
    """Piecewise-constant neutralizer on dyadic ``(t, u)`` cells.

    At level ``n`` the cells have width ``2^-n T`` in time and ``2^-n`` in the
    control, and the cell value is the infimum of ``zero_set_min`` over the
    cell. It is estimated from below on a closed 8x8 lattice: the lattice
    minimum less the largest jump between adjacent lattice points. The value
    returned at level ``n`` is the running maximum over levels ``1..n``; the
    exact cell infima are nondecreasing in ``n``, and because every level is a
    lower estimate a coarse level cannot lift the result above a finer one.
    """

    phi: Callable
    kappa: float
    n_levels: int
    T: float = 1.0
    _cells: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")

    def _cell_inf(self, level: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        pairs, inverse = np.unique(np.stack([i, j], axis=1), axis=0, return_inverse=True)
        keys = [tuple(p) for p in pairs.tolist()]
        missing = [key for key in keys if (level, *key) not in self._cells]
        if missing:
            mi = np.array([m[0] for m in missing], float)
            mj = np.array([m[1] for m in missing], float)
            ht, hu = self.T * 2.0**-level, 2.0**-level
            frac = np.linspace(0.0, 1.0, CELL_SAMPLES)
            ts = (mi[:, None] * ht + frac[None, :] * ht)
            us = (mj[:, None] * hu + frac[None, :] * hu)
            tt = np.repeat(ts[:, :, None], CELL_SAMPLES, axis=2)
            uu = np.repeat(us[:, None, :], CELL_SAMPLES, axis=1)
            vals = zero_set_min(self.phi, self.kappa, tt.ravel(), uu.ravel())
            vals = vals.reshape(len(missing), CELL_SAMPLES, CELL_SAMPLES)
            jump = np.maximum(np.abs(np.diff(vals, axis=1)).max(axis=(1, 2)),
                              np.abs(np.diff(vals, axis=2)).max(axis=(1, 2)))
            vals = vals.min(axis=(1, 2)) - jump
            for key, val in zip(missing, vals):
                self._cells[(level, *key)] = float(val)
        uniq = np.array([self._cells[(level, *key)] for key in keys])
        return uniq[inverse.ravel()]

    def level_values(self, t, u) -> np.ndarray:
        """Sampled cell infima at every level, shape ``(n_levels, n_points)``."""
        t, u = np.broadcast_arrays(np.asarray(t, float), np.asarray(u, float))
        t, u = t.ravel(), u.ravel()
        out = np.empty((self.n_levels, t.size))
        for level in range(1, self.n_levels + 1):
            n_t = 2**level
            i = np.clip(np.floor(t / self.T * n_t), 0, n_t - 1).astype(np.int64)
            j = np.floor(u * 2.0**level).astype(np.int64)
            out[level - 1] = self._cell_inf(level, i, j)
        return np.maximum.accumulate(out, axis=0)

    def __call__(self, t, u) -> np.ndarray:
        u = np.asarray(u, float)
        shape = np.broadcast_shapes(np.shape(t), u.shape)
        return self.level_values(t, u)[-1].reshape(shape)


def construct_neutralizer(phi: Callable, kappa: float, n_levels: int, T: float = 1.0) -> DyadicNeutralizer:
    """Measurable neutralizer ``psi_n`` for ``phi`` at dyadic level ``n_levels``."""
    return DyadicNeutralizer(phi, kappa, n_levels, T)


def attach_neutralizers(cs: CoefficientSet, n_levels: int = 12) -> CoefficientSet:
    """Return ``cs`` with ``psi`` (and, when valid, ``psi_tilde``) built from its phi.

    Only scalar-phi games carry a ``phi``. ``psi_tilde`` is attached only if
    the v-side sign condition held at construction.
    """
    phi = cs.meta.get("phi")
    if phi is None:
        raise MissingNeutralizer(f"{cs.name!r} has no phi to build neutralizers from")
    T = cs.meta.get("T", 1.0)
    psi_n = construct_neutralizer(phi, cs.kappa, n_levels, T)

    def psi(t, u):
        u = np.asarray(u, float)
        return psi_n(np.broadcast_to(t, u.shape[:-1]), u[..., 0])[..., None]

    psi_tilde = None
    if cs.meta.get("v_side_sign_condition"):
        swapped = DyadicNeutralizer(lambda t, v, u: phi(t, u, v), cs.kappa, n_levels, T)

        def psi_tilde(t, v):
            v = np.asarray(v, float)
            return swapped(np.broadcast_to(t, v.shape[:-1]), v[..., 0])[..., None]

    return cs.replace(psi=psi, psi_tilde=psi_tilde,
                      meta={**cs.meta, "psi_levels": n_levels, "psi_n": psi_n})
