"""Numerical check of the weak dynamic programming bracket.

The test functions are the interpolated value estimates shifted by ``-eps``
and ``+eps``. For every (strategy, control) pair the state is stopped at its
first exit from the ``(t, x)``-ball of radius ``delta`` and the BSDE is solved
with the stopped test function as terminal value and the generator switched
off after the exit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .bsde_engine import ProjectionCache, solve_bsde
from .errors import DeltaOutOfRange, GridTooCoarse
from .game_values import estimate
from .mc_paths import PathBundle, TimeGrid, generate
from .model import CoefficientSet
from .sde_engine import exit_time, simulate_closed_loop

SANDWICH_FACTOR = 3.0


@dataclass(frozen=True, eq=False)
class ValueGrid:
    """Value estimates on a tensor grid ``times x axes[0] x ... x axes[k-1]``."""

    times: np.ndarray
    axes: tuple
    values: np.ndarray
    std_err: float
    _interp: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        shape = (len(self.times),) + tuple(len(a) for a in self.axes)
        if np.shape(self.values) != shape:
            raise ValueError(f"values have shape {np.shape(self.values)}, expected {shape}")

    def __call__(self, t, x) -> np.ndarray:
        """Multilinear interpolant at times ``t`` (shape ``(m,)``) and states ``x`` (``(m, k)``)."""
        fn = self._interp.get("fn")
        if fn is None:
            fn = RegularGridInterpolator((self.times, *self.axes), self.values,
                                         method="linear", bounds_error=False, fill_value=np.nan)
            self._interp["fn"] = fn
        x = np.atleast_2d(np.asarray(x, float))
        t = np.broadcast_to(np.asarray(t, float), (len(x),))
        out = fn(np.column_stack([t, x]))
        if np.any(np.isnan(out)):
            i = int(np.argmax(np.isnan(out)))
            raise GridTooCoarse(f"point t={t[i]:.6g}, x={x[i].tolist()} lies outside the value grid")
        return out

    @classmethod
    def from_function(cls, fn, times, axes, std_err: float = 0.0) -> "ValueGrid":
        """Tabulate ``fn(t, x)`` (vectorised, ``x`` of shape ``(m, k)``)."""
        mesh = np.meshgrid(np.asarray(times, float), *(np.asarray(a, float) for a in axes), indexing="ij")
        t = mesh[0].ravel()
        x = np.column_stack([m.ravel() for m in mesh[1:]])
        vals = np.asarray(fn(t, x), float).reshape(mesh[0].shape)
        return cls(np.asarray(times, float), tuple(np.asarray(a, float) for a in axes), vals, std_err)


def estimate_value_grid(cs: CoefficientSet, which: str, strategies, controls, grid: TimeGrid,
                        m_paths: int, seed: int, times, axes, threads: int | None = None) -> ValueGrid:
    """Monte-Carlo estimate of ``w1`` or ``w2`` at every grid node.

    ``times`` must be nodes of ``grid``. Every node reuses one bundle.
    ``std_err`` is the largest standard error over the nodes.
    """
    bundle = generate(grid, cs.d, m_paths, seed)
    times = np.asarray(times, float)
    axes = tuple(np.asarray(a, float) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    vals = np.empty((len(times), len(points)))
    ses = np.empty_like(vals)
    for a, t in enumerate(times):
        for b, x in enumerate(points):
            est = estimate(which, cs, float(t), x, strategies, controls, bundle, threads)
            vals[a, b] = est.value
            ses[a, b] = est.std_err
    shape = (len(times),) + tuple(len(ax) for ax in axes)
    return ValueGrid(times, axes, vals.reshape(shape), float(ses.max()))


def build_sandwich(value_grid: ValueGrid, epsilon: float, factor: float = SANDWICH_FACTOR):
    """``(phi, phi_tilde) = (interpolant - eps, interpolant + eps)``.

    Raises:
        ValueError: ``epsilon`` is not above ``factor`` times the grid's
            standard error (in particular when it is not positive).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if epsilon < factor * value_grid.std_err:
        raise ValueError(f"epsilon={epsilon} is below {factor} x grid std_err={value_grid.std_err:.3g}")

    def phi(t, x):
        return value_grid(t, x) - epsilon

    def phi_tilde(t, x):
        return value_grid(t, x) + epsilon

    return phi, phi_tilde


@dataclass
class PairResult:
    strategy: str
    control: str
    lower: float
    upper: float
    lower_half: float
    upper_half: float
    std_err: float
    mean_tau_time: float
    post_tau_abs_z: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class DppReport:
    """Bracket ``lower - tol <= w_hat <= upper + tol`` for one point.

    ``lower_half`` and ``upper_half`` repeat the computation with ``eps/2``;
    ``eps_monotone`` records that widening ``eps`` widened the bracket.
    """

    which: str
    t0: float
    x: list
    lower: float
    upper: float
    w_hat: float
    epsilon: float
    delta: float
    tol_mc: float
    lower_half: float
    upper_half: float
    eps_monotone: bool
    per_pair: list
    passed: bool
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "which": self.which,
            "t0": self.t0,
            "x": self.x,
            "lower": self.lower,
            "upper": self.upper,
            "w_hat": self.w_hat,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "tol_mc": self.tol_mc,
            "lower_half_eps": self.lower_half,
            "upper_half_eps": self.upper_half,
            "eps_monotone": self.eps_monotone,
            "pass": self.passed,
            "per_pair": [p.to_dict() for p in self.per_pair],
            "meta": self.meta,
        }


def _stopped_pair(cs, t0, x, delta, control, strategy, value_grid, epsilon, bundle, priority):
    start = bundle.grid.index_of(t0)
    run = simulate_closed_loop(cs, x, control, strategy, bundle, start_idx=start, priority=priority)
    state = run.state
    exit_ = exit_time(state, (t0, x), delta)
    tau = exit_.tau_idx
    times = bundle.grid.times
    x_tau = state.values[np.arange(state.m_paths), tau]
    base = value_grid(times[tau], x_tau)
    cache = ProjectionCache(state, 3, cs.eval_g)

    def solve(shift):
        return solve_bsde(cs, state, run.mu, run.nu, base + shift, tau, bundle,
                          cache=cache, stopped=True)

    lo, hi = solve(-epsilon), solve(epsilon)
    lo2, hi2 = solve(-epsilon / 2), solve(epsilon / 2)
    after = np.arange(bundle.grid.n_steps)[None, :] >= tau[:, None]
    z_after = float(np.abs(lo.Z[after]).mean()) if after.any() else 0.0
    return PairResult(strategy.label, control.label, lo.y0, hi.y0, lo2.y0, hi2.y0,
                      max(lo.std_err, hi.std_err), float(np.mean(times[tau])), z_after)


def _check(which, cs, t0, x, delta, strategies, controls, value_grid, epsilon, bundle, threads):
    grid = bundle.grid
    if not 0 < delta < grid.T - t0:
        raise DeltaOutOfRange(f"delta={delta} outside (0, {grid.T - t0})")
    build_sandwich(value_grid, epsilon)
    priority = "II" if which == "w1" else "I"
    x = np.atleast_1d(np.asarray(x, float))
    pairs = [(i, j) for i in range(len(strategies)) for j in range(len(controls))]

    def one(ij):
        i, j = ij
        return _stopped_pair(cs, t0, x, delta, controls[j], strategies[i], value_grid, epsilon,
                             bundle, priority)

    if threads and threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(ij) for ij in pairs]

    def minmax(attr):
        M = np.array([getattr(r, attr) for r in results]).reshape(len(strategies), len(controls))
        if which == "w1":
            inner = np.argmax(M, axis=1)
            i = int(np.argmin(M[np.arange(len(strategies)), inner]))
        else:
            inner = np.argmin(M, axis=1)
            i = int(np.argmax(M[np.arange(len(strategies)), inner]))
        return float(M[i, inner[i]]), results[i * len(controls) + int(inner[i])]

    lower, p_lo = minmax("lower")
    upper, p_hi = minmax("upper")
    lower_half, _ = minmax("lower_half")
    upper_half, _ = minmax("upper_half")
    w_hat = float(value_grid(np.array([t0]), x[None, :])[0])
    pooled = math.sqrt(p_lo.std_err**2 + p_hi.std_err**2 + value_grid.std_err**2)
    tol = 4 * pooled
    slack = 1e-12 * max(1.0, abs(lower), abs(upper))
    monotone = lower <= lower_half + slack and upper_half <= upper + slack
    passed = lower - tol <= w_hat <= upper + tol and monotone
    return DppReport(which, float(t0), x.tolist(), lower, upper, w_hat, float(epsilon), float(delta),
                     tol, lower_half, upper_half, bool(monotone), results, bool(passed),
                     {"seed": bundle.seed, "m_paths": bundle.m_paths, "n_steps": grid.n_steps,
                      "grid_std_err": value_grid.std_err})


def check_dpp_w1(cs: CoefficientSet, t0: float, x, delta: float, strategies, controls,
                 value_grid: ValueGrid, epsilon: float, bundle: PathBundle,
                 threads: int | None = None) -> DppReport:
    """Bracket for ``w1``: min over player II strategies of max over player I controls."""
    return _check("w1", cs, t0, x, delta, strategies, controls, value_grid, epsilon, bundle, threads)


def check_dpp_w2(cs: CoefficientSet, t0: float, x, delta: float, strategies, controls,
                 value_grid: ValueGrid, epsilon: float, bundle: PathBundle,
                 threads: int | None = None) -> DppReport:
    """Bracket for ``w2``: max over player I strategies of min over player II controls."""
    return _check("w2", cs, t0, x, delta, strategies, controls, value_grid, epsilon, bundle, threads)
