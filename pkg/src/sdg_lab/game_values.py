"""Priority values over finite feedback classes and their regularity checks.

Every (strategy, control) pair is simulated on the same Brownian bundle, so
payoff differences between pairs carry no independent sampling noise.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .bsde_engine import solve_bsde
from .controls import ControlClass, FeedbackControl, FeedbackStrategy, StrategyClass
from .mc_paths import PathBundle, TimeGrid, generate, shift_by
from .model import CoefficientSet
from .sde_engine import simulate_closed_loop


@dataclass(frozen=True, eq=False)
class ValueEstimate:
    """Min-max of payoffs over a strategy class and a control class.

    ``payoffs[i, j]`` is the payoff of strategy ``i`` against control ``j``
    and ``std_errs`` holds the matching standard errors.
    """

    t0: float
    x: np.ndarray
    value: float
    std_err: float
    argmin_strategy: str
    argmax_control: str
    class_sizes: tuple
    payoffs: np.ndarray
    std_errs: np.ndarray
    which: str = "w1"
    seed: int | None = None


def pair_payoff(cs: CoefficientSet, t0: float, x, control: FeedbackControl,
                strategy: FeedbackStrategy, bundle: PathBundle, priority: str = "II") -> tuple:
    """``(payoff, std_err)`` for one pair simulated in closed loop."""
    start = bundle.grid.index_of(t0)
    run = simulate_closed_loop(cs, x, control, strategy, bundle, start_idx=start, priority=priority)
    eta = cs.eval_g(run.state.values[:, -1])
    sol = solve_bsde(cs, run.state, run.mu, run.nu, eta, None, bundle)
    return sol.y0, sol.std_err


def _payoff_matrix(cs, t0, x, strategies, controls, bundle, priority, threads):
    pairs = [(i, j) for i in range(len(strategies)) for j in range(len(controls))]

    def one(ij):
        i, j = ij
        return pair_payoff(cs, t0, x, controls[j], strategies[i], bundle, priority)

    if threads and threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(ij) for ij in pairs]
    J = np.array([r[0] for r in results]).reshape(len(strategies), len(controls))
    S = np.array([r[1] for r in results]).reshape(len(strategies), len(controls))
    return J, S


def estimate_w1(cs: CoefficientSet, t0: float, x, strategies: StrategyClass, controls: ControlClass,
                bundle: PathBundle, threads: int | None = None) -> ValueEstimate:
    """``min`` over player II strategies of ``max`` over player I controls.

    Ties go to the lowest index in each class.
    """
    J, S = _payoff_matrix(cs, t0, x, strategies, controls, bundle, "II", threads)
    inner = np.argmax(J, axis=1)
    best = J[np.arange(len(strategies)), inner]
    i = int(np.argmin(best))
    j = int(inner[i])
    return ValueEstimate(t0, np.atleast_1d(np.asarray(x, float)), float(J[i, j]), float(S[i, j]),
                         strategies[i].label, controls[j].label, (len(strategies), len(controls)),
                         J, S, "w1", bundle.seed)


def estimate_w2(cs: CoefficientSet, t0: float, x, strategies: StrategyClass, controls: ControlClass,
                bundle: PathBundle, threads: int | None = None) -> ValueEstimate:
    """``max`` over player I strategies of ``min`` over player II controls.

    ``strategies`` answer controls in V with actions in U.
    """
    J, S = _payoff_matrix(cs, t0, x, strategies, controls, bundle, "I", threads)
    inner = np.argmin(J, axis=1)
    worst = J[np.arange(len(strategies)), inner]
    i = int(np.argmax(worst))
    j = int(inner[i])
    return ValueEstimate(t0, np.atleast_1d(np.asarray(x, float)), float(J[i, j]), float(S[i, j]),
                         strategies[i].label, controls[j].label, (len(strategies), len(controls)),
                         J, S, "w2", bundle.seed)


def estimate(which: str, cs, t0, x, strategies, controls, bundle, threads=None) -> ValueEstimate:
    if which == "w1":
        return estimate_w1(cs, t0, x, strategies, controls, bundle, threads)
    if which == "w2":
        return estimate_w2(cs, t0, x, strategies, controls, bundle, threads)
    raise ValueError("which must be 'w1' or 'w2'")


def negate_game(cs: CoefficientSet) -> CoefficientSet:
    """Game with payoff ``-J`` and the players' roles exchanged.

    ``g -> -g``, ``f(t,x,y,z,u,v) -> -f(t,x,-y,-z,v,u)``; ``b`` and ``sigma``
    take their control arguments swapped. ``w2`` of the result equals ``-w1``
    of ``cs`` over the same classes.
    """
    b, sigma, f, g = cs.b, cs.sigma, cs.f, cs.g
    return cs.replace(
        b=lambda t, x, u, v: b(t, x, v, u),
        sigma=lambda t, x, u, v: sigma(t, x, v, u),
        f=lambda t, x, y, z, u, v: -np.asarray(f(t, x, -y, -z, v, u), float),
        g=lambda x: -np.asarray(g(x), float),
        u_space=cs.v_space, v_space=cs.u_space,
        psi=cs.psi_tilde, psi_tilde=cs.psi,
        name=f"neg({cs.name})",
    )


# ---------------------------------------------------------------------------
# regularity checks
# ---------------------------------------------------------------------------


@dataclass
class BoundsReport:
    """Least-squares envelope ``c_kappa + c0 |x|^(2/p)`` over an ``|x|`` ladder."""

    radii: np.ndarray
    sizes: np.ndarray
    c_kappa: float
    c0: float
    envelope: np.ndarray
    passed: bool

    @property
    def max_excess(self) -> float:
        return float(np.max(self.sizes - self.envelope))


def bounds_check(estimates, cs: CoefficientSet, w2_estimates=None, rel_tol: float = 0.1) -> BoundsReport:
    """Fit ``|w1| + |w2| <= c_kappa + c0 |x|^(2/p)`` with nonnegative constants.

    Passes when every value is finite and no point exceeds the fitted
    envelope by more than ``rel_tol`` times the envelope's largest value.
    ``w2_estimates`` may be omitted, in which case only ``|w1|`` is used.
    """
    if len(estimates) < 3:
        raise ValueError("bounds_check needs estimates at 3 or more points")
    radii = np.array([np.linalg.norm(e.x) for e in estimates])
    sizes = np.array([abs(e.value) for e in estimates])
    if w2_estimates is not None:
        sizes = sizes + np.array([abs(e.value) for e in w2_estimates])
    if len(np.unique(radii)) < 3:
        raise ValueError("bounds_check needs 3 distinct |x| values")
    design = np.column_stack([np.ones_like(radii), radii ** (2.0 / cs.p)])
    finite = bool(np.all(np.isfinite(sizes)))
    if not finite:
        return BoundsReport(radii, sizes, np.nan, np.nan, np.full_like(radii, np.nan), False)
    (c_kappa, c0), _ = nnls(design, sizes)
    env = design @ np.array([c_kappa, c0])
    passed = bool(np.max(sizes - env) <= rel_tol * max(float(np.max(env)), 0.0))
    return BoundsReport(radii, sizes, float(c_kappa), float(c0), env, passed)


@dataclass
class HolderReport:
    """Ratios ``|w(x1) - w(x2)| / |x1 - x2|^(2/p)`` sorted by distance."""

    distances: np.ndarray
    differences: np.ndarray
    ratios: np.ndarray
    passed: bool

    @property
    def constant(self) -> float:
        return float(np.max(self.ratios)) if len(self.ratios) else 0.0


def holder_check(cs: CoefficientSet, t0: float, x_pairs, strategies, controls, bundle: PathBundle,
                 which: str = "w1", threads: int | None = None, growth: float = 2.0) -> HolderReport:
    """Hoelder ratios over a ladder of point pairs on a common bundle.

    Passes when the ratio never grows by more than ``growth`` from one rung
    to the next. Pairs at distance 0 report a difference but no ratio.
    """
    if len(x_pairs) < 4:
        raise ValueError("holder_check needs 4 or more pairs")
    cache = {}

    def value(x):
        key = np.atleast_1d(np.asarray(x, float)).tobytes()
        if key not in cache:
            cache[key] = estimate(which, cs, t0, x, strategies, controls, bundle, threads).value
        return cache[key]

    rows = []
    for x1, x2 in x_pairs:
        a, b = np.atleast_1d(np.asarray(x1, float)), np.atleast_1d(np.asarray(x2, float))
        rows.append((float(np.linalg.norm(a - b)), abs(value(a) - value(b))))
    rows.sort(key=lambda r: r[0])
    dist = np.array([r[0] for r in rows])
    diff = np.array([r[1] for r in rows])
    pos = dist > 0
    ratios = diff[pos] / dist[pos] ** (2.0 / cs.p)
    passed = bool(np.all(np.isfinite(diff)))
    for lo, hi in zip(ratios[:-1], ratios[1:]):
        if hi > growth * lo + 1e-12:
            passed = False
    return HolderReport(dist, diff, ratios, passed)


@dataclass
class DeterminismReport:
    seeds: list
    values: np.ndarray
    std_errs: np.ndarray
    spread: float
    pooled_std_err: float
    shift_invariant: bool
    passed: bool


def determinism_check(cs: CoefficientSet, t0: float, x, strategies, controls, grid: TimeGrid,
                      m_paths: int, seeds, which: str = "w1", threads: int | None = None) -> DeterminismReport:
    """Spread of the estimate across seeds, plus a pre-``t0`` noise shift.

    Passes when the spread is at most 4 pooled standard errors (plus a
    ``1e-12`` relative round-off floor) and shifting
    the increments before ``t0`` leaves the first seed's estimate unchanged
    bit for bit.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("determinism_check needs 3 or more seeds")
    ests = []
    bundles = []
    for seed in seeds:
        bundle = generate(grid, cs.d, m_paths, seed)
        bundles.append(bundle)
        ests.append(estimate(which, cs, t0, x, strategies, controls, bundle, threads))
    values = np.array([e.value for e in ests])
    ses = np.array([e.std_err for e in ests])
    spread = float(values.max() - values.min())
    pooled = float(np.sqrt(np.mean(ses**2)))

    s = grid.index_of(t0)
    h = np.zeros(grid.n_steps + 1)
    h[1: s + 1] = np.sin(np.arange(1, s + 1))
    h[s + 1:] = h[s]
    shifted = estimate(which, cs, t0, x, strategies, controls, shift_by(bundles[0], h), threads)
    invariant = shifted.value == ests[0].value and shifted.std_err == ests[0].std_err
    # round-off floor for deterministic games, where std_err is itself round-off
    floor = 1e-12 * max(1.0, float(np.max(np.abs(values))))
    passed = spread <= 4 * pooled + floor and invariant
    return DeterminismReport(seeds, values, ses, spread, pooled, invariant, passed)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

VALUE_COLUMNS = ("t0", "x", "value_w1", "value_w2", "std_err", "argmin", "argmax",
                 "n_strategies", "n_controls", "seed")


@dataclass
class ValueRow:
    w1: ValueEstimate
    w2: ValueEstimate | None = None
    extra: dict = field(default_factory=dict)

    def as_list(self) -> list:
        w1, w2 = self.w1, self.w2
        return [
            repr(float(w1.t0)),
            " ".join(repr(float(v)) for v in w1.x),
            repr(w1.value),
            "" if w2 is None else repr(w2.value),
            repr(w1.std_err if w2 is None else max(w1.std_err, w2.std_err)),
            w1.argmin_strategy,
            w1.argmax_control,
            w1.class_sizes[0],
            w1.class_sizes[1],
            "" if w1.seed is None else w1.seed,
        ]


def values_to_csv(rows, header_line: str | None = None) -> str:
    """RFC-4180 CSV (LF line endings) of value estimates."""
    buf = io.StringIO()
    if header_line:
        buf.write(header_line.rstrip("\n") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(VALUE_COLUMNS)
    for row in rows:
        writer.writerow(row.as_list())
    return buf.getvalue()
