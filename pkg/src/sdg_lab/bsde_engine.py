"""Least-squares Monte-Carlo solver for the game's BSDE.

Backward explicit scheme on the simulation grid. The generator is switched
off from a per-path cutoff index ``tau`` on. When the terminal value is known
to be measurable at the cutoff (``stopped=True``), stopped paths simply keep
it with ``Z = 0``, the exact conditional expectation, and only the running
paths are regressed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controls import ControlPath
from .errors import NonFiniteValue, SingularRegression
from .mc_paths import PathBundle
from .model import CoefficientSet
from .sde_engine import StatePaths, simulate_forward

COND_LIMIT = 1e12
RIDGE_FACTOR = 1e-8


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


def _exponents(k: int, degree: int) -> list:
    out = []
    for total in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(k), total):
            e = [0] * k
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return out


def basis_features(X: np.ndarray, degree: int = 3, g: Callable | None = None) -> np.ndarray:
    """Non-constant regression features of states ``X`` (shape ``M x k``).

    Tensor monomials of total degree ``1..degree`` in the standardised state,
    plus ``g(X)`` when given. The intercept is handled by the projector.
    """
    X = np.asarray(X, float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    Zs = np.where(std > 0, (X - mean) / np.where(std > 0, std, 1.0), 0.0)
    cols = [np.prod(Zs ** np.array(e), axis=1) for e in _exponents(X.shape[1], degree)]
    if g is not None:
        cols.append(np.asarray(g(X), float).reshape(len(X)))
    if not cols:
        return np.zeros((len(X), 0))
    return np.column_stack(cols)


class Projector:
    """Least-squares projection onto ``span{1, features}`` for one sample set.

    Features are centred and scaled, columns without spread are dropped, and
    the normal equations are factorised once. If they are singular or
    ill-conditioned a ridge term ``1e-8 * trace / dim`` is added; the centred
    design keeps the sample mean exactly reproduced either way.
    """

    def __init__(self, features: np.ndarray):
        F = np.asarray(features, float)
        self.n = F.shape[0]
        mean = F.mean(axis=0)
        Fc = F - mean
        scale = Fc.std(axis=0)
        keep = scale > 1e-10 * np.maximum(1.0, np.abs(mean))
        self.F = Fc[:, keep] / scale[keep]
        self.dim = self.F.shape[1]
        self.ridge = 0.0
        self._chol = None
        if self.dim:
            G = self.F.T @ self.F / self.n
            self._chol = self._factor(G)

    def _factor(self, G: np.ndarray) -> np.ndarray:
        try:
            L = np.linalg.cholesky(G)
            w = np.linalg.eigvalsh(G)
            if w[0] > 0 and w[-1] / w[0] < COND_LIMIT:
                return L
        except np.linalg.LinAlgError:
            pass
        self.ridge = RIDGE_FACTOR * float(np.trace(G)) / self.dim
        try:
            return np.linalg.cholesky(G + self.ridge * np.eye(self.dim))
        except np.linalg.LinAlgError as exc:
            raise SingularRegression(f"ridge-regularised normal equations failed: {exc}") from exc

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, float)
        ybar = y.mean(axis=0)
        if not self.dim:
            return np.broadcast_to(ybar, y.shape).copy()
        rhs = self.F.T @ (y - ybar) / self.n
        beta = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, rhs))
        return ybar + self.F @ beta


@dataclass(eq=False)
class ProjectionCache:
    """Per-step projectors for one state cloud, reusable across backward solves.

    Keyed by the step and the set of regressed paths.
    """

    state: StatePaths
    degree: int = 3
    g: Callable | None = None
    _store: dict = field(default_factory=dict, repr=False)

    def get(self, k: int, alive: np.ndarray) -> Projector:
        key = (k, alive.tobytes())
        proj = self._store.get(key)
        if proj is None:
            feats = basis_features(self.state.values[alive, k], self.degree, self.g)
            proj = Projector(feats)
            self._store[key] = proj
        return proj


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """``Y`` is ``m x (n+1)``, ``Z`` is ``m x n x d``.

    ``payoff_samples`` are the per-path quantities ``eta + sum_k f_k dt`` whose
    mean equals the mean of ``Y`` at the start node; their spread gives the
    reported standard error.
    """

    Y: np.ndarray
    Z: np.ndarray
    start_idx: int
    payoff_samples: np.ndarray
    basis_spec: str
    ridge_events: tuple = ()

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, self.start_idx]))

    @property
    def std_err(self) -> float:
        s = self.payoff_samples
        return float(np.std(s, ddof=1) / np.sqrt(len(s))) if len(s) > 1 else 0.0


@dataclass(frozen=True, eq=False)
class GeneratorCutoff:
    """Per-path grid index from which the generator is switched off."""

    tau_idx: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau_idx, dtype=int)
        if np.any(tau < 0):
            raise ValueError("cutoff indices must be nonnegative")
        object.__setattr__(self, "tau_idx", tau)


def _cutoff(cutoff, m: int, n: int) -> np.ndarray:
    if cutoff is None:
        return np.full(m, n, dtype=int)
    tau = np.broadcast_to(np.asarray(getattr(cutoff, "tau_idx", cutoff), dtype=int), (m,))
    if np.any(tau < 0) or np.any(tau > n):
        raise ValueError("cutoff indices must lie in {0..n_steps}")
    return tau


def solve_bsde(cs: CoefficientSet, state: StatePaths, mu: ControlPath, nu: ControlPath,
               terminal, cutoff=None, bundle: PathBundle | None = None, *,
               generator: Callable | None = None, cache: ProjectionCache | None = None,
               stopped: bool = False, degree: int = 3, use_g_feature: bool = True) -> BsdeSolution:
    """Solve ``Y_s = eta + int_s^T 1_{r<tau} f dr - int_s^T Z dB`` backwards.

    Args:
        terminal: per-path terminal values ``eta`` (measurable at the cutoff).
        cutoff: per-path grid index ``tau`` (array or ExitRecord); ``None`` means
            the last node. The generator is switched off from ``tau`` on.
        generator: optional replacement for ``cs.f`` with the same signature.
        stopped: the terminal is measurable at ``tau`` (for instance a function
            of ``X_tau``), so it is held constant from ``tau`` on instead of
            being projected backwards from the last node.
        cache: projection cache to reuse regressions between solves that share
            the state cloud.
    """
    if bundle is None:
        raise ValueError("solve_bsde needs the path bundle that drove the state")
    grid = state.grid
    m, n = state.m_paths, grid.n_steps
    s = state.start_idx
    dt = grid.dt
    if cs.gamma * dt >= 1:
        raise ValueError(f"explicit scheme needs gamma*dt < 1, got {cs.gamma * dt}")
    eta = np.broadcast_to(np.asarray(terminal, float), (m,)).copy()
    if not np.all(np.isfinite(eta)):
        raise NonFiniteValue("terminal values are not finite")
    tau = _cutoff(cutoff, m, n)
    g = cs.eval_g if use_g_feature else None
    if cache is None:
        cache = ProjectionCache(state, degree, g)
    elif cache.state is not state:
        raise ValueError("projection cache belongs to another state cloud")

    Y = np.empty((m, n + 1))
    Z = np.zeros((m, n, cs.d))
    Y[:, n] = eta
    run = np.zeros(m)
    times, inc, X = grid.times, bundle.increments, state.values
    ridge = []
    everyone = np.ones(m, dtype=bool)
    for k in range(n - 1, s - 1, -1):
        alive = k < tau
        rows = alive if stopped else everyone
        Y[:, k] = Y[:, k + 1]
        if not rows.any():
            continue
        proj = cache.get(k, rows)
        if proj.ridge:
            ridge.append((k, proj.ridge))
        y_next = Y[rows, k + 1]
        y_hat = proj(y_next)
        # control variate: E[y_hat dB] = 0 and it removes most of the noise
        target = (y_next - y_hat)[:, None] * inc[rows, k] / dt
        z = proj(target)
        on = alive[rows]
        fk = np.zeros(len(y_hat))
        if on.any():
            fk[on] = cs.eval_f(times[k], X[rows, k][on], y_hat[on], z[on], mu.values[rows, k][on],
                               nu.values[rows, k][on], generator=generator)
        Y[rows, k] = y_hat + fk * dt
        Z[rows, k] = z
        run[rows] += fk * dt
        if not np.all(np.isfinite(Y[rows, k])):
            raise NonFiniteValue(f"Y is not finite at step {k}")
    Y[:, :s] = Y[:, s: s + 1]
    Y.flags.writeable = False
    Z.flags.writeable = False
    spec = f"poly(deg<={degree}, k={state.k})" + ("+g" if use_g_feature else "")
    return BsdeSolution(Y, Z, s, eta + run, spec, tuple(ridge))


# ---------------------------------------------------------------------------
# payoffs and identities
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PayoffEstimate:
    value: float
    std_err: float
    solution: BsdeSolution
    state: StatePaths


def evaluate_payoff(cs: CoefficientSet, t0: float, x, mu: ControlPath, nu: ControlPath,
                    bundle: PathBundle, **kw) -> PayoffEstimate:
    start = bundle.grid.index_of(t0)
    state = simulate_forward(cs, x, mu, nu, bundle, start_idx=start)
    eta = cs.eval_g(state.values[:, -1])
    sol = solve_bsde(cs, state, mu, nu, eta, None, bundle, **kw)
    return PayoffEstimate(sol.y0, sol.std_err, sol, state)


def payoff_J(cs: CoefficientSet, t0: float, x, mu: ControlPath, nu: ControlPath,
             bundle: PathBundle, **kw) -> float:
    """Payoff ``Y_t(T, g(X_T))`` averaged over paths."""
    return evaluate_payoff(cs, t0, x, mu, nu, bundle, **kw).value


def semigroup_check(cs: CoefficientSet, t0: float, x, mu: ControlPath, nu: ControlPath,
                    bundle: PathBundle, zeta_idx: int) -> float:
    """``|Y_t(T, eta) - Y_t(zeta, Y_zeta(T, eta))|`` with projections reused.

    The maximum is taken over paths and all nodes up to ``zeta``.
    """
    n = bundle.grid.n_steps
    if not 0 <= zeta_idx <= n:
        raise ValueError("zeta_idx out of range")
    start = bundle.grid.index_of(t0)
    state = simulate_forward(cs, x, mu, nu, bundle, start_idx=start)
    cache = ProjectionCache(state, 3, cs.eval_g)
    eta = cs.eval_g(state.values[:, -1])
    full = solve_bsde(cs, state, mu, nu, eta, None, bundle, cache=cache)
    zeta = max(zeta_idx, start)
    restarted = solve_bsde(cs, state, mu, nu, full.Y[:, zeta], np.full(state.m_paths, zeta),
                           bundle, cache=cache, stopped=True)
    return float(np.max(np.abs(full.Y[:, start: zeta + 1] - restarted.Y[:, start: zeta + 1])))


@dataclass
class ComparisonResult:
    violations: int
    total: int
    max_excess: float

    @property
    def fraction(self) -> float:
        return self.violations / self.total if self.total else 0.0


def comparison_check(cs: CoefficientSet, state: StatePaths, mu: ControlPath, nu: ControlPath,
                     first: tuple, second: tuple, bundle: PathBundle, tol: float = 1e-10,
                     cutoff=None) -> ComparisonResult:
    """Count ``(path, node)`` entries with ``Y1 > Y2 + tol``.

    ``first`` and ``second`` are ``(eta, generator)`` pairs; a generator of
    ``None`` means ``cs.f``. Both solves share one projection cache.
    """
    cache = ProjectionCache(state, 3, cs.eval_g)
    (eta1, f1), (eta2, f2) = first, second
    y1 = solve_bsde(cs, state, mu, nu, eta1, cutoff, bundle, generator=f1, cache=cache).Y
    y2 = solve_bsde(cs, state, mu, nu, eta2, cutoff, bundle, generator=f2, cache=cache).Y
    s = state.start_idx
    excess = y1[:, s:] - y2[:, s:]
    return ComparisonResult(int(np.sum(excess > tol)), int(excess.size), float(np.max(excess)))


@dataclass
class StabilityReport:
    """Sample ratios along a ladder of perturbation sizes."""

    scales: list
    numerators: list
    denominators: list
    ratios: list

    @property
    def max_adjacent_factor(self) -> float:
        r = np.asarray(self.ratios, float)
        if len(r) < 2 or np.any(r <= 0):
            return float("inf") if np.any(r <= 0) and len(r) > 1 else 1.0
        return float(np.max(np.maximum(r[1:] / r[:-1], r[:-1] / r[1:])))

    def bounded(self, factor: float = 2.0) -> bool:
        return self.max_adjacent_factor < factor


def terminal_stability(cs: CoefficientSet, state: StatePaths, mu: ControlPath, nu: ControlPath,
                       eta, direction, scales, bundle: PathBundle, p_tilde: float | None = None,
                       cutoff=None) -> StabilityReport:
    """``E[sup_k |Y1 - Y2|^p~] / E[|eta1 - eta2|^p~]`` for ``eta2 = eta + c * direction``."""
    p_tilde = cs.p if p_tilde is None else p_tilde
    cache = ProjectionCache(state, 3, cs.eval_g)
    eta = np.asarray(eta, float)
    direction = np.asarray(direction, float)
    base = solve_bsde(cs, state, mu, nu, eta, cutoff, bundle, cache=cache).Y
    s = state.start_idx
    nums, dens, ratios = [], [], []
    for c in scales:
        other = solve_bsde(cs, state, mu, nu, eta + c * direction, cutoff, bundle, cache=cache).Y
        num = float(np.mean(np.max(np.abs(base[:, s:] - other[:, s:]), axis=1) ** p_tilde))
        den = float(np.mean(np.abs(c * direction) ** p_tilde))
        nums.append(num)
        dens.append(den)
        ratios.append(num / den if den > 0 else 0.0)
    return StabilityReport(list(scales), nums, dens, ratios)


def initial_stability(cs: CoefficientSet, t0: float, x, direction, scales, mu: ControlPath,
                      nu: ControlPath, bundle: PathBundle, p_tilde: float | None = None) -> StabilityReport:
    """``E[sup_k |Y1 - Y2|^p~] / |xi1 - xi2|^(2 p~ / p)`` for ``xi2 = x + c * direction``."""
    p_tilde = cs.p if p_tilde is None else p_tilde
    x = np.asarray(x, float).reshape(-1)
    direction = np.asarray(direction, float).reshape(-1)
    base = evaluate_payoff(cs, t0, x, mu, nu, bundle)
    s = base.state.start_idx
    nums, dens, ratios = [], [], []
    for c in scales:
        other = evaluate_payoff(cs, t0, x + c * direction, mu, nu, bundle)
        diff = np.max(np.abs(base.solution.Y[:, s:] - other.solution.Y[:, s:]), axis=1)
        num = float(np.mean(diff**p_tilde))
        den = float(np.linalg.norm(c * direction) ** (2 * p_tilde / cs.p))
        nums.append(num)
        dens.append(den)
        ratios.append(num / den if den > 0 else 0.0)
    return StabilityReport(list(scales), nums, dens, ratios)
