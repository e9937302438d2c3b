"""Explicit monotone finite differences for the 1-D Isaacs equation.

Solves ``-w_t - H(t, x, w, w_x, w_xx) = 0`` backwards from ``w(T) = g`` where
``H`` is the max-min (``supinf``) or min-max (``infsup``) of the pointwise
Hamiltonian over finite control grids. Spatial derivatives are central; a
local Lax-Friedrichs term ``theta/2 * (w_{j+1} - 2 w_j + w_{j-1}) / dx`` with
``theta >= max |dH/dw_x|`` makes every update nondecreasing in the
neighbouring values under the step restriction

    dt <= dx^2 / (max sigma^2 + dx * theta + dx^2 * gamma).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import BoundaryPoint, CflViolated, NonFiniteSolution
from .game_values import estimate_w1, estimate_w2
from .model import CoefficientSet

WHICH = ("supinf", "infsup")
CFL_SAFETY = 0.9


@dataclass(frozen=True)
class PdeSpec:
    """Space-time grid: ``n_x`` nodes on ``[x_min, x_max]``, ``n_t`` steps on ``[t0, T]``.

    ``n_t=None`` picks the smallest step count allowed by the CFL bound
    (with a 0.9 safety factor).
    """

    x_min: float
    x_max: float
    n_x: int
    t0: float
    T: float
    n_t: int | None = None

    def __post_init__(self):
        if not self.x_max > self.x_min or self.n_x < 3:
            raise ValueError("need x_max > x_min and n_x >= 3")
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)


@dataclass(frozen=True, eq=False)
class PdeGrid:
    """Solution ``w[i, j]`` at ``times[i]``, ``xs[j]`` together with the scheme constants."""

    spec: PdeSpec
    times: np.ndarray
    xs: np.ndarray
    solution: np.ndarray
    dt: float
    theta: float
    cfl_limit: float
    which: str
    u_grid: np.ndarray
    v_grid: np.ndarray
    _interp: dict = field(default_factory=dict, repr=False)

    @property
    def dx(self) -> float:
        return self.spec.dx

    def __call__(self, t, x) -> np.ndarray:
        fn = self._interp.get("fn")
        if fn is None:
            fn = RegularGridInterpolator((self.times, self.xs), self.solution)
            self._interp["fn"] = fn
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        return fn(np.column_stack([t.ravel(), x.ravel()])).reshape(t.shape)

    def to_csv(self, header_line: str | None = None) -> str:
        buf = io.StringIO()
        if header_line:
            buf.write(header_line.rstrip("\n") + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("t", "x", "w"))
        for i, t in enumerate(self.times):
            for j, x in enumerate(self.xs):
                writer.writerow((repr(float(t)), repr(float(x)), repr(float(self.solution[i, j]))))
        return buf.getvalue()


# ---------------------------------------------------------------------------
# numerical Hamiltonian
# ---------------------------------------------------------------------------


def _control_grid(grid, dim: int) -> np.ndarray:
    return np.asarray(grid, float).reshape(-1, dim)


def optimized_hamiltonian(cs: CoefficientSet, t: float, x, y, p, q, u_grid, v_grid,
                          which: str = "supinf") -> np.ndarray:
    """``max_u min_v`` (or ``min_v max_u``) of ``q sigma^2/2 + p b + f(t,x,y,p sigma,u,v)``.

    ``x``, ``y``, ``p``, ``q`` are 1-D arrays over nodes; the result has the same length.
    """
    if which not in WHICH:
        raise ValueError(f"which must be one of {WHICH}")
    U = _control_grid(u_grid, cs.u_space.dim)
    V = _control_grid(v_grid, cs.v_space.dim)
    n, nu, nv = len(x), len(U), len(V)
    sh = (n, nu, nv)
    X = np.broadcast_to(np.asarray(x, float)[:, None, None, None], sh + (1,))
    Uu = np.broadcast_to(U[None, :, None, :], sh + (U.shape[1],))
    Vv = np.broadcast_to(V[None, None, :, :], sh + (V.shape[1],))
    b = cs.eval_b(t, X, Uu, Vv)[..., 0]
    s = cs.eval_sigma(t, X, Uu, Vv)[..., 0, 0]
    P = np.asarray(p, float)[:, None, None]
    Q = np.asarray(q, float)[:, None, None]
    Yv = np.broadcast_to(np.asarray(y, float)[:, None, None], sh)
    f = cs.eval_f(t, X, Yv, (P * s)[..., None], Uu, Vv)
    H = 0.5 * s**2 * Q + P * b + f
    if which == "supinf":
        return H.min(axis=2).max(axis=1)
    return H.max(axis=1).min(axis=1)


def _z_lipschitz(cs, xs, times, U, V, y_probe=(-1.0, 0.0, 1.0), z_probe=(-2.0, -1.0, 0.0, 1.0, 2.0)) -> float:
    """Sampled Lipschitz constant of ``f`` in ``z``."""
    zs = np.asarray(z_probe, float)
    worst = 0.0
    for t in (times[0], times[len(times) // 2], times[-1]):
        for y in y_probe:
            sh = (len(xs), len(U), len(V), len(zs))
            X = np.broadcast_to(xs[:, None, None, None, None], sh + (1,))
            Uu = np.broadcast_to(U[None, :, None, None, :], sh + (U.shape[1],))
            Vv = np.broadcast_to(V[None, None, :, None, :], sh + (V.shape[1],))
            Z = np.broadcast_to(zs[None, None, None, :, None], sh + (1,))
            f = cs.eval_f(t, X, np.full(sh, y), Z, Uu, Vv)
            slope = np.abs(np.diff(f, axis=-1)) / np.diff(zs)
            worst = max(worst, float(slope.max()))
    return worst


def scheme_constants(cs: CoefficientSet, spec: PdeSpec, u_grid, v_grid) -> dict:
    """Dissipation ``theta``, ``max sigma^2`` and the CFL step bound on the grid."""
    U = _control_grid(u_grid, cs.u_space.dim)
    V = _control_grid(v_grid, cs.v_space.dim)
    xs = spec.xs
    times = np.linspace(spec.t0, spec.T, 5)
    sh = (len(xs), len(U), len(V))
    X = np.broadcast_to(xs[:, None, None, None], sh + (1,))
    Uu = np.broadcast_to(U[None, :, None, :], sh + (U.shape[1],))
    Vv = np.broadcast_to(V[None, None, :, :], sh + (V.shape[1],))
    bmax = smax = 0.0
    for t in times:
        bmax = max(bmax, float(np.abs(cs.eval_b(t, X, Uu, Vv)).max()))
        smax = max(smax, float(np.abs(cs.eval_sigma(t, X, Uu, Vv)).max()))
    lz = _z_lipschitz(cs, xs, times, U, V)
    theta = bmax + lz * smax
    dx = spec.dx
    limit = dx**2 / (smax**2 + dx * theta + dx**2 * cs.gamma)
    return {"theta": theta, "sigma_max": smax, "b_max": bmax, "f_z_lipschitz": lz, "cfl_limit": limit}


def _boundary_values(cs, x_b, times, T, u_grid, v_grid, which) -> np.ndarray:
    """Time-Taylor extension ``g(x_b) + (T - t) H(T, x_b, g, g', g'')`` at the edge nodes."""
    xb = np.asarray(x_b, float)
    h1, h2 = 1e-5, 1e-3
    g = lambda x: cs.eval_g(np.asarray(x, float)[:, None])  # noqa: E731
    g0 = g(xb)
    g1 = (g(xb + h1) - g(xb - h1)) / (2 * h1)
    g2 = (g(xb + h2) - 2 * g0 + g(xb - h2)) / h2**2
    H = optimized_hamiltonian(cs, T, xb, g0, g1, g2, u_grid, v_grid, which)
    return g0[None, :] + (T - np.asarray(times))[:, None] * H[None, :]


def solve_pde(cs: CoefficientSet, spec: PdeSpec, which: str = "supinf", u_grid=(0.0,),
              v_grid=(0.0,)) -> PdeGrid:
    """Backward explicit monotone scheme on ``spec``.

    Raises:
        CflViolated: the requested ``n_t`` gives a step above the CFL bound.
        NonFiniteSolution: the iteration produced a non-finite value.
    """
    if cs.k != 1 or cs.d != 1:
        raise ValueError("the PDE solver handles k = d = 1 only")
    if which not in WHICH:
        raise ValueError(f"which must be one of {WHICH}")
    U = _control_grid(u_grid, cs.u_space.dim)
    V = _control_grid(v_grid, cs.v_space.dim)
    consts = scheme_constants(cs, spec, U, V)
    limit = consts["cfl_limit"]
    span = spec.T - spec.t0
    n_t = spec.n_t if spec.n_t is not None else max(1, math.ceil(span / (CFL_SAFETY * limit)))
    dt = span / n_t
    if dt > limit * (1 + 1e-12):
        raise CflViolated(f"dt={dt:.4g} exceeds the CFL bound {limit:.4g}")
    dx = spec.dx
    theta = consts["theta"]
    xs = spec.xs
    times = spec.t0 + np.arange(n_t + 1) * dt
    times[-1] = spec.T
    W = np.empty((n_t + 1, spec.n_x))
    W[-1] = cs.eval_g(xs[:, None])
    edges = _boundary_values(cs, xs[[0, -1]], times, spec.T, U, V, which)
    inner = xs[1:-1]
    for i in range(n_t - 1, -1, -1):
        w = W[i + 1]
        lap = w[2:] - 2 * w[1:-1] + w[:-2]
        p = (w[2:] - w[:-2]) / (2 * dx)
        q = lap / dx**2
        H = optimized_hamiltonian(cs, times[i + 1], inner, w[1:-1], p, q, U, V, which)
        W[i, 1:-1] = w[1:-1] + dt * (H + 0.5 * theta * lap / dx)
        W[i, [0, -1]] = edges[i]
        if not np.all(np.isfinite(W[i])):
            raise NonFiniteSolution(f"non-finite value at time index {i}")
    W.flags.writeable = False
    return PdeGrid(spec, times, xs, W, dt, theta, limit, which, U, V)


# ---------------------------------------------------------------------------
# monotonicity and comparison
# ---------------------------------------------------------------------------


@dataclass
class StencilReport:
    """Worst-case stencil weights of one explicit update over the grid and controls."""

    neighbour_min: float
    centre_min: float
    empirical_ok: bool

    @property
    def monotone(self) -> bool:
        return self.neighbour_min >= -1e-14 and self.centre_min >= -1e-14 and self.empirical_ok


def stencil_check(cs: CoefficientSet, pde: PdeGrid, n_probe: int = 64, seed: int = 0) -> StencilReport:
    """Check the update is nondecreasing in each of its three inputs.

    The closed-form weights use ``|dH/dp| <= |b| + L_z |sigma|`` and
    ``dH/dy >= -gamma``; the empirical part bumps each input of random
    stencils upwards and checks the update does not decrease.
    """
    consts = scheme_constants(cs, pde.spec, pde.u_grid, pde.v_grid)
    dx, dt, theta = pde.dx, pde.dt, pde.theta
    slope = consts["b_max"] + consts["f_z_lipschitz"] * consts["sigma_max"]
    s2 = consts["sigma_max"] ** 2
    neighbour = dt * (0.5 * theta / dx - 0.5 * slope / dx)
    centre = 1 - dt * (s2 / dx**2 + theta / dx + cs.gamma)

    rng = np.random.default_rng(seed)
    ok = True
    j = rng.integers(1, len(pde.xs) - 1, n_probe)
    i = rng.integers(0, len(pde.times) - 1, n_probe)
    for a, b in zip(i, j):
        w = pde.solution[a + 1, b - 1: b + 2].copy()
        t, x = pde.times[a + 1], pde.xs[b]

        def update(s):
            lap = s[2] - 2 * s[1] + s[0]
            H = optimized_hamiltonian(cs, t, np.array([x]), np.array([s[1]]),
                                      np.array([(s[2] - s[0]) / (2 * dx)]), np.array([lap / dx**2]),
                                      pde.u_grid, pde.v_grid, pde.which)
            return float(s[1] + dt * (H[0] + 0.5 * theta * lap / dx))

        base = update(w)
        for c in range(3):
            bumped = w.copy()
            bumped[c] += 1e-3 * max(1.0, abs(w[c]))
            if update(bumped) < base - 1e-12 * max(1.0, abs(base)):
                ok = False
    return StencilReport(float(neighbour), float(centre), ok)


def comparison_fraction(first: PdeGrid, second: PdeGrid, tol: float = 0.0) -> float:
    """Fraction of nodes with ``first <= second + tol``."""
    if first.solution.shape != second.solution.shape:
        raise ValueError("solutions live on different grids")
    return float(np.mean(first.solution <= second.solution + tol))


# ---------------------------------------------------------------------------
# viscosity residuals
# ---------------------------------------------------------------------------


@dataclass
class ViscosityReport:
    """Residual ``-phi_t - H(t, x, phi, phi_x, phi_xx)`` of the local test function.

    ``coefficients[a, b]`` multiplies ``(t - t_i)^a (x - x_j)^b``.
    """

    point: tuple
    coefficients: np.ndarray
    residual: float
    side: str
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {"point": list(self.point), "coefficients": self.coefficients.tolist(),
                "residual": self.residual, "side": self.side, "tol": self.tol, "pass": self.passed}


def _biquadratic(ts: np.ndarray, xs: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Coefficients of the biquadratic through a 3x3 stencil centred on the middle node."""
    dt_ = ts - ts[1]
    dx_ = xs - xs[1]
    A = np.array([[dt_[a] ** p * dx_[b] ** q for p in range(3) for q in range(3)]
                  for a in range(3) for b in range(3)])
    return np.linalg.solve(A, W.ravel()).reshape(3, 3)


def viscosity_residual(cs: CoefficientSet, candidate, point: tuple, which: str = "supinf",
                       side: str = "sub", u_grid=None, v_grid=None, tol: float = 1e-6,
                       h: tuple = (1e-3, 1e-3), t_range: tuple | None = None) -> ViscosityReport:
    """Fit the 3x3 space-time biquadratic at ``point`` and evaluate the residual.

    ``candidate`` is a ``PdeGrid`` (the nearest node is used) or a function
    ``w(t, x)``; for functions the stencil spacing is ``h = (h_t, h_x)``.
    A subsolution passes when the residual is at most ``tol``, a
    supersolution when it is at least ``-tol``.

    Raises:
        BoundaryPoint: the stencil would leave the grid (or ``t_range``).
    """
    if side not in ("sub", "super"):
        raise ValueError("side must be 'sub' or 'super'")
    t, x = point
    if isinstance(candidate, PdeGrid):
        i = int(np.argmin(np.abs(candidate.times - t)))
        j = int(np.argmin(np.abs(candidate.xs - x)))
        if not (0 < i < len(candidate.times) - 1 and 0 < j < len(candidate.xs) - 1):
            raise BoundaryPoint(f"point {point} has no interior stencil")
        ts = candidate.times[i - 1: i + 2]
        xs = candidate.xs[j - 1: j + 2]
        W = candidate.solution[i - 1: i + 2, j - 1: j + 2]
        u_grid = candidate.u_grid if u_grid is None else u_grid
        v_grid = candidate.v_grid if v_grid is None else v_grid
    else:
        ht, hx = h
        if t_range is not None and not (t_range[0] <= t - ht and t + ht <= t_range[1]):
            raise BoundaryPoint(f"point {point} is too close to the time boundary")
        ts = np.array([t - ht, t, t + ht])
        xs = np.array([x - hx, x, x + hx])
        W = np.asarray(candidate(ts[:, None], xs[None, :]), float).reshape(3, 3)
    u_grid = (0.0,) if u_grid is None else u_grid
    v_grid = (0.0,) if v_grid is None else v_grid
    c = _biquadratic(ts, xs, W)
    phi, phi_t, phi_x, phi_xx = c[0, 0], c[1, 0], c[0, 1], 2 * c[0, 2]
    H = optimized_hamiltonian(cs, float(ts[1]), np.array([xs[1]]), np.array([phi]),
                              np.array([phi_x]), np.array([phi_xx]), u_grid, v_grid, which)[0]
    residual = float(-phi_t - H)
    passed = residual <= tol if side == "sub" else residual >= -tol
    return ViscosityReport((float(ts[1]), float(xs[1])), c, residual, side, tol, bool(passed))


# ---------------------------------------------------------------------------
# Monte-Carlo cross-check
# ---------------------------------------------------------------------------


@dataclass
class CrossValidation:
    mc_value: float
    mc_std_err: float
    pde_value: float
    gap: float
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def cross_validate(cs: CoefficientSet, point: tuple, strategies, controls, bundle, spec: PdeSpec,
                   u_grid=(0.0,), v_grid=(0.0,), which: str = "w1",
                   threads: int | None = None) -> CrossValidation:
    """Compare the Monte-Carlo value with the PDE solution at ``point = (t, x)``.

    ``w1`` is paired with the ``supinf`` Hamiltonian and ``w2`` with ``infsup``.
    Passes when the gap is below ``4 std_err + 5 (dx + dt)``.
    """
    t, x = point
    if which == "w1":
        est = estimate_w1(cs, t, x, strategies, controls, bundle, threads)
        pde = solve_pde(cs, spec, "supinf", u_grid, v_grid)
    else:
        est = estimate_w2(cs, t, x, strategies, controls, bundle, threads)
        pde = solve_pde(cs, spec, "infsup", u_grid, v_grid)
    pde_value = float(pde(t, x))
    gap = abs(est.value - pde_value)
    tol = 4 * est.std_err + 5 * (pde.dx + pde.dt)
    return CrossValidation(est.value, est.std_err, pde_value, gap, tol, bool(gap < tol))
