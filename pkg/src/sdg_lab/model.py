"""Game coefficients, structural constants and assumption checks.

All coefficient callables are vectorised over leading (batch) axes:

    b(t, x, u, v)           x: (..., k), u: (..., lu), v: (..., lv) -> (..., k)
    sigma(t, x, u, v)       -> (..., k, d)
    f(t, x, y, z, u, v)     y: (...,), z: (..., d) -> (...,)
    g(x)                    -> (...,)
    psi(t, u)               -> (..., lv)
    psi_tilde(t, v)         -> (..., lu)

``t`` is a float or an array broadcastable against the batch shape. Callables
may return anything that broadcasts to the documented shape (a bare ``0.0``
for a vanishing coefficient is fine); the ``CoefficientSet.eval_*`` methods
do the broadcasting.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DimensionMismatch,
    NonFiniteCoefficient,
    SignConditionViolated,
)

REL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ControlSpace:
    """Euclidean control space with base point and optional ball bound."""

    dim: int
    base_point: np.ndarray | None = None
    bound: float | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("control dimension must be positive")
        base = np.zeros(self.dim) if self.base_point is None else np.asarray(self.base_point, float)
        if base.shape != (self.dim,):
            raise DimensionMismatch(f"base point has shape {base.shape}, expected ({self.dim},)")
        object.__setattr__(self, "base_point", base)
        if self.bound is not None and self.bound < 0:
            raise ValueError("bound must be nonnegative")

    def gauge(self, u) -> np.ndarray:
        """Distance to the base point, over the last axis."""
        u = np.asarray(u, dtype=float)
        return np.linalg.norm(u - self.base_point, axis=-1)

    def contains(self, u, atol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.dim or not np.all(np.isfinite(u)):
            return False
        if self.bound is None:
            return True
        return bool(np.all(self.gauge(u) <= self.bound + atol))

    def compatible(self, other: "ControlSpace") -> bool:
        return (
            self.dim == other.dim
            and np.array_equal(self.base_point, other.base_point)
            and self.bound == other.bound
        )


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Data ``(b, sigma, f, g)`` of the controlled SDE-BSDE game."""

    k: int
    d: int
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    gamma: float
    kappa: float
    p: float
    u_space: ControlSpace
    v_space: ControlSpace
    psi: Callable | None = None
    psi_tilde: Callable | None = None
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 1 < self.p <= 2:
            raise ValueError("p must lie in (1, 2]")

    # -- broadcasting evaluators -------------------------------------------------
    def _batch(self, *arrays) -> tuple:
        return np.broadcast_shapes(*(np.shape(a)[:-1] for a in arrays))

    def eval_b(self, t, x, u, v) -> np.ndarray:
        x, u, v = (np.asarray(a, float) for a in (x, u, v))
        shape = self._batch(x, u, v) + (self.k,)
        return np.broadcast_to(np.asarray(self.b(t, x, u, v), float), shape)

    def eval_sigma(self, t, x, u, v) -> np.ndarray:
        x, u, v = (np.asarray(a, float) for a in (x, u, v))
        shape = self._batch(x, u, v) + (self.k, self.d)
        return np.broadcast_to(np.asarray(self.sigma(t, x, u, v), float), shape)

    def eval_f(self, t, x, y, z, u, v, generator: Callable | None = None) -> np.ndarray:
        x, y, z, u, v = (np.asarray(a, float) for a in (x, y, z, u, v))
        shape = np.broadcast_shapes(self._batch(x, z, u, v), y.shape)
        fn = self.f if generator is None else generator
        return np.broadcast_to(np.asarray(fn(t, x, y, z, u, v), float), shape)

    def eval_g(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.broadcast_to(np.asarray(self.g(x), float), x.shape[:-1])

    def replace(self, **changes) -> "CoefficientSet":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return CoefficientSet(**kw)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationGrid:
    """Sample points for the sampled assumption checks.

    Explicit lattices are combined with ``n_random`` uniform points drawn
    from the same box with ``seed``.
    """

    t_values: tuple = (0.0, 0.5, 1.0)
    x_radius: float = 3.0
    x_points: int = 7
    control_radius: float = 3.0
    control_points: int = 7
    y_values: tuple = (-2.0, 0.0, 2.0)
    z_radius: float = 2.0
    n_random: int = 64
    seed: int = 0

    def lattice(self, dim: int, radius: float, points: int) -> np.ndarray:
        axis = np.linspace(-radius, radius, points)
        if dim == 1:
            base = axis[:, None]
        else:
            base = np.array(list(itertools.product(axis[:: max(1, points // 3)], repeat=dim)))
        rng = np.random.default_rng(self.seed + 7919 * dim + points)
        extra = rng.uniform(-radius, radius, size=(self.n_random, dim))
        return np.vstack([base, extra])


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_ratio: float
    witness: dict | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "worst_ratio": self.worst_ratio,
            "witness": self.witness,
        }


@dataclass
class ValidationReport:
    entries: list
    note: str = ""

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def entry(self, name: str) -> CheckResult:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "note": self.note,
            "entries": [e.to_dict() for e in self.entries],
        }


def _finite(name: str, arr: np.ndarray, where) -> np.ndarray:
    arr = np.asarray(arr, float)
    bad = ~np.isfinite(arr)
    if bad.any():
        i = int(np.argmax(bad.reshape(len(arr), -1).any(axis=1))) if arr.ndim else 0
        raise NonFiniteCoefficient(f"{name} is not finite at sample {where(i)}")
    return arr


def _ratio_check(name, lhs, rhs, points) -> CheckResult:
    lhs = np.asarray(lhs, float)
    rhs = np.asarray(rhs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lhs == 0.0, 0.0, lhs / rhs)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    i = int(np.argmax(ratio))
    worst = float(ratio[i])
    passed = bool(np.all(lhs <= rhs * (1.0 + REL_TOL)))
    witness = None if passed else {key: np.asarray(val[i]).tolist() for key, val in points.items()}
    return CheckResult(name, passed, worst, witness)


def validate_coefficients(cs: CoefficientSet, grid: ValidationGrid | None = None) -> ValidationReport:
    """Check growth, Lipschitz/Hoelder and neutralizer assumptions on samples.

    Inequalities are checked exactly at every sample; neutralizer identities
    use a relative tolerance of ``1e-9``.
    """
    grid = grid or ValidationGrid()
    ts = np.asarray(grid.t_values, float)
    if ts.size == 0:
        raise ValueError("validation grid has no time samples")
    xs = grid.lattice(cs.k, grid.x_radius, grid.x_points)
    us = grid.lattice(cs.u_space.dim, grid.control_radius, grid.control_points)
    vs = grid.lattice(cs.v_space.dim, grid.control_radius, grid.control_points)
    if cs.u_space.bound is not None:
        us = _clip_to_ball(us, cs.u_space)
    if cs.v_space.bound is not None:
        vs = _clip_to_ball(vs, cs.v_space)
    zs = grid.lattice(cs.d, grid.z_radius, 3)
    ys = np.asarray(grid.y_values, float)
    q = 2.0 / cs.p
    gam = cs.gamma
    entries = []
    rng = np.random.default_rng(grid.seed)

    # (t, u, v) product
    T_, U_, V_ = (a.reshape(-1) for a in np.meshgrid(np.arange(ts.size), np.arange(len(us)), np.arange(len(vs)), indexing="ij"))
    t_tuv, u_tuv, v_tuv = ts[T_], us[U_], vs[V_]
    gu, gv = cs.u_space.gauge(u_tuv), cs.v_space.gauge(v_tuv)
    zero_x = np.zeros((len(T_), cs.k))

    def at(i):
        return {"t": float(t_tuv[i]), "u": u_tuv[i].tolist(), "v": v_tuv[i].tolist()}

    b0 = _finite("b", cs.eval_b(t_tuv, zero_x, u_tuv, v_tuv), at)
    s0 = _finite("sigma", cs.eval_sigma(t_tuv, zero_x, u_tuv, v_tuv), at)
    lhs = np.linalg.norm(b0, axis=-1) + np.linalg.norm(s0.reshape(len(T_), -1), axis=-1)
    entries.append(_ratio_check("growth_b_sigma", lhs, gam * (1 + gu + gv),
                                {"t": t_tuv, "u": u_tuv, "v": v_tuv}))

    f0 = _finite("f", cs.eval_f(t_tuv, zero_x, np.zeros(len(T_)), np.zeros((len(T_), cs.d)), u_tuv, v_tuv), at)
    entries.append(_ratio_check("growth_f", np.abs(f0), gam * (1 + gu**q + gv**q),
                                {"t": t_tuv, "u": u_tuv, "v": v_tuv}))

    # random pairs for the Lipschitz / Hoelder checks
    n_pairs = max(256, 4 * len(xs))
    i1 = rng.integers(0, len(xs), n_pairs)
    i2 = rng.integers(0, len(xs), n_pairs)
    # also every pair of lattice neighbours
    i1 = np.concatenate([i1, np.arange(len(xs) - 1)])
    i2 = np.concatenate([i2, np.arange(1, len(xs))])
    keep = np.any(xs[i1] != xs[i2], axis=-1)
    i1, i2 = i1[keep], i2[keep]
    n = len(i1)
    tp = ts[rng.integers(0, ts.size, n)]
    up = us[rng.integers(0, len(us), n)]
    vp = vs[rng.integers(0, len(vs), n)]
    x1, x2 = xs[i1], xs[i2]
    dx = np.linalg.norm(x1 - x2, axis=-1)

    def at_pair(i):
        return {"t": float(tp[i]), "x": x1[i].tolist(), "x2": x2[i].tolist(), "u": up[i].tolist(), "v": vp[i].tolist()}

    db = _finite("b", cs.eval_b(tp, x1, up, vp), at_pair) - cs.eval_b(tp, x2, up, vp)
    ds = _finite("sigma", cs.eval_sigma(tp, x1, up, vp), at_pair) - cs.eval_sigma(tp, x2, up, vp)
    lhs = np.linalg.norm(db, axis=-1) + np.linalg.norm(ds.reshape(n, -1), axis=-1)
    entries.append(_ratio_check("lipschitz_b_sigma", lhs, gam * dx,
                                {"t": tp, "x": x1, "x2": x2, "u": up, "v": vp}))

    y1 = ys[rng.integers(0, ys.size, n)]
    y2 = ys[rng.integers(0, ys.size, n)]
    z1 = zs[rng.integers(0, len(zs), n)]
    z2 = zs[rng.integers(0, len(zs), n)]
    df = _finite("f", cs.eval_f(tp, x1, y1, z1, up, vp), at_pair) - cs.eval_f(tp, x2, y2, z2, up, vp)
    rhs = gam * (dx**q + np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=-1))
    entries.append(_ratio_check("lipschitz_f", np.abs(df), rhs,
                                {"t": tp, "x": x1, "x2": x2, "y": y1, "y2": y2, "u": up, "v": vp}))

    dg = _finite("g", cs.eval_g(x1), at_pair) - cs.eval_g(x2)
    entries.append(_ratio_check("holder_g", np.abs(dg), gam * dx**q, {"x": x1, "x2": x2}))

    if cs.psi is not None:
        entries.extend(_neutralizer_checks(cs, "u", ts, xs, ys, zs, us, rng))
    if cs.psi_tilde is not None:
        entries.extend(_neutralizer_checks(cs, "v", ts, xs, ys, zs, vs, rng))

    note = (f"checked on |x| <= {grid.x_radius}, controls within {grid.control_radius} of the "
            f"base points; nothing is asserted outside the configured range")
    return ValidationReport(entries, note)


def _clip_to_ball(points: np.ndarray, space: ControlSpace) -> np.ndarray:
    g = space.gauge(points)
    scale = np.where(g > space.bound, space.bound / np.where(g > 0, g, 1.0), 1.0)
    return space.base_point + (points - space.base_point) * scale[:, None]


def _neutralizer_checks(cs, side, ts, xs, ys, zs, own, rng) -> list:
    """(A-u) when side == 'u', (A-v) when side == 'v'."""
    own_space = cs.u_space if side == "u" else cs.v_space
    other_space = cs.v_space if side == "u" else cs.u_space
    neutral = cs.psi if side == "u" else cs.psi_tilde
    outside = own[own_space.gauge(own) >= cs.kappa]
    label = "neutralizer_" + side
    if len(outside) < 2:
        return [CheckResult(label, True, 0.0, {"note": "no samples outside the kappa-ball"})]
    n = 512
    a = outside[rng.integers(0, len(outside), n)]
    a2 = outside[rng.integers(0, len(outside), n)]
    t = ts[rng.integers(0, ts.size, n)]
    x = xs[rng.integers(0, len(xs), n)]
    y = ys[rng.integers(0, ys.size, n)]
    z = zs[rng.integers(0, len(zs), n)]
    r1 = np.broadcast_to(np.asarray(neutral(t, a), float), (n, other_space.dim))
    r2 = np.broadcast_to(np.asarray(neutral(t, a2), float), (n, other_space.dim))
    if side == "u":
        args1, args2 = (a, r1), (a2, r2)
    else:
        args1, args2 = (r1, a), (r2, a2)
    worst = 0.0
    bad = None
    for fname, v1, v2 in (
        ("b", cs.eval_b(t, x, *args1), cs.eval_b(t, x, *args2)),
        ("sigma", cs.eval_sigma(t, x, *args1), cs.eval_sigma(t, x, *args2)),
        ("f", cs.eval_f(t, x, y, z, *args1), cs.eval_f(t, x, y, z, *args2)),
    ):
        diff = np.abs(v1 - v2).reshape(n, -1).max(axis=-1)
        scale = REL_TOL * np.maximum(1.0, np.maximum(np.abs(v1), np.abs(v2)).reshape(n, -1).max(axis=-1))
        r = diff / scale
        i = int(np.argmax(r))
        if r[i] > worst:
            worst = float(r[i])
            bad = {"coefficient": fname, "t": float(t[i]), side: a[i].tolist(), side + "2": a2[i].tolist()}
    eq = CheckResult(label + "_identity", worst <= 1.0, worst, None if worst <= 1.0 else bad)
    lhs = other_space.gauge(r1)
    rhs = cs.kappa * (1 + own_space.gauge(a))
    gr = _ratio_check(label + "_growth", lhs, rhs, {"t": t, side: a})
    return [eq, gr]


# ---------------------------------------------------------------------------
# canonical examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdditiveFuncs:
    """Coefficients of one merged control argument ``w = u + v``.

    ``b(t, x, w)``, ``sigma(t, x, w)``, ``f(t, x, y, z, w)``, ``g(x)``, vectorised
    with the module conventions (``w`` has shape ``(..., l)``).
    """

    b: Callable
    sigma: Callable
    f: Callable
    g: Callable


def build_additive(u_dim: int, funcs: AdditiveFuncs, *, k: int = 1, d: int = 1,
                   gamma: float = 1.0, kappa: float = 1.0, p: float = 2.0,
                   v_dim: int | None = None, name: str = "additive") -> CoefficientSet:
    """Additive-control game: every coefficient sees only ``u + v``.

    The neutralizers are ``psi(t, u) = -u`` and ``psi_tilde(t, v) = -v``.
    """
    if v_dim is not None and v_dim != u_dim:
        raise DimensionMismatch(f"additive controls need equal dimensions, got {u_dim} and {v_dim}")
    space = ControlSpace(u_dim)

    def b(t, x, u, v):
        return funcs.b(t, x, u + v)

    def sigma(t, x, u, v):
        return funcs.sigma(t, x, u + v)

    def f(t, x, y, z, u, v):
        return funcs.f(t, x, y, z, u + v)

    def psi(t, u):
        return -np.asarray(u, float)

    return CoefficientSet(
        k=k, d=d, b=b, sigma=sigma, f=f, g=funcs.g, gamma=gamma, kappa=kappa, p=p,
        u_space=space, v_space=ControlSpace(u_dim), psi=psi, psi_tilde=psi,
        name=name, meta={"example": "additive", "funcs": funcs},
    )


def sign_condition_witness(phi: Callable, kappa: float, *, side: str = "u",
                           t_values=(0.0, 0.25, 0.5, 0.75, 1.0), radius: float = 4.0,
                           n_anchor: int = 81, n_inner: int = 401):
    """First sampled time (and the anchor nearest 0) where the sign condition fails, else None.

    For ``side='u'`` the anchor is ``u`` and the inner variable ranges over
    ``|v'| <= kappa |u|``; for ``side='v'`` the roles are swapped.
    """
    anchors = np.linspace(-radius, radius, n_anchor)
    anchors = np.union1d(anchors, [0.0])
    s = np.linspace(-1.0, 1.0, n_inner)
    for t in t_values:
        inner = kappa * np.abs(anchors)[:, None] * s[None, :]
        a = np.broadcast_to(anchors[:, None], inner.shape)
        vals = phi(t, a, inner) if side == "u" else phi(t, inner, a)
        vals = np.broadcast_to(np.asarray(vals, float), inner.shape)
        bad = (vals.min(axis=1) > 0) | (vals.max(axis=1) < 0)
        if np.any(bad):
            # report the violation closest to the base point
            i = int(np.argmin(np.where(bad, np.abs(anchors), np.inf)))
            return {"t": float(t), side: float(anchors[i])}
    return None


def build_scalar_phi(b0: Callable, sigma0: Callable, f0: Callable, phi: Callable,
                     kappa: float, *, gamma: float = 1.0, T: float = 1.0,
                     name: str = "scalar_phi") -> CoefficientSet:
    """Scalar game ``b = b0 + phi``, ``sigma = sigma0 + phi``, ``f = f0 + phi``.

    ``b0(t, x)``, ``sigma0(t, x)``, ``f0(t, x, y, z)`` and ``phi(t, u, v)`` act on
    scalars (numpy-broadcasting). ``k = d = 1`` and ``p = 2``. The neutralizers
    are left empty; ``controls.attach_neutralizers`` fills them from ``phi``.

    Raises:
        SignConditionViolated: the u-side sign condition fails at a sample.
    """
    witness = sign_condition_witness(phi, kappa, side="u", t_values=np.linspace(0, T, 5))
    if witness is not None:
        raise SignConditionViolated(
            f"inf_|v'|<=kappa|u| phi <= 0 <= sup fails at {witness}", witness)
    v_side_ok = sign_condition_witness(phi, kappa, side="v", t_values=np.linspace(0, T, 5)) is None

    def b(t, x, u, v):
        return (b0(t, x[..., 0]) + phi(t, u[..., 0], v[..., 0]))[..., None]

    def sigma(t, x, u, v):
        return (sigma0(t, x[..., 0]) + phi(t, u[..., 0], v[..., 0]))[..., None, None]

    def f(t, x, y, z, u, v):
        return f0(t, x[..., 0], y, z[..., 0]) + phi(t, u[..., 0], v[..., 0])

    return CoefficientSet(
        k=1, d=1, b=b, sigma=sigma, f=f, g=lambda x: np.zeros(np.shape(x)[:-1]),
        gamma=gamma, kappa=kappa, p=2.0, u_space=ControlSpace(1), v_space=ControlSpace(1),
        name=name,
        meta={"example": "scalar_phi", "phi": phi, "T": T, "v_side_sign_condition": v_side_ok},
    )


def with_terminal(cs: CoefficientSet, g: Callable) -> CoefficientSet:
    return cs.replace(g=g)


# ---------------------------------------------------------------------------
# expression-based construction (JSON model blocks)
# ---------------------------------------------------------------------------

_SYMBOLS = ("t", "x", "y", "z", "u", "v", "w")


def compile_expression(text: str, args: tuple) -> Callable:
    """Compile a scalar expression in the given symbol names to a numpy function."""
    import sympy

    syms = {s: sympy.Symbol(s, real=True) for s in _SYMBOLS}
    try:
        expr = sympy.parse_expr(str(text), local_dict=syms)
    except Exception as exc:  # sympy raises a zoo of exception types
        raise ValueError(f"cannot parse expression {text!r}: {exc}") from exc
    unknown = {str(s) for s in expr.free_symbols} - set(args)
    if unknown:
        raise ValueError(f"expression {text!r} uses {sorted(unknown)}, allowed {list(args)}")
    fn = sympy.lambdify([syms[a] for a in args], expr, modules="numpy")

    def wrapped(*vals):
        out = np.asarray(fn(*vals), dtype=float)
        shape = np.broadcast_shapes(*(np.shape(v) for v in vals))
        return np.broadcast_to(out, shape)

    wrapped.expression = str(text)
    return wrapped


def additive_from_expressions(b: str, sigma: str, f: str, g: str, **kw) -> CoefficientSet:
    """1-D additive game from expressions in ``t, x, y, z, w`` (``w = u + v``)."""
    cb = compile_expression(b, ("t", "x", "w"))
    cs_ = compile_expression(sigma, ("t", "x", "w"))
    cf = compile_expression(f, ("t", "x", "y", "z", "w"))
    cg = compile_expression(g, ("x",))
    funcs = AdditiveFuncs(
        b=lambda t, x, w: cb(t, x[..., 0], w[..., 0])[..., None],
        sigma=lambda t, x, w: cs_(t, x[..., 0], w[..., 0])[..., None, None],
        f=lambda t, x, y, z, w: cf(t, x[..., 0], y, z[..., 0], w[..., 0]),
        g=lambda x: cg(x[..., 0]),
    )
    cs = build_additive(1, funcs, **kw)
    return cs.replace(meta={**cs.meta, "expressions": {"b": b, "sigma": sigma, "f": f, "g": g}})


def scalar_phi_from_expressions(b0: str, sigma0: str, f0: str, phi: str, g: str = "0",
                                kappa: float = 1.0, **kw) -> CoefficientSet:
    cb = compile_expression(b0, ("t", "x"))
    cs_ = compile_expression(sigma0, ("t", "x"))
    cf = compile_expression(f0, ("t", "x", "y", "z"))
    cp = compile_expression(phi, ("t", "u", "v"))
    cg = compile_expression(g, ("x",))
    cs = build_scalar_phi(cb, cs_, cf, cp, kappa, **kw)
    return cs.replace(g=lambda x: cg(x[..., 0]),
                      meta={**cs.meta, "expressions": {"b0": b0, "sigma0": sigma0, "f0": f0,
                                                       "phi": phi, "g": g}})


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

MODEL_REGISTRY: dict[str, Callable[..., CoefficientSet]] = {}


def register_model(name: str):
    """Decorator registering a ``factory(**params) -> CoefficientSet``."""

    def deco(factory):
        MODEL_REGISTRY[name] = factory
        return factory

    return deco


register_model("additive")(additive_from_expressions)
register_model("scalar_phi")(scalar_phi_from_expressions)


def build_model(key: str, **params) -> CoefficientSet:
    from . import games  # noqa: F401  (registers the shipped games)

    if key not in MODEL_REGISTRY:
        raise KeyError(key)
    return MODEL_REGISTRY[key](**params)
