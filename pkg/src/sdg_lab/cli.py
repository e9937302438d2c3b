"""Batch driver: ``sdg-lab run <config.json>`` and ``sdg-lab validate <config.json>``.

Exit codes: 0 when the task's checks pass, 2 when a check fails, 1 on any
error (including an invalid config).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bsde_engine import evaluate_payoff
from .controls import ControlPath
from .dpp_harness import DppReport, check_dpp_w1, check_dpp_w2, estimate_value_grid
from .errors import ConfigInvalid, KindMismatch, SdgLabError
from .game_values import ValueEstimate, ValueRow, bounds_check, estimate_w1, estimate_w2, values_to_csv
from .games import GAMES, build_classes, build_game
from .hamiltonians import KINDS, EnvelopeResult, HamPoint, all_envelopes
from .isaacs_pde import PdeGrid, PdeSpec, cross_validate, solve_pde
from .mc_paths import TimeGrid, generate
from .model import MODEL_REGISTRY, build_model, validate_coefficients

TASKS = ("validate", "bsde", "value", "dpp", "hamiltonian", "pde", "crossval")
PLOT_KINDS = ("value_vs_x", "envelope_vs_n", "pde_surface", "dpp_bracket")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def config_hash(raw: bytes) -> str:
    """Git blob hash of the config bytes."""
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    digest: str
    seed: int
    seed_source: str
    grid: TimeGrid
    m_paths: int
    task: dict
    output: dict
    model: dict
    classes: dict | str


def _require(block: dict, key: str, path: str, kind=None):
    if not isinstance(block, dict) or key not in block:
        raise ConfigInvalid(f"{path}.{key}", "missing")
    value = block[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigInvalid(f"{path}.{key}", f"expected {kind}, got {type(value).__name__}")
    return value


def _number(block, key, path, default=None, low=None, high=None, open_low=False, open_high=False):
    if key not in block:
        if default is None:
            raise ConfigInvalid(f"{path}.{key}", "missing")
        return default
    value = block[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigInvalid(f"{path}.{key}", f"expected a finite number, got {value!r}")
    if low is not None and (value <= low if open_low else value < low):
        raise ConfigInvalid(f"{path}.{key}", f"{value} is below the allowed range")
    if high is not None and (value >= high if open_high else value > high):
        raise ConfigInvalid(f"{path}.{key}", f"{value} is above the allowed range")
    return value


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and range-check a config file.

    Raises:
        ConfigInvalid: with the dotted path of the offending field.
    """
    raw_bytes = Path(path).read_bytes()
    try:
        raw = json.loads(raw_bytes)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("<root>", f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("<root>", "config must be a JSON object")
    model = _require(raw, "model", "config", dict)
    key = _require(model, "key", "model", str)
    from . import games  # noqa: F401  (fills the registry)

    if key not in MODEL_REGISTRY:
        raise ConfigInvalid("model.key", f"unknown model {key!r}; known: {sorted(MODEL_REGISTRY)}")
    if "params" in model and not isinstance(model["params"], dict):
        raise ConfigInvalid("model.params", "expected an object")
    for name in ("gamma", "kappa"):
        if name in model:
            _number(model, name, "model", low=0, open_low=True)
    if "p" in model:
        _number(model, "p", "model", low=1, high=2, open_low=True)

    grid_block = _require(raw, "grid", "config", dict)
    t0 = _number(grid_block, "t0", "grid", default=0.0, low=0)
    T = _number(grid_block, "T", "grid", default=1.0, low=t0, open_low=True)
    n_steps = _require(grid_block, "n_steps", "grid", int)
    if n_steps < 1:
        raise ConfigInvalid("grid.n_steps", "must be positive")
    m_paths = _require(grid_block, "m_paths", "grid", int)
    if m_paths < 2:
        raise ConfigInvalid("grid.m_paths", "must be at least 2")
    seed = _require(grid_block, "seed", "grid", int)
    seed_source = "config"
    env_seed = os.environ.get("SDG_LAB_SEED")
    if env_seed:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigInvalid("env.SDG_LAB_SEED", f"not an integer: {env_seed!r}") from exc
        seed_source = "env"

    task = _require(raw, "task", "config", dict)
    kind = _require(task, "type", "task", str)
    if kind not in TASKS:
        raise ConfigInvalid("task.type", f"unknown task {kind!r}; known: {list(TASKS)}")
    span = T - t0
    if kind == "dpp":
        _number(task, "delta", "task", low=0, high=span, open_low=True, open_high=True)
        _number(task, "epsilon", "task", low=0, open_low=True)
    if "which" in task and task["which"] not in ("w1", "w2"):
        raise ConfigInvalid("task.which", "must be 'w1' or 'w2'")
    if kind == "hamiltonian":
        which = task.get("envelopes", list(KINDS))
        if not set(which) <= set(KINDS):
            raise ConfigInvalid("task.envelopes", f"allowed {list(KINDS)}")
        n_max = task.get("n_max", 8)
        if not isinstance(n_max, int) or n_max < 1:
            raise ConfigInvalid("task.n_max", "must be a positive integer")
    if kind in ("pde", "crossval"):
        pde = _require(task, "pde", "task", dict)
        for name in ("x_min", "x_max"):
            _number(pde, name, "task.pde")
        n_x = _require(pde, "n_x", "task.pde", int)
        if n_x < 3:
            raise ConfigInvalid("task.pde.n_x", "need at least 3 nodes")
        if pde["x_max"] <= pde["x_min"]:
            raise ConfigInvalid("task.pde.x_max", "must exceed x_min")

    classes = raw.get("classes", "default")
    if classes != "default" and not isinstance(classes, dict):
        raise ConfigInvalid("classes", "expected 'default' or an object")
    if classes == "default" and key not in GAMES and kind in ("value", "dpp", "crossval"):
        raise ConfigInvalid("classes", f"model {key!r} has no default classes")
    output = raw.get("output", {})
    if not isinstance(output, dict):
        raise ConfigInvalid("output", "expected an object")
    return ExperimentConfig(raw, config_hash(raw_bytes), seed, seed_source, TimeGrid(t0, T, n_steps),
                            m_paths, task, output, model, classes)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _meta(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "seed_source": cfg.seed_source, "config_sha1": cfg.digest,
            "tool_version": __version__}


def header_line(meta: dict) -> str:
    return "# " + ",".join(f"{k}={meta[k]}" for k in sorted(meta))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header: str | None, columns, rows) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def emit_plotdata(result, kind: str, header: str | None = None) -> str:
    """CSV text for one plot kind; the column order is fixed per kind.

    Raises:
        KindMismatch: ``result`` is not the kind of object ``kind`` plots.
    """
    if kind not in PLOT_KINDS:
        raise KindMismatch(f"unknown plot kind {kind!r}")
    if kind == "value_vs_x":
        items = list(result) if isinstance(result, (list, tuple)) else None
        if not items or not all(isinstance(r, (ValueEstimate, ValueRow)) for r in items):
            raise KindMismatch("value_vs_x needs a list of value estimates")
        rows = []
        for r in items:
            est = r.w1 if isinstance(r, ValueRow) else r
            rows.append((" ".join(repr(float(v)) for v in est.x), est.value, est.std_err, est.which))
        return _csv(header, ("x", "value", "std_err", "which"), rows)
    if kind == "envelope_vs_n":
        if isinstance(result, EnvelopeResult):
            return _csv(header, ("n", result.which),
                        [(n + 1, v) for n, v in enumerate(result.levels)])
        if isinstance(result, dict) and result and all(
                isinstance(result.get(k), EnvelopeResult) for k in KINDS if k in result):
            present = [k for k in KINDS if k in result]
            if not present:
                raise KindMismatch("envelope_vs_n needs envelope results")
            n_max = result[present[0]].n_max
            rows = [(n + 1, *(result[k].levels[n] for k in present)) for n in range(n_max)]
            return _csv(header, ("n", *present), rows)
        raise KindMismatch("envelope_vs_n needs envelope results")
    if kind == "pde_surface":
        if not isinstance(result, PdeGrid):
            raise KindMismatch("pde_surface needs a PDE solution")
        return result.to_csv(header)
    if not isinstance(result, DppReport):
        raise KindMismatch("dpp_bracket needs a DPP report")
    rows = [(p.strategy, p.control, p.lower, p.upper, p.lower_half, p.upper_half, p.std_err)
            for p in result.per_pair]
    return _csv(header, ("strategy", "control", "lower", "upper", "lower_half_eps",
                         "upper_half_eps", "std_err"), rows)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


@dataclass
class TaskOutcome:
    passed: bool
    summary: str
    files: dict  # name -> text


def _build_cs(cfg: ExperimentConfig):
    model = cfg.model
    key = model["key"]
    params = dict(model.get("params", {}))
    game = None
    try:
        if key in GAMES:
            game = build_game(key, **params)
            cs = game.cs
        else:
            cs = build_model(key, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid("model.params", str(exc)) from exc
    changes = {name: model[name] for name in ("gamma", "kappa", "p") if name in model}
    if changes:
        cs = cs.replace(**changes)
    return cs, game


def _classes(cfg: ExperimentConfig, cs, game, which: str):
    if cfg.classes == "default":
        return game.classes(cfg.grid, which)
    block = cfg.classes.get(which)
    if not isinstance(block, dict):
        raise ConfigInvalid(f"classes.{which}", "missing")
    try:
        return build_classes(cs, cfg.grid, which, block.get("strategies", []), block.get("controls", []))
    except (KeyError, ValueError) as exc:
        raise ConfigInvalid(f"classes.{which}", str(exc)) from exc


def _points(task) -> list:
    pts = task.get("points", [task.get("x", 0.0)])
    return [np.atleast_1d(np.asarray(p, float)) for p in pts]


def _control_grid(task, key, default):
    spec = task.get(key)
    if spec is None:
        return default
    if isinstance(spec, dict):
        return np.linspace(spec["min"], spec["max"], spec["n"])
    return np.asarray(spec, float)


def task_validate(cfg, cs, game, threads) -> TaskOutcome:
    report = validate_coefficients(cs)
    body = {"report": report.to_dict(), "meta": _meta(cfg), "model": cs.name}
    return TaskOutcome(report.passed, f"validate: {'PASS' if report.passed else 'FAIL'} "
                       f"({len(report.entries)} checks)", {"validate.json": dumps(body)})


def task_bsde(cfg, cs, game, threads) -> TaskOutcome:
    task = cfg.task
    x = np.atleast_1d(np.asarray(task.get("x", 0.0), float))
    t0 = float(task.get("t0", cfg.grid.t0))
    bundle = generate(cfg.grid, cs.d, cfg.m_paths, cfg.seed)
    mu = ControlPath.constant(cfg.grid, cfg.m_paths, task.get("u", cs.u_space.base_point), cs.u_space)
    nu = ControlPath.constant(cfg.grid, cfg.m_paths, task.get("v", cs.v_space.base_point), cs.v_space)
    est = evaluate_payoff(cs, t0, x, mu, nu, bundle)
    passed = True
    if "expected" in task:
        passed = abs(est.value - task["expected"]) <= 4 * est.std_err + float(task.get("abs_tol", 0.0))
    body = {"y0": est.value, "std_err": est.std_err, "basis": est.solution.basis_spec,
            "ridge_events": list(est.solution.ridge_events), "pass": passed, "meta": _meta(cfg)}
    return TaskOutcome(passed, f"bsde: Y0={est.value:.6g} +/- {est.std_err:.2g}",
                       {"bsde.json": dumps(body)})


def task_value(cfg, cs, game, threads) -> TaskOutcome:
    task = cfg.task
    t0 = float(task.get("t0", cfg.grid.t0))
    bundle = generate(cfg.grid, cs.d, cfg.m_paths, cfg.seed)
    s1, c1 = _classes(cfg, cs, game, "w1")
    s2, c2 = _classes(cfg, cs, game, "w2")
    rows, w1s, w2s = [], [], []
    for x in _points(task):
        e1 = estimate_w1(cs, t0, x, s1, c1, bundle, threads)
        e2 = estimate_w2(cs, t0, x, s2, c2, bundle, threads)
        rows.append(ValueRow(e1, e2))
        w1s.append(e1)
        w2s.append(e2)
    header = header_line(_meta(cfg))
    files = {"values.csv": values_to_csv(rows, header),
             "value_vs_x.csv": emit_plotdata(w1s, "value_vs_x", header)}
    passed = True
    summary = f"value: {len(rows)} points"
    radii = {float(np.linalg.norm(e.x)) for e in w1s}
    if len(radii) >= 3:
        report = bounds_check(w1s, cs, w2s)
        passed = report.passed
        files["bounds.json"] = dumps({"c_kappa": report.c_kappa, "c0": report.c0,
                                      "radii": report.radii, "sizes": report.sizes,
                                      "pass": report.passed, "meta": _meta(cfg)})
        summary += f", bounds {'PASS' if passed else 'FAIL'}"
    return TaskOutcome(passed, summary, files)


def task_dpp(cfg, cs, game, threads) -> TaskOutcome:
    task = cfg.task
    which = task.get("which", "w1")
    t0 = float(task.get("t0", cfg.grid.t0))
    x = np.atleast_1d(np.asarray(task.get("x", 0.0), float))
    delta, eps = float(task["delta"]), float(task["epsilon"])
    strategies, controls = _classes(cfg, cs, game, which)
    vg_spec = task.get("value_grid", {})
    grid = cfg.grid
    s = grid.index_of(t0)
    stride = int(vg_spec.get("time_stride", 6))
    last = min(grid.n_steps, s + math.ceil((delta + grid.dt) / grid.dt / stride) * stride)
    times = grid.times[np.arange(s, last + 1, stride)]
    if times[-1] < grid.times[last]:
        times = np.append(times, grid.times[last])
    half = float(vg_spec.get("x_halfwidth", 1.2))
    n_x = int(vg_spec.get("n_x", 13))
    axes = [np.linspace(xi - half, xi + half, n_x) for xi in x]
    m_grid = int(vg_spec.get("m_paths", min(cfg.m_paths, 20000)))
    vg = estimate_value_grid(cs, which, strategies, controls, grid, m_grid, cfg.seed + 1, times, axes, threads)
    bundle = generate(grid, cs.d, cfg.m_paths, cfg.seed)
    check = check_dpp_w1 if which == "w1" else check_dpp_w2
    report = check(cs, t0, x, delta, strategies, controls, vg, eps, bundle, threads)
    body = report.to_dict()
    body["meta"] = {**body["meta"], **_meta(cfg)}
    header = header_line(_meta(cfg))
    return TaskOutcome(report.passed,
                       f"dpp[{which}]: {report.lower:.4g} <= {report.w_hat:.4g} <= {report.upper:.4g} "
                       f"(tol {report.tol_mc:.2g}) {'PASS' if report.passed else 'FAIL'}",
                       {"dpp.json": dumps(body), "dpp_bracket.csv": emit_plotdata(report, "dpp_bracket", header)})


def task_hamiltonian(cfg, cs, game, threads) -> TaskOutcome:
    task = cfg.task
    pt = task.get("point", {})
    k = cs.k
    xi = HamPoint(float(pt.get("t", cfg.grid.t0)), pt.get("x", [0.0] * k), float(pt.get("y", 0.0)),
                  pt.get("z", [0.0] * k), pt.get("Gamma", np.zeros((k, k)).tolist()))
    default = game.u_grid if game is not None else np.linspace(-1, 1, 21)
    u_grid = _control_grid(task, "u_grid", default)
    v_grid = _control_grid(task, "v_grid", default if game is None else game.v_grid)
    env = all_envelopes(cs, xi, u_grid, v_grid, n_max=int(task.get("n_max", 8)),
                        n_dirs=int(task.get("n_dirs", 128)), seed=cfg.seed)
    body = {name: {"levels": env[name].levels, "limit": env[name].limit} for name in KINDS}
    body["modulus"] = env["modulus"]
    body["meta"] = _meta(cfg)
    header = header_line(_meta(cfg))
    return TaskOutcome(True, "hamiltonian: " + ", ".join(f"{n}={env[n].limit:.4g}" for n in KINDS),
                       {"hamiltonian.json": dumps(body),
                        "envelope_vs_n.csv": emit_plotdata(env, "envelope_vs_n", header)})


def _pde_spec(cfg, task) -> PdeSpec:
    p = task["pde"]
    return PdeSpec(float(p["x_min"]), float(p["x_max"]), int(p["n_x"]), cfg.grid.t0, cfg.grid.T,
                   p.get("n_t"))


def _pde_grids(task, cs, game):
    default = game.u_grid if game is not None else np.zeros(1)
    return (_control_grid(task, "u_grid", default),
            _control_grid(task, "v_grid", game.v_grid if game is not None else np.zeros(1)))


def task_pde(cfg, cs, game, threads) -> TaskOutcome:
    task = cfg.task
    which = task.get("hamiltonian", "supinf")
    spec = _pde_spec(cfg, task)
    u_grid, v_grid = _pde_grids(task, cs, game)
    pde = solve_pde(cs, spec, which, u_grid, v_grid)
    body = {"dx": pde.dx, "dt": pde.dt, "n_t": len(pde.times) - 1, "theta": pde.theta,
            "cfl_limit": pde.cfl_limit, "hamiltonian": which, "meta": _meta(cfg)}
    passed = True
    if game is not None and game.exact is not None and task.get("compare_exact", True):
        err = float(np.max(np.abs(pde.solution - game.exact(pde.times[:, None], pde.xs[None, :]))))
        body["max_error"] = err
        tol = task.get("max_error")
        if tol is not None:
            passed = err <= tol
    header = header_line(_meta(cfg))
    return TaskOutcome(passed, f"pde: {spec.n_x} x {len(pde.times)} nodes, dt={pde.dt:.3g}",
                       {"pde.json": dumps(body), "pde_surface.csv": emit_plotdata(pde, "pde_surface", header)})


def task_crossval(cfg, cs, game, threads) -> TaskOutcome:
    task = cfg.task
    which = task.get("which", "w1")
    t0 = float(task.get("t0", cfg.grid.t0))
    x = float(task.get("x", 0.0))
    strategies, controls = _classes(cfg, cs, game, which)
    spec = _pde_spec(cfg, task)
    u_grid, v_grid = _pde_grids(task, cs, game)
    bundle = generate(cfg.grid, cs.d, cfg.m_paths, cfg.seed)
    cv = cross_validate(cs, (t0, x), strategies, controls, bundle, spec, u_grid, v_grid, which, threads)
    body = {**cv.to_dict(), "meta": _meta(cfg)}
    return TaskOutcome(cv.passed, f"crossval[{which}]: mc={cv.mc_value:.5g} pde={cv.pde_value:.5g} "
                       f"gap={cv.gap:.3g} tol={cv.tol:.3g} {'PASS' if cv.passed else 'FAIL'}",
                       {"crossval.json": dumps(body)})


TASK_RUNNERS = {
    "validate": task_validate,
    "bsde": task_bsde,
    "value": task_value,
    "dpp": task_dpp,
    "hamiltonian": task_hamiltonian,
    "pde": task_pde,
    "crossval": task_crossval,
}


def run(config_path: str | Path, out_dir: str | Path | None = None, threads: int | None = None) -> int:
    """Run one task; returns the process exit code."""
    try:
        cfg = load_config(config_path)
        cs, game = _build_cs(cfg)
        outcome = TASK_RUNNERS[cfg.task["type"]](cfg, cs, game, threads)
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 1
    except (SdgLabError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    target = Path(out_dir or cfg.output.get("dir", "sdg_lab_out"))
    for name, text in sorted(outcome.files.items()):
        write_atomic(target / name, text)
    print(outcome.summary)
    return 0 if outcome.passed else 2


def check_config(config_path: str | Path) -> int:
    try:
        cfg = load_config(config_path)
        _build_cs(cfg)
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 1
    except (SdgLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"config ok: task={cfg.task['type']} model={cfg.model['key']} sha1={cfg.digest}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sdg-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the task in a config file")
    p_run.add_argument("config")
    p_run.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p_run.add_argument("--out", default=None, help="output directory")
    p_val = sub.add_parser("validate", help="check a config file without running it")
    p_val.add_argument("config")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, args.out, args.threads)
    return check_config(args.config)


if __name__ == "__main__":
    sys.exit(main())
