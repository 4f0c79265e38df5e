"""Command-line front end.

    roughvisc run --config exp.json --out results/ [--seed N] [--threads N]
    roughvisc run --preset twisted-sincos --out results/
    roughvisc validate --config exp.json

Exit codes: 0 ok, 2 config error, 3 numerical abort, 4 assertion failure.
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import json
import math
import os
import sys
import time
from typing import Optional

import jsonschema
import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ASSERT = 0, 2, 3, 4
STAGES = ("roughpath", "flow", "operators", "pdesolve", "rpde")
COMMANDS = ("solve", "wongzakai", "contraction", "twisted", "flowcheck", "opcheck")


class ConfigError(Exception):
    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


class NumericalAbort(Exception):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name):
    """Tag any numerical failure raised inside with the pipeline stage."""
    try:
        yield
    except (ConfigError, NumericalAbort):
        raise
    except (ArithmeticError, ValueError, RuntimeError, NotImplementedError, np.linalg.LinAlgError) as exc:
        raise NumericalAbort(name, f"{type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------- schema

_NUM = {"type": "number"}
_COEF = {"oneOf": [_NUM, {"type": "array", "items": _NUM},
                   {"type": "array", "items": {"type": "array", "items": _NUM}}]}
_CONTROL = {"type": "object", "properties": {"sigma": _COEF, "b": _COEF},
            "required": ["sigma", "b"], "additionalProperties": False}

SCHEMA = {
    "type": "object",
    "required": ["command"],
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "preset": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "grid": {"type": "object", "additionalProperties": False, "required": ["n", "L", "h"],
                 "properties": {"n": {"enum": [1, 2]}, "L": {"type": "number", "exclusiveMinimum": 0},
                                "h": {"type": "number", "exclusiveMinimum": 0}}},
        "operator": {
            "type": "object", "required": ["kind"], "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["linear", "quasilinear", "hjb", "isaacs", "custom"]},
                "sigma": _COEF, "b": _COEF, "modulation": _NUM, "lam": _NUM,
                "controls": {"type": "array", "items": _CONTROL, "minItems": 1},
                "table": {"type": "array", "minItems": 1,
                          "items": {"type": "array", "items": _CONTROL, "minItems": 1}},
            }},
        "fields": {"type": "object", "required": ["name"], "additionalProperties": False,
                   "properties": {"name": {"type": "string"}, "params": {"type": "object"}}},
        "driver": {"type": "object", "required": ["kind"], "additionalProperties": False,
                   "properties": {
                       "kind": {"enum": ["identity", "brownian", "smooth", "pure-area", "file"]},
                       "level": {"type": "integer", "minimum": 0, "maximum": 16},
                       "path": {"type": "string"}, "amplitude": _NUM, "frequency": _NUM,
                       "drift": _NUM, "samples": {"type": "integer", "minimum": 2},
                       "rate": _NUM, "axes": {"type": "array", "items": {"type": "integer"},
                                               "minItems": 2, "maxItems": 2}}},
        "initial": {"type": "object", "required": ["name"], "additionalProperties": False,
                    "properties": {"name": {"enum": ["gaussian", "hat", "step-smooth"]},
                                   "variance": _NUM, "width": _NUM, "center": _COEF,
                                   "amplitude": _NUM}},
        "levels": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 14},
                   "minItems": 1},
        "fine_level": {"type": "integer", "minimum": 0, "maximum": 16},
        "seeds": {"type": "integer", "minimum": 1},
        "pairs": {"type": "integer", "minimum": 1},
        "alpha": {"type": "array", "items": {"type": "integer", "minimum": 1},
                  "minItems": 2, "maxItems": 2},
        "loop_points": {"type": "integer", "minimum": 8},
        "samples": {"type": "integer", "minimum": 1},
        "oracle": {"enum": ["transport", "heat-shift", "oscillatory-circle", "none"]},
        "tolerance": _NUM,
        "out_slices": {"type": "integer", "minimum": 1},
    },
}

PRESETS = {
    "transport": {
        "command": "solve", "T": 0.5, "grid": {"n": 1, "L": 4.0, "h": 0.01},
        "operator": {"kind": "linear", "sigma": 0.0, "b": 0.0},
        "fields": {"name": "constant", "params": {"vectors": [[1.0]]}},
        "driver": {"kind": "smooth", "amplitude": 0.8, "frequency": 1.0, "drift": 0.537, "samples": 257},
        "initial": {"name": "gaussian", "variance": 0.1}, "oracle": "transport", "tolerance": 5e-3,
    },
    "heat-shift": {
        "command": "solve", "T": 0.25, "grid": {"n": 1, "L": 4.0, "h": 0.02},
        "operator": {"kind": "linear", "sigma": 1.0, "b": 0.0},
        "fields": {"name": "constant", "params": {"vectors": [[1.0]]}},
        "driver": {"kind": "smooth", "amplitude": 0.7, "frequency": 1.0, "drift": 1.0, "samples": 65},
        "initial": {"name": "gaussian", "variance": 0.25}, "oracle": "heat-shift", "tolerance": 5e-3,
    },
    "oscillatory-circle": {
        "command": "flowcheck", "T": 1.0,
        "fields": {"name": "sin-cos"},
        "driver": {"kind": "pure-area", "rate": math.pi, "samples": 65, "axes": [0, 1]},
        "oracle": "oscillatory-circle", "tolerance": 0.02,
    },
    "twisted-sincos": {
        "command": "twisted", "T": 1.0, "seed": 1, "grid": {"n": 1, "L": 4.0, "h": 0.04},
        "operator": {"kind": "linear", "sigma": 0.0, "b": 0.0},
        "fields": {"name": "sin-cos"}, "initial": {"name": "hat", "width": 1.5},
        "levels": [4, 5, 6, 7, 8], "alpha": [1, 2], "loop_points": 32,
    },
    "hjb-two-controls": {
        "command": "contraction", "T": 0.5, "seed": 0, "grid": {"n": 1, "L": 4.0, "h": 0.04},
        "operator": {"kind": "hjb", "controls": [{"sigma": 0.5, "b": 1.0}, {"sigma": 0.2, "b": -1.0}],
                     "modulation": 0.3},
        "fields": {"name": "sin-cos"}, "driver": {"kind": "brownian", "level": 6},
        "initial": {"name": "hat", "width": 1.5}, "pairs": 10,
    },
}


def load_config(path=None, preset=None, text=None) -> dict:
    """Parse, merge onto a preset and validate; raises :class:`ConfigError`."""
    raw = {}
    if path is not None or text is not None:
        if text is None:
            try:
                with open(path) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError([f"cannot read config: {exc}"])
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"line {exc.lineno} column {exc.colno}: {exc.msg}"])
        if not isinstance(raw, dict):
            raise ConfigError(["top level must be a JSON object"])
    name = preset or raw.get("preset")
    if name is not None:
        if name not in PRESETS:
            raise ConfigError([f"preset: unknown preset {name!r} (known: {', '.join(PRESETS)})"])
        cfg = copy.deepcopy(PRESETS[name])
        for k, v in raw.items():
            cfg[k] = v
        cfg["preset"] = name
    else:
        cfg = raw
    diags = validate_config(cfg)
    if diags:
        raise ConfigError(diags)
    return cfg


def validate_config(cfg: dict) -> list:
    """Schema plus cross-reference diagnostics; empty list means valid."""
    diags = []
    validator = jsonschema.Draft202012Validator(SCHEMA)
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        diags.append(f"{where}: {err.message}")
    if diags:
        return diags
    from .vecfield import FIELD_LIBRARY
    cmd = cfg["command"]
    needs = {"solve": ("grid", "operator", "fields", "driver", "initial"),
             "wongzakai": ("grid", "operator", "fields", "initial", "levels"),
             "contraction": ("grid", "operator", "fields", "driver", "initial"),
             "twisted": ("grid", "operator", "fields", "initial", "levels"),
             "flowcheck": ("fields", "driver"),
             "opcheck": ("operator",)}[cmd]
    for key in needs:
        if key not in cfg:
            diags.append(f"{key}: required by command {cmd!r}")
    if "fields" in cfg and cfg["fields"]["name"] not in FIELD_LIBRARY:
        diags.append(f"fields.name: unknown field library {cfg['fields']['name']!r}")
    if diags:
        return diags
    op = cfg.get("operator")
    if op:
        if op["kind"] == "custom":
            diags.append("operator.kind: custom operators need code and cannot be built from a config")
        if op["kind"] == "hjb" and "controls" not in op:
            diags.append("operator.controls: hjb operators need a control list")
        if op["kind"] == "isaacs" and "table" not in op:
            diags.append("operator.table: isaacs operators need a control table")
    try:
        fn = _field_dims(cfg["fields"]) if "fields" in cfg else None
    except (KeyError, ValueError) as exc:
        return diags + [f"fields.params: {exc}"]
    gn = cfg.get("grid", {}).get("n")
    if fn is not None and gn is not None and fn[0] != gn:
        diags.append(f"grid.n: grid dimension {gn} does not match field dimension {fn[0]}")
    if op and gn is not None:
        for where, val in _coefficients(op):
            bad = _coef_dim_error(val, gn, where.endswith("sigma"))
            if bad:
                diags.append(f"{where}: {bad}")
    drv = cfg.get("driver", {})
    if drv.get("kind") == "pure-area" and fn is not None and fn[1] < 2:
        diags.append("driver.kind: pure-area drivers need at least two vector fields")
    if cmd == "twisted" and fn is not None:
        a = cfg.get("alpha", [1, 2])
        if fn[1] < 2 or a[0] == a[1] or max(a) > fn[1]:
            diags.append("alpha: needs two distinct field indices within the field set")
    if "levels" in cfg and cfg["levels"] != sorted(set(cfg["levels"])):
        diags.append("levels: must be strictly increasing")
    if "grid" in cfg:
        g = cfg["grid"]
        m = 2 * g["L"] / g["h"]
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            diags.append("grid.h: 2L/h must be an integer")
    return diags


def _field_dims(spec):
    from .vecfield import named_fields
    V = named_fields(spec["name"], **spec.get("params", {}))
    return V.n, V.d


def _coefficients(op):
    for k in ("sigma", "b"):
        if k in op:
            yield f"operator.{k}", op[k]
    for q, c in enumerate(op.get("controls", [])):
        yield f"operator.controls.{q}.sigma", c["sigma"]
        yield f"operator.controls.{q}.b", c["b"]
    for r, row in enumerate(op.get("table", [])):
        for q, c in enumerate(row):
            yield f"operator.table.{r}.{q}.sigma", c["sigma"]
            yield f"operator.table.{r}.{q}.b", c["b"]


def _coef_dim_error(val, n, matrix):
    a = np.asarray(val, dtype=float)
    if a.ndim == 0:
        return None
    if matrix and a.shape != (n, n):
        return f"expected a scalar or a {n}x{n} matrix, got shape {a.shape}"
    if not matrix and a.shape != (n,):
        return f"expected a scalar or a length-{n} vector, got shape {a.shape}"
    return None


# ---------------------------------------------------------------- builders

def _sigma_matrix(val, n):
    a = np.asarray(val, dtype=float)
    return a * np.eye(n) if a.ndim == 0 else a


def _b_vector(val, n):
    a = np.asarray(val, dtype=float)
    return np.full(n, float(a)) if a.ndim == 0 else a


def _modulate(x, eps):
    return 1.0 + eps * np.sin(x[:, 0])


def build_operator(spec: dict, n: int):
    from .operators import Operator, hjb_operator, isaacs_operator, quasilinear_example, zero_operator
    eps = float(spec.get("modulation", 0.0))
    kind = spec["kind"]
    if kind == "linear":
        s = _sigma_matrix(spec.get("sigma", 0.0), n)
        b = _b_vector(spec.get("b", 0.0), n)
        if not s.any() and not b.any():
            return zero_operator(n)
        return Operator("linear", n,
                        lambda t, x: _modulate(x, eps)[:, None, None] * s,
                        lambda t, x: np.broadcast_to(b, x.shape).copy(), name="linear")
    if kind == "quasilinear":
        return quasilinear_example(n, float(spec.get("lam", 1.0)), _b_vector(spec.get("b", 0.0), n))
    if kind == "hjb":
        ctrl = [(_sigma_matrix(c["sigma"], n), _b_vector(c["b"], n)) for c in spec["controls"]]
        return hjb_operator(n, lambda t, x, g: _modulate(x, eps)[:, None, None] * g[0],
                            lambda t, x, g: np.broadcast_to(g[1], x.shape).copy(), ctrl)
    if kind == "isaacs":
        table = [[(_sigma_matrix(c["sigma"], n), _b_vector(c["b"], n)) for c in row] for row in spec["table"]]
        inner = list(range(len(table[0])))
        return isaacs_operator(
            n, lambda t, x, be, g: _modulate(x, eps)[:, None, None] * table[be][g][0],
            lambda t, x, be, g: np.broadcast_to(table[be][g][1], x.shape).copy(),
            list(range(len(table))), inner)
    raise ConfigError([f"operator.kind: {kind!r} cannot be built from a config"])


def build_fields(spec):
    from .vecfield import named_fields
    return named_fields(spec["name"], **spec.get("params", {}))


def build_initial(spec, grid):
    from .pdesolve import Field, hat
    amp = float(spec.get("amplitude", 1.0))
    c = _b_vector(spec.get("center", 0.0), grid.n)
    name = spec["name"]
    if name == "gaussian":
        var = float(spec.get("variance", 0.25))
        fn = lambda x: amp * np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * var))  # noqa: E731
    elif name == "hat":
        w = float(spec.get("width", 1.0))
        fn = lambda x: amp * hat(x - c, w)  # noqa: E731
    else:
        w = float(spec.get("width", 1.0))
        fn = lambda x: amp * 0.5 * (1 + np.tanh(np.sum(x - c, axis=1) / w))  # noqa: E731
    return Field.initial(grid, fn, bound=abs(amp) * (1 + 1e-9))


def smooth_path(spec, d, T):
    """Samples of ``z_t = A sin(2 pi f t / T + phase_i) - A sin(phase_i) + drift t`` per channel."""
    m = int(spec.get("samples", 65))
    A = float(spec.get("amplitude", 0.5))
    f = float(spec.get("frequency", 1.0))
    drift = float(spec.get("drift", 0.0))
    ts = np.linspace(0.0, T, m)
    phase = np.arange(d) * np.pi / 2
    z = A * (np.sin(2 * np.pi * f * ts[:, None] / T + phase) - np.sin(phase)) + drift * ts[:, None]
    return ts, z


def build_driver(spec, d, T, seed):
    from .roughpath import (MeshSpec, RoughDriver, identity_driver, lift_smooth, pure_area_driver,
                            sample_brownian)
    kind = spec["kind"]
    if kind == "identity":
        return identity_driver(d, T, 2 ** int(spec.get("level", 0)))
    if kind == "brownian":
        return sample_brownian(seed, d, MeshSpec(T=T, k=int(spec.get("level", 8))))
    if kind == "smooth":
        return lift_smooth(*smooth_path(spec, d, T))
    if kind == "pure-area":
        i, j = spec.get("axes", [0, 1])
        return pure_area_driver(T, int(spec.get("samples", 65)) - 1, d, i, j, float(spec.get("rate", math.pi)))
    with open(spec["path"]) as fh:
        return RoughDriver.from_json(fh.read())


def build_grid(cfg):
    from .pdesolve import Grid
    g = cfg["grid"]
    return Grid(int(g["n"]), float(g["L"]), float(g["h"]), float(cfg.get("T", 1.0)))


def _out_times(cfg):
    k = int(cfg.get("out_slices", 4))
    T = float(cfg.get("T", 1.0))
    return list(T * np.arange(1, k + 1) / k)


# ---------------------------------------------------------------- commands

def _assertion(name, value, threshold, passed):
    return {"name": name, "value": value, "threshold": threshold, "passed": bool(passed)}


def cmd_solve(cfg, out):
    from .pdesolve import atomic_write
    from .rpde import RPDEProblem, solve_rpde
    T = float(cfg.get("T", 1.0))
    with stage("pdesolve"):
        grid = build_grid(cfg)
    with stage("roughpath"):
        V = build_fields(cfg["fields"])
        drv = build_driver(cfg["driver"], V.d, T, cfg.get("seed", 0))
    with stage("operators"):
        F = build_operator(cfg["operator"], grid.n)
        u0 = build_initial(cfg["initial"], grid)
    with stage("rpde"):
        u = solve_rpde(RPDEProblem(F, V, drv, u0, _out_times(cfg)))
    u.to_csv(os.path.join(out, "u.csv"))
    checks = []
    oracle = cfg.get("oracle", "none")
    if oracle in ("transport", "heat-shift"):
        err = float(np.max(np.abs(u.final - oracle_solution(cfg, grid, drv))))
        tol = float(cfg.get("tolerance", 5e-3))
        checks.append(_assertion(f"{oracle} sup error", err, tol, err <= tol))
    atomic_write(os.path.join(out, "driver.json"), drv.to_json())
    return {"sup_norm": float(np.max(u.sup_norms())), "exit_fraction": u.meta.get("exit_fraction", 0.0),
            "steps": u.meta.get("v_steps", 0)}, checks


def oracle_solution(cfg, grid, drv):
    """Closed forms at ``T``: transport ``u0(x - z_T)`` and heat-kernel smoothing followed by the shift."""
    x = grid.nodes
    z = drv.level1[-1]
    init = cfg["initial"]
    lam = float(np.asarray(cfg["operator"].get("sigma", 0.0))) ** 2 if cfg.get("oracle") == "heat-shift" else 0.0
    T = drv.T
    if init["name"] != "gaussian":
        if lam:
            raise ConfigError(["oracle: heat-shift oracle needs gaussian initial data"])
        shifted = build_initial(init, grid)
        from .pdesolve import interpolate
        return interpolate(grid, shifted.final, x - z)[0].reshape(grid.shape)
    var = float(init.get("variance", 0.25))
    amp = float(init.get("amplitude", 1.0))
    c = _b_vector(init.get("center", 0.0), grid.n)
    s2 = var + 2 * lam * T
    r2 = np.sum((x - z - c) ** 2, axis=1)
    return (amp * (var / s2) ** (grid.n / 2) * np.exp(-r2 / (2 * s2))).reshape(grid.shape)


def cmd_wongzakai(cfg, out):
    from .pdesolve import atomic_write
    from .rpde import wong_zakai_study
    with stage("pdesolve"):
        grid = build_grid(cfg)
    V = build_fields(cfg["fields"])
    with stage("operators"):
        F = build_operator(cfg["operator"], grid.n)
        u0 = build_initial(cfg["initial"], grid)
    seed0 = int(cfg.get("seed", 0))
    reports = []
    fine = None
    if "driver" in cfg and cfg["driver"]["kind"] != "brownian":
        with stage("roughpath"):
            fine = build_driver(cfg["driver"], V.d, float(cfg.get("T", 1.0)), seed0)
            # refine onto the finest study mesh; exact for chord-lifted samples
            k = max(cfg["levels"])
            mesh = fine.T * np.arange(2 ** k + 1) / 2 ** k
            fine = fine.resample(np.union1d(np.round(fine.times, 14), np.round(mesh, 14)))
    for s in range(int(cfg.get("seeds", 1))):
        with stage("rpde"):
            rep = wong_zakai_study(F, V, u0, seed0 + s, cfg["levels"], T=float(cfg.get("T", 1.0)),
                                   fine_level=cfg.get("fine_level"), fine=fine,
                                   out_times=_out_times(cfg))
        rep.write(out, f"wongzakai_seed{seed0 + s}")
        reports.append(rep)
    dec = float(np.mean([r.summary["strictly_decreasing"] for r in reports]))
    ratio = float(np.median([r.summary["fine_ratio"] for r in reports]))
    atomic_write(os.path.join(out, "wongzakai_summary.csv"), _summary_csv(reports))
    checks = [_assertion("fraction of seeds with strictly decreasing consecutive distances", dec, 0.8, dec >= 0.8),
              _assertion("median finest/coarsest distance to fine solution", ratio, 0.25, ratio < 0.25)]
    if fine is not None:
        zero = max(max(r.column("consecutive")[:-1], default=0.0) for r in reports)
        # identical paths; the flow integrator's tolerance is the floor
        checks = [_assertion("max inter-level distance for a resolved driver", zero, 1e-6, zero <= 1e-6)]
    return {"seeds": len(reports), "decreasing_fraction": dec, "median_fine_ratio": ratio}, checks


def _summary_csv(reports):
    lines = ["seed,level,consecutive,to_fine"]
    for r in reports:
        for row in r.rows:
            lines.append(f"{r.config['seed']},{row['level']},{row['consecutive']!r},{row['to_fine']!r}")
    return "\n".join(lines) + "\n"


def cmd_contraction(cfg, out):
    from .pdesolve import Field, atomic_write
    from .rpde import contraction_check
    T = float(cfg.get("T", 1.0))
    with stage("pdesolve"):
        grid = build_grid(cfg)
    V = build_fields(cfg["fields"])
    with stage("operators"):
        F = build_operator(cfg["operator"], grid.n)
        u0 = build_initial(cfg["initial"], grid)
    seed = int(cfg.get("seed", 0))
    with stage("roughpath"):
        drv = build_driver(cfg["driver"], V.d, T, seed)
    rng = np.random.default_rng(seed)
    rows = []
    for q in range(int(cfg.get("pairs", 10))):
        pert = rng.uniform(-0.5, 0.5, grid.shape) * rng.uniform(0.0, 1.0)
        a = Field(grid, [0.0], (u0.final + rng.uniform(-0.2, 0.2, grid.shape))[None])
        b = Field(grid, [0.0], (a.final + pert)[None])
        with stage("rpde"):
            rep = contraction_check(F, V, drv, a, b, out_times=_out_times(cfg))
        rows.append({"pair": q, "distance": rep.distance, "initial": rep.initial_distance, "passed": rep.passed})
    lines = ["pair,distance,initial,passed"] + [f"{r['pair']},{r['distance']!r},{r['initial']!r},{r['passed']}"
                                                for r in rows]
    atomic_write(os.path.join(out, "contraction.csv"), "\n".join(lines) + "\n")
    ok = all(r["passed"] for r in rows)
    worst = max(r["distance"] - r["initial"] for r in rows)
    return {"pairs": len(rows)}, [_assertion("max sup|u-u^| - sup|u0-u0^|", worst, 1e-10, ok)]


def cmd_twisted(cfg, out):
    from .rpde import twisted_study
    with stage("pdesolve"):
        grid = build_grid(cfg)
    V = build_fields(cfg["fields"])
    with stage("operators"):
        F = build_operator(cfg["operator"], grid.n)
        u0 = build_initial(cfg["initial"], grid)
    i, j = (a - 1 for a in cfg.get("alpha", [1, 2]))
    seed = cfg.get("seed", 0)
    with stage("rpde"):
        rep = twisted_study(F, V, u0, seed, cfg["levels"], i, j, T=float(cfg.get("T", 1.0)),
                            fine_level=cfg.get("fine_level"), loop_points=int(cfg.get("loop_points", 32)),
                            out_times=_out_times(cfg))
    rep.write(out, "twisted")
    r = rep.summary["ratio"]
    return rep.summary, [_assertion("twisted/corrected over twisted/uncorrected at finest level", r, 0.1, r <= 0.1)]


def cmd_flowcheck(cfg, out):
    from .flow import solve_flow_rough, solve_flow_smooth
    from .pdesolve import atomic_write
    T = float(cfg.get("T", 1.0))
    V = build_fields(cfg["fields"])
    with stage("roughpath"):
        drv = build_driver(cfg["driver"], V.d, T, cfg.get("seed", 0))
    with stage("flow"):
        fl = solve_flow_rough(V, drv)
        x0 = np.zeros((1, V.n))
        y = fl.forward(T, x0)[0]
        rt = fl.round_trip_error()
    atomic_write(os.path.join(out, "flow.json"), fl.diagnostics_json())
    summary = {"phi_T(0)": y.tolist(), "round_trip": rt}
    checks = [_assertion("round-trip error", rt, 1e-6, rt <= 1e-6)]
    if cfg.get("oracle") == "oscillatory-circle":
        with stage("flow"):
            osc = oscillatory_oracle(V, 50, T)
        summary["oracle"] = osc
        tol = float(cfg.get("tolerance", 0.02))
        checks.append(_assertion("|phi_1(0) + pi|", abs(y[0] + math.pi), 0.01, abs(y[0] + math.pi) <= 0.01))
        checks.append(_assertion("|rough - smooth oracle|", abs(y[0] - osc), tol, abs(y[0] - osc) <= tol))
    return summary, checks


def oscillatory_oracle(V, n: int = 50, T: float = 1.0, per_cycle: int = 16) -> float:
    """``phi_T(0)`` for the smooth path ``(cos(2 pi n^2 t)/n, sin(2 pi n^2 t)/n)``."""
    from .flow import solve_flow_smooth
    w = 2 * math.pi * n * n

    def zdot(t):
        return np.array([-math.sin(w * t) * w / n, math.cos(w * t) * w / n])

    fl = solve_flow_smooth(V, zdot, tgrid=np.linspace(0.0, T, int(n * n * per_cycle * T) + 1))
    return float(fl.forward(T, np.zeros((1, V.n)))[0, 0])


def cmd_opcheck(cfg, out):
    from .operators import check_ellipticity, check_modulus, transform_operator
    n = cfg.get("grid", {}).get("n", 1)
    with stage("operators"):
        F = build_operator(cfg["operator"], n)
    samples = int(cfg.get("samples", 1000))
    seed = int(cfg.get("seed", 0))
    target = F
    if "fields" in cfg and "driver" in cfg:
        from .flow import solve_flow_rough
        V = build_fields(cfg["fields"])
        with stage("flow"):
            target = transform_operator(F, solve_flow_rough(V, build_driver(cfg["driver"], V.d,
                                                                             float(cfg.get("T", 1.0)), seed)))
    with stage("operators"):
        ell = check_ellipticity(target, samples=samples, seed=seed)
        mod = check_modulus(F, samples=max(1, samples // 20), seed=seed)
    from .pdesolve import atomic_write
    atomic_write(os.path.join(out, "modulus.json"),
                 json.dumps({"theta_fit": mod.theta_fit, "acceptance_rate": mod.acceptance_rate,
                             "starved": mod.starved, "vanishing": mod.vanishing}, indent=2))
    return ({"violations": ell.violations, "acceptance_rate": mod.acceptance_rate},
            [_assertion("ellipticity violations", ell.violations, 0, ell.passed)])


HANDLERS = {"solve": cmd_solve, "wongzakai": cmd_wongzakai, "contraction": cmd_contraction,
            "twisted": cmd_twisted, "flowcheck": cmd_flowcheck, "opcheck": cmd_opcheck}


def run(cfg: dict, out: str) -> int:
    """Execute a validated config; writes ``summary.json`` into ``out``."""
    from .pdesolve import atomic_write
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    status, summary, checks, error = EXIT_OK, {}, [], None
    try:
        summary, checks = HANDLERS[cfg["command"]](cfg, out)
        if not all(c["passed"] for c in checks):
            status = EXIT_ASSERT
    except NumericalAbort as exc:
        status, error = EXIT_NUMERIC, {"stage": exc.stage, "message": str(exc)}
    except ConfigError as exc:
        status, error = EXIT_CONFIG, {"stage": "config", "message": str(exc)}
    doc = {"command": cfg["command"], "preset": cfg.get("preset"), "status": status,
           "assertions": checks, "summary": summary, "error": error,
           "runtime_seconds": time.perf_counter() - t0, "config": cfg}
    atomic_write(os.path.join(out, "summary.json"), json.dumps(doc, indent=2, sort_keys=True, default=_plain))
    return status


def _plain(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def main(argv: Optional[list] = None) -> int:
    ap = argparse.ArgumentParser(prog="roughvisc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="action", required=True)
    pr = sub.add_parser("run", help="run an experiment")
    pr.add_argument("--config")
    pr.add_argument("--preset", choices=sorted(PRESETS))
    pr.add_argument("--out", default="results")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--threads", type=int)
    pv = sub.add_parser("validate", help="check a config without running it")
    pv.add_argument("--config")
    pv.add_argument("--preset", choices=sorted(PRESETS))
    args = ap.parse_args(argv)
    if args.config is None and args.preset is None:
        print("config error: give --config or --preset", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.preset)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    if args.action == "validate":
        print("ok: 0 diagnostics")
        return EXIT_OK
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    status = run(cfg, args.out)
    with open(os.path.join(args.out, "summary.json")) as fh:
        doc = json.load(fh)
    for c in doc["assertions"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']} (threshold {c['threshold']})")
    if doc["error"]:
        print(f"abort {doc['error']['message']}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
