"""Rough PDE pipeline ``du = F dt - Du . V(x) dz`` and the limit studies built on it.

Sign convention: noise enters as ``-Du . V dz``, so for ``F = 0`` and ``V = 1``
the solution is ``u0(x - z_t)``. The transport formula ``u0(x + B_t)`` quoted
for the Stratonovich case belongs to the opposite noise sign.
"""
from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .flow import solve_flow_rough
from .operators import Operator, transform_operator
from .pdesolve import Field, Grid, atomic_write, interpolate, solve_pde, sup_distance
from .roughpath import (MeshSpec, RoughDriver, augment_with_time, identity_driver, lift_smooth,
                        piecewise_linear_driver, sample_brownian, twisted_driver)
from .vecfield import VectorFieldSet, bracket_field, concat


class DomainExitWarning(UserWarning):
    pass


@dataclass(eq=False)
class RPDEProblem:
    F: Operator
    V: VectorFieldSet
    driver: RoughDriver
    u0: Field
    out_times: Optional[Sequence[float]] = None
    exit_margin: float = 0.0
    max_substep: float = 0.1

    def __post_init__(self):
        g = self.u0.grid
        if self.F.n != g.n:
            raise ValueError(f"operator dimension {self.F.n} does not match grid dimension {g.n}")
        if self.V.n != g.n:
            raise ValueError(f"vector fields live in R^{self.V.n}, grid in R^{g.n}")
        if self.V.d != self.driver.d:
            raise ValueError(f"{self.V.d} vector fields but a {self.driver.d}-dimensional driver")
        if not np.all(np.isfinite(self.u0.values)):
            raise ValueError("initial data must be bounded")

    @property
    def grid(self) -> Grid:
        return self.u0.grid

    @property
    def T(self) -> float:
        return self.driver.T


def solve_rpde(prob: RPDEProblem) -> Field:
    """``u(t, x) = v(t, phi_t^{-1}(x))`` with ``v_t = F^phi v`` and ``phi`` the driver's flow."""
    grid = prob.grid
    flow = solve_flow_rough(prob.V, prob.driver, max_substep=prob.max_substep)
    Fphi = transform_operator(prob.F, flow)
    v = solve_pde(Fphi, prob.u0, prob.T, prob.out_times)
    nodes = grid.nodes
    slices, exits = [], []
    for t, vt in zip(v.times, v.values):
        back = flow.inverse(t, nodes) if t > 0 else nodes
        if np.array_equal(back, nodes):
            slices.append(vt.copy())
            exits.append(0.0)
            continue
        vals, _ = interpolate(grid, vt, back)
        exits.append(float(np.mean(np.any(np.abs(back) > grid.L + prob.exit_margin, axis=1))))
        slices.append(vals.reshape(grid.shape))
    worst = max(exits)
    if worst > 0:
        warnings.warn(f"flow pulled {100 * worst:.2f}% of nodes outside the domain", DomainExitWarning)
    return v.with_values(v.times, np.stack(slices), exit_fraction=worst, v_steps=v.meta.get("steps", 0))


def solve_v(prob: RPDEProblem) -> Field:
    """The transformed solution ``v`` only (no composition)."""
    flow = solve_flow_rough(prob.V, prob.driver, max_substep=prob.max_substep)
    return solve_pde(transform_operator(prob.F, flow), prob.u0, prob.T, prob.out_times)


# ---------------------------------------------------------------- reports

@dataclass
class StudyReport:
    name: str
    levels: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    runtime: float = 0.0
    config: dict = field(default_factory=dict)

    def column(self, key):
        return [r[key] for r in self.rows]

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "levels": self.levels, "rows": self.rows,
                           "summary": self.summary, "runtime": self.runtime,
                           "config": self.config}, indent=2, sort_keys=True, default=_json_default)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0].keys())
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, directory, stem=None):
        stem = stem or self.name
        atomic_write(f"{directory}/{stem}.json", self.to_json())
        atomic_write(f"{directory}/{stem}.csv", self.to_csv())


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def _default_out_times(T, levels):
    k = min(levels)
    return list(T * np.arange(1, 2 ** k + 1) / 2 ** k)


# ---------------------------------------------------------------- studies

def wong_zakai_study(F: Operator, V: VectorFieldSet, u0: Field, seed: int, levels: Sequence[int],
                     T: float = 1.0, fine_level: Optional[int] = None, fine: Optional[RoughDriver] = None,
                     out_times=None) -> StudyReport:
    """Solve with the level-k chord approximations of one Brownian sample.

    Rows carry ``consecutive`` (distance to the next level) and ``to_fine``
    (distance to the solution driven by the fine sample itself).
    """
    levels = list(levels)
    if levels != sorted(set(levels)):
        raise ValueError("levels must be strictly increasing")
    t0 = time.perf_counter()
    if fine is None:
        fine_level = max(levels) + 2 if fine_level is None else fine_level
        fine = sample_brownian(seed, V.d, MeshSpec(T=T, k=fine_level))
    out_times = _default_out_times(fine.T, levels) if out_times is None else out_times

    def run(drv):
        return solve_rpde(RPDEProblem(F, V, drv, u0, out_times))

    sols = [run(piecewise_linear_driver(fine, k)) for k in levels]
    ref = run(fine)
    rows = []
    for q, k in enumerate(levels):
        rows.append({
            "level": k,
            "consecutive": sup_distance(sols[q], sols[q + 1]) if q + 1 < len(levels) else float("nan"),
            "to_fine": sup_distance(sols[q], ref),
            "sup_norm": float(np.max(sols[q].sup_norms())),
            "exit_fraction": sols[q].meta.get("exit_fraction", 0.0),
        })
    cons = [r["consecutive"] for r in rows[:-1]]
    summary = {
        "strictly_decreasing": bool(all(b < a for a, b in zip(cons, cons[1:]))),
        "fine_ratio": rows[-1]["to_fine"] / rows[0]["to_fine"] if rows[0]["to_fine"] > 0 else 0.0,
        "consecutive_ratio": cons[-1] / cons[0] if cons and cons[0] > 0 else 0.0,
        "uniform_bound": max(r["sup_norm"] for r in rows),
    }
    return StudyReport("wongzakai", levels, rows, summary, time.perf_counter() - t0,
                       {"seed": seed, "T": fine.T, "fine_level": fine.meta.get("level")})


@dataclass
class ContractionReport:
    distance: float
    initial_distance: float
    slack: float
    passed: bool
    witness: Optional[dict] = None


def contraction_check(F: Operator, V: VectorFieldSet, driver: RoughDriver, u0: Field, u0hat: Field,
                      slack: float = 1e-10, out_times=None) -> ContractionReport:
    """Check ``sup|u - u^| <= sup|u0 - u0^| + slack`` over nodes and stored slices."""
    u = solve_rpde(RPDEProblem(F, V, driver, u0, out_times))
    uh = solve_rpde(RPDEProblem(F, V, driver, u0hat, out_times))
    dist = sup_distance(u, uh)
    init = float(np.max(np.abs(u0.final - u0hat.final)))
    ok = dist <= init + slack
    witness = None
    if not ok:
        diff = np.abs(u.values - uh.values)
        k = np.unravel_index(int(np.argmax(diff)), diff.shape)
        witness = {"t": float(u.times[k[0]]), "node": [int(i) for i in k[1:]], "gap": float(diff[k])}
    return ContractionReport(dist, init, slack, bool(ok), witness)


def drift_corrected_problem(F, V, driver, u0, i, j, out_times=None) -> RPDEProblem:
    """``du = [F - Du . V_a] dt - Du . V dz`` through a time channel carrying ``V_a = [V_i, V_j]``."""
    Va = bracket_field(V, i, j)
    return RPDEProblem(F, concat(V, Va), augment_with_time(driver), u0, out_times)


def twisted_study(F: Operator, V: VectorFieldSet, u0: Field, seed: Optional[int], levels: Sequence[int],
                  i: int = 0, j: int = 1, T: float = 1.0, fine_level: Optional[int] = None,
                  loop_points: int = 32, loops: bool = True, out_times=None) -> StudyReport:
    """Solutions along twisted drivers versus the drift-corrected and the plain rough PDE.

    ``seed=None`` uses the zero driver.
    """
    levels = list(levels)
    t0 = time.perf_counter()
    fine_level = max(levels) if fine_level is None else fine_level
    if seed is None:
        fine = identity_driver(V.d, T, 2 ** fine_level)
        fine.meta["level"] = fine_level
    else:
        fine = sample_brownian(seed, V.d, MeshSpec(T=T, k=fine_level))
    out_times = _default_out_times(T, levels) if out_times is None else out_times
    corrected = solve_rpde(drift_corrected_problem(F, V, fine, u0, i, j, out_times))
    plain = solve_rpde(RPDEProblem(F, V, fine, u0, out_times))
    rows = []
    for k in levels:
        drv = twisted_driver(fine, MeshSpec(T=T, k=k, loop_points=loop_points), i, j, loops=loops)
        u = solve_rpde(RPDEProblem(F, V, drv, u0, out_times))
        rows.append({"level": k, "to_corrected": sup_distance(u, corrected),
                     "to_uncorrected": sup_distance(u, plain),
                     "sup_norm": float(np.max(u.sup_norms()))})
    last = rows[-1]
    ratio = last["to_corrected"] / last["to_uncorrected"] if last["to_uncorrected"] > 0 else float("inf")
    summary = {"ratio": ratio, "ratio_check": bool(ratio <= 0.1),
               "corrected_vs_uncorrected": sup_distance(corrected, plain)}
    return StudyReport("twisted", levels, rows, summary, time.perf_counter() - t0,
                       {"seed": seed, "T": T, "fine_level": fine_level, "alpha": [i + 1, j + 1],
                        "loop_points": loop_points})


# ---------------------------------------------------------------- drivers for invariance checks

def shifted_piecewise_linear(fine: RoughDriver, k: int) -> RoughDriver:
    """Chords through the level-k dyadic mesh shifted by half a mesh step (endpoints kept)."""
    K = fine.times.size - 1
    step = K // 2 ** k
    if step < 2 or K % 2 ** k:
        raise ValueError("fine grid must refine the level k+1 mesh")
    idx = np.unique(np.concatenate([[0], np.arange(step // 2, K, step), [K]]))
    return lift_smooth(fine.times[idx], fine.level1[idx], p=fine.p, kind=fine.kind)
