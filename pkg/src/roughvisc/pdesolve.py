"""Explicit monotone finite differences for ``v_t = F^phi(t, x, Dv, D^2 v)`` on ``[-L, L]^n``.

Scheme summary:

* second derivatives by standard centred differences, cross terms (n = 2)
  by the 7-point stencil that stays monotone when ``a11, a22 >= |a12|``;
* first derivatives upwinded per branch, so the choice is made inside the
  min/max of hjb and isaacs operators;
* quasilinear operators freeze ``a(p)`` at the centred gradient and treat
  the scalar ``b(p)`` with a Lax-Friedrichs flux;
* the boundary is a constant extension (zero normal derivative);
* ``dt`` is recomputed every step from the coefficients at the step start.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .flow import FlowSolution
from .operators import Operator, TransformedOperator

CFL_SAFETY = 0.9


class MonotonicityError(RuntimeError):
    """A stencil weight went negative; carries the offending node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    n: int
    L: float
    h: float
    T: float = 1.0

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only n = 1 or n = 2 grids are supported")
        if not self.h > 0 or not self.L > 0:
            raise ValueError("grid spacing and extent must be positive")
        m = 2 * self.L / self.h
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise ValueError(f"2L/h = {m} is not an integer")

    @property
    def m(self) -> int:
        return int(round(2 * self.L / self.h)) + 1

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.m)

    @property
    def shape(self) -> tuple:
        return (self.m,) * self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, ``(m**n, n)``, C order (read-only, computed once)."""
        ax = self.axis
        mesh = np.meshgrid(*([ax] * self.n), indexing="ij")
        out = np.stack([g.ravel() for g in mesh], axis=1)
        out.setflags(write=False)
        return out

    def sample(self, fn) -> np.ndarray:
        return np.asarray(fn(self.nodes), dtype=float).reshape(self.shape)

    def to_dict(self):
        return {"n": self.n, "L": self.L, "h": self.h, "T": self.T, "m": self.m}


@dataclass
class Field:
    """Stored time slices of a grid function."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    bound: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape((self.times.size,) + self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("field contains non-finite values")
        if self.bound is not None and np.max(np.abs(self.values)) > self.bound * (1 + 1e-12):
            raise ValueError(f"field exceeds declared bound {self.bound}")

    @classmethod
    def initial(cls, grid: Grid, fn, bound=None) -> "Field":
        return cls(grid, [0.0], grid.sample(fn)[None], bound=bound)

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def slice_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"no stored slice at t = {t}")
        return self.values[k]

    def sup_norms(self) -> np.ndarray:
        return np.max(np.abs(self.values.reshape(self.times.size, -1)), axis=1)

    def with_values(self, times, values, **meta) -> "Field":
        return Field(self.grid, times, values, bound=self.bound, meta={**self.meta, **meta})

    def to_csv(self, path):
        """Write ``t, x[, y], value`` rows and a JSON sidecar with grid metadata."""
        nodes = self.grid.nodes
        cols = ["t", "x", "y"][: self.grid.n + 1] + ["value"]
        lines = [",".join(cols)]
        for t, vals in zip(self.times, self.values):
            for pt, v in zip(nodes, vals.ravel()):
                lines.append(",".join(repr(float(c)) for c in (t, *pt, v)))
        atomic_write(path, "\n".join(lines) + "\n")
        side = {"grid": self.grid.to_dict(), "slices": self.times.tolist(), "bound": self.bound,
                "meta": {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool))}}
        atomic_write(str(path) + ".json", json.dumps(side, indent=2, sort_keys=True))


def atomic_write(path, text: str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sup_distance(a: Field, b: Field) -> float:
    if a.grid != b.grid or a.values.shape != b.values.shape or not np.allclose(a.times, b.times):
        raise GridMismatchError("fields live on different grids or time slices")
    return float(np.max(np.abs(a.values - b.values)))


# ---------------------------------------------------------------- flow data along nodes

class _FlowTracker:
    """Marches ``(phi_t(x), J, H)`` at the grid nodes forward in time."""

    def __init__(self, flow: Optional[FlowSolution], nodes: np.ndarray):
        self.flow = flow
        self.nodes = nodes
        self.t = 0.0
        N, n = nodes.shape
        self._identity = (nodes, np.broadcast_to(np.eye(n), (N, n, n)), np.zeros((N, n, n, n)))
        if flow is not None:
            self.state, _ = flow._init(nodes, 2)
        self._cache = self._identity

    def __call__(self, t: float):
        if self.flow is None:
            return self._identity
        if t != self.t:
            self.state = self.flow._run(self.state, self.t, t)
            self.t = t
            y, P, Q = self.state
            if P.shape[1] == 1:
                J = 1.0 / P
                H = -Q * (J ** 3)[..., None]
            else:
                J = np.linalg.inv(P)
                H = -np.einsum("Nka,Nabc,Nbi,Ncj->Nkij", J, Q, J, J)
            self._cache = (y, J, 0.5 * (H + np.swapaxes(H, -1, -2)))
        return self._cache


# ---------------------------------------------------------------- stencils

def _neighbours(v: np.ndarray):
    """Edge-padded shifts: dict keyed by offset tuples."""
    n = v.ndim
    vp = np.pad(v, 1, mode="edge")
    core = tuple(slice(1, -1) for _ in range(n))
    out = {}
    offsets = [(1,), (-1,)] if n == 1 else [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    for off in offsets:
        sl = tuple(slice(1 + o, vp.shape[i] - 1 + o) for i, o in enumerate(off))
        out[off] = vp[sl]
    out[(0,) * n] = vp[core]
    return out


def _unit(i, n, s):
    e = [0] * n
    e[i] = s
    return tuple(e)


def _diffusion(a, nb, h, check=True):
    """``Tr[a D^2 v]`` with the monotone stencil; ``a`` has grid shape + (n, n)."""
    n = a.shape[-1]
    v = nb[(0,) * n]
    out = np.zeros_like(v)
    for i in range(n):
        out += a[..., i, i] * (nb[_unit(i, n, 1)] - 2 * v + nb[_unit(i, n, -1)]) / h ** 2
    if n == 2:
        a12 = a[..., 0, 1]
        scale = np.maximum(np.abs(a[..., 0, 0]) + np.abs(a[..., 1, 1]), 1.0) * 1e-12
        bad = (a[..., 0, 0] < np.abs(a12) - scale) | (a[..., 1, 1] < np.abs(a12) - scale)
        if check and bad.any():
            node = tuple(int(k) for k in np.argwhere(bad)[0])
            raise MonotonicityError(f"diffusion not diagonally dominant at node {node}", node)
        ap, am = np.maximum(a12, 0.0), np.maximum(-a12, 0.0)
        axis_sum = nb[(1, 0)] + nb[(-1, 0)] + nb[(0, 1)] + nb[(0, -1)]
        out += ap * (nb[(1, 1)] + nb[(-1, -1)] - axis_sum + 2 * v) / h ** 2
        out -= am * (nb[(1, -1)] + nb[(-1, 1)] - axis_sum + 2 * v) / h ** 2
    return out


def _upwind(b, nb, h):
    n = b.shape[-1]
    v = nb[(0,) * n]
    out = np.zeros_like(v)
    for i in range(n):
        bi = b[..., i]
        out += np.maximum(bi, 0.0) * (nb[_unit(i, n, 1)] - v) / h
        out += np.minimum(bi, 0.0) * (v - nb[_unit(i, n, -1)]) / h
    return out


def _check_diagonal(a, grid):
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    if np.any(diag < -1e-12 * max(1.0, float(np.max(np.abs(diag))))):
        node = tuple(int(k) for k in np.argwhere(np.any(diag < 0, axis=-1))[0])
        raise MonotonicityError(f"negative diffusion coefficient at node {node}", node)


# ---------------------------------------------------------------- CFL

def cfl_dt(Fphi, grid: Grid, bounds: Optional[dict] = None, t: float = 0.0) -> float:
    """``0.9 / (2 n Lambda / h^2 + n beta / h)``; ``T/100`` when both bounds vanish.

    ``bounds`` holds ``Lambda`` (diffusion) and ``beta`` (drift); missing
    entries are estimated from the coefficients at the grid nodes at time ``t``,
    maximised over every control branch.
    """
    bounds = dict(bounds or {})
    if "Lambda" not in bounds or "beta" not in bounds:
        Lam, beta = _coefficient_bounds(_as_transformed(Fphi), grid, t)
        bounds.setdefault("Lambda", Lam)
        bounds.setdefault("beta", beta)
    return _cfl(grid.n, grid.h, bounds["Lambda"], bounds["beta"], grid.T)


def _cfl(n, h, Lam, beta, T):
    denom = 2 * n * Lam / h ** 2 + n * beta / h
    if denom <= 0:
        return T / 100.0
    return CFL_SAFETY / denom


def _coefficient_bounds(Fphi: TransformedOperator, grid: Grid, t: float, data=None, p=None):
    nodes = grid.nodes
    data = Fphi.flow_data(t, nodes) if data is None else data
    if Fphi.trivial:
        return 0.0, 0.0
    if Fphi.kind == "quasilinear":
        p = np.zeros_like(nodes) if p is None else p
        a, _ = Fphi.quasilinear_terms(t, nodes, p, data)
        return float(np.max(np.abs(np.diagonal(a, axis1=-2, axis2=-1)), initial=0.0)), 0.0
    Lam = beta = 0.0
    for row in Fphi.branches(t, nodes, data):
        for a, b in row:
            Lam = max(Lam, float(np.max(np.abs(np.diagonal(a, axis1=-2, axis2=-1)), initial=0.0)))
            beta = max(beta, float(np.max(np.abs(b), initial=0.0)))
    return Lam, beta


def _as_transformed(F) -> TransformedOperator:
    if isinstance(F, TransformedOperator):
        return F
    if isinstance(F, Operator):
        return TransformedOperator(F, None)
    raise TypeError(f"expected an operator, got {type(F).__name__}")


# ---------------------------------------------------------------- stepping

def _rate(Fphi: TransformedOperator, grid: Grid, v: np.ndarray, t: float, data):
    """Discrete ``F^phi`` at every node plus the CFL time step it permits."""
    n, h = grid.n, grid.h
    nodes = grid.nodes
    nb = _neighbours(v)
    shp = grid.shape
    if Fphi.kind == "quasilinear":
        return _quasilinear_rate(Fphi, grid, nb, t, data)
    Lam = beta = 0.0
    outer = None
    for row in Fphi.branches(t, nodes, data):
        inner = None
        for a, b in row:
            a = a.reshape(shp + (n, n))
            b = b.reshape(shp + (n,))
            _check_diagonal(a, grid)
            Lam = max(Lam, float(np.max(np.diagonal(a, axis1=-2, axis2=-1), initial=0.0)))
            beta = max(beta, float(np.max(np.abs(b), initial=0.0)))
            val = _diffusion(a, nb, h) + _upwind(b, nb, h)
            inner = val if inner is None else np.minimum(inner, val)
        outer = inner if outer is None else np.maximum(outer, inner)
    return outer, _cfl(n, h, Lam, beta, grid.T)


def _quasilinear_rate(Fphi, grid, nb, t, data):
    n, h = grid.n, grid.h
    nodes = grid.nodes
    v = nb[(0,) * n]
    shp = grid.shape
    pc = np.stack([(nb[_unit(i, n, 1)] - nb[_unit(i, n, -1)]) / (2 * h) for i in range(n)], -1)
    pflat = pc.reshape(-1, n)
    a, bs = Fphi.quasilinear_terms(t, nodes, pflat, data)
    a = a.reshape(shp + (n, n))
    _check_diagonal(a, grid)
    # Lax-Friedrichs viscosity from a finite-difference estimate of |d b / d p|
    theta = np.zeros(shp + (n,))
    for i in range(n):
        dp = np.zeros_like(pflat)
        dp[:, i] = 1e-6 * (1 + np.abs(pflat[:, i]))
        _, bp = Fphi.quasilinear_terms(t, nodes, pflat + dp, data)
        _, bm = Fphi.quasilinear_terms(t, nodes, pflat - dp, data)
        theta[..., i] = (np.abs(bp - bm) / (2 * dp[:, i])).reshape(shp)
    th = 1.25 * float(np.max(theta, initial=0.0)) + Fphi.base.b_lip
    visc = sum(0.5 * th * (nb[_unit(i, n, 1)] - 2 * v + nb[_unit(i, n, -1)]) / h for i in range(n))
    val = _diffusion(a, nb, h) + bs.reshape(shp) + visc
    Lam = float(np.max(np.diagonal(a, axis1=-2, axis2=-1), initial=0.0))
    return val, _cfl(n, h, Lam, th, grid.T)


def step(Fphi, v: Field, t: float, dt: Optional[float] = None, data=None) -> Field:
    """One explicit step from the last slice of ``v``; ``dt`` defaults to the CFL value."""
    Fphi = _as_transformed(Fphi)
    _reject_custom(Fphi)
    grid = v.grid
    if data is None:
        data = Fphi.flow_data(t, grid.nodes)
    if Fphi.trivial:
        dt = grid.T / 100.0 if dt is None else dt
        return v.with_values([t + dt], v.final[None])
    rate, dt_cfl = _rate(Fphi, grid, v.final, t, data)
    if dt is None:
        dt = dt_cfl
    elif dt > dt_cfl * (1 + 1e-12):
        raise MonotonicityError(f"dt = {dt:.3e} exceeds the monotone limit {dt_cfl:.3e}")
    return v.with_values([t + dt], (v.final + dt * rate)[None])


def _reject_custom(Fphi):
    if Fphi.kind == "custom":
        raise NotImplementedError("custom operators are evaluation-only; the solver needs a structured kind")


def solve_pde(Fphi, v0: Field, T: float, out_times: Optional[Sequence[float]] = None,
              dt_max: Optional[float] = None) -> Field:
    """March ``v_t = F^phi`` from ``v0`` to ``T``; slices are kept at ``out_times`` (default ``{0, T}``).

    Raises :class:`MonotonicityError` on a negative stencil weight.
    """
    Fphi = _as_transformed(Fphi)
    _reject_custom(Fphi)
    grid = v0.grid
    out = sorted(set([0.0, float(T)] if out_times is None else [0.0, *map(float, out_times)]))
    if out[-1] > T + 1e-12 or out[0] < 0:
        raise ValueError("output times must lie in [0, T]")
    v = v0.values[-1].copy()
    if T == 0:
        return v0.with_values([0.0], v[None], steps=0)
    if Fphi.trivial:
        return v0.with_values(out, np.broadcast_to(v, (len(out),) + v.shape).copy(), steps=0)
    tracker = _FlowTracker(Fphi.flow, grid.nodes)
    slices, times = [v.copy()], [0.0]
    t, steps = 0.0, 0
    for target in out[1:]:
        while t < target:
            data = tracker(t)
            rate, dt = _rate(Fphi, grid, v, t, data)
            if dt_max is not None:
                dt = min(dt, dt_max)
            if t + dt >= target - 1e-13 * max(1.0, target):
                dt, t_next = target - t, target
            else:
                t_next = t + dt
            v = v + dt * rate
            t = t_next
            steps += 1
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values at t = {t}")
        slices.append(v.copy())
        times.append(target)
    return v0.with_values(times, np.stack(slices), steps=steps)


# ---------------------------------------------------------------- interpolation

def interpolate(grid: Grid, values: np.ndarray, points: np.ndarray):
    """Multilinear interpolation with clipping; returns ``(vals, exit_fraction)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, grid.n)
    outside = np.any(np.abs(pts) > grid.L * (1 + 1e-12), axis=1)
    clipped = np.clip(pts, -grid.L, grid.L)
    interp = RegularGridInterpolator((grid.axis,) * grid.n, values, method="linear")
    return interp(clipped), float(np.mean(outside))


def max_abs(values) -> float:
    return float(np.max(np.abs(values))) if np.size(values) else 0.0


def hat(x, width: float = 1.0):
    """Compactly supported C^1 bump ``cos^2`` on ``|x| < width``."""
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum(x ** 2, axis=-1)) if x.ndim > 1 else np.abs(x)
    return np.where(r < width, np.cos(0.5 * math.pi * r / width) ** 2, 0.0)
