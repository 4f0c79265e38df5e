"""Collections of vector fields with derivatives up to third order.

All callables are batched: a point array of shape ``(N, n)`` maps to

* values      ``(N, d, n)``
* jacobians   ``(N, d, n, n)``          ``[.., a, b] = d_b V^a``
* hessians    ``(N, d, n, n, n)``       ``[.., a, b, c] = d_b d_c V^a``
* thirds      ``(N, d, n, n, n, n)``

Missing orders are filled in by central differences of the next lower order.

Bracket convention: ``[V_i, V_j] = DV_j V_i - DV_i V_j`` and iterated
brackets are right-nested, ``V_(a1,...,aN) = [V_a1, [V_a2, ... [V_a(N-1), V_aN]]]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EPS_STEP = np.finfo(float).eps ** (1.0 / 3.0)


def _points(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, n)
    return x, single


def _central_difference(f: Callable, x: np.ndarray) -> np.ndarray:
    """Derivative of a batched map, appended as the trailing axis."""
    n = x.shape[1]
    h = EPS_STEP * np.maximum(1.0, np.abs(x))
    cols = []
    for c in range(n):
        e = np.zeros_like(x)
        e[:, c] = h[:, c]
        fp, fm = f(x + e), f(x - e)
        hc = h[:, c].reshape((-1,) + (1,) * (fp.ndim - 1))
        cols.append((fp - fm) / (2 * hc))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class VectorFieldSet:
    n: int
    d: int
    values: Callable[[np.ndarray], np.ndarray]
    jacobians: Optional[Callable] = None
    hessians: Optional[Callable] = None
    thirds: Optional[Callable] = None
    bounds: dict = field(default_factory=dict)
    name: str = "custom"
    jet: Optional[Callable] = None      # n = 1 only: x -> (V, DV, D2V, D3V), each (N, d)

    def jet1d(self, x, order: int):
        """Derivatives 0..order of a scalar-state set, each of shape (N, d)."""
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        if self.jet is not None:
            return self.jet(x)[:order + 1]
        fs = (self.V, self.DV, self.D2V, self.D3V)[:order + 1]
        return tuple(f(x).reshape(x.shape[0], self.d) for f in fs)

    # batched accessors with finite-difference fallback

    def V(self, x):
        return self.values(np.asarray(x, dtype=float).reshape(-1, self.n))

    def DV(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if self.jacobians is not None:
            return self.jacobians(x)
        return _central_difference(self.values, x)

    def D2V(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if self.hessians is not None:
            return self.hessians(x)
        out = _central_difference(self.DV, x)
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def D3V(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if self.thirds is not None:
            return self.thirds(x)
        return _central_difference(self.D2V, x)

    # single-field accessors

    def _check(self, i):
        if not 0 <= i < self.d:
            raise IndexError(f"field index {i} out of range for d={self.d}")

    def eval(self, i: int, x):
        self._check(i)
        x, single = _points(x, self.n)
        out = self.V(x)[:, i]
        return out[0] if single else out

    def jac(self, i: int, x):
        self._check(i)
        x, single = _points(x, self.n)
        out = self.DV(x)[:, i]
        return out[0] if single else out

    def hess(self, i: int, x):
        self._check(i)
        x, single = _points(x, self.n)
        out = self.D2V(x)[:, i]
        return out[0] if single else out

    def third(self, i: int, x):
        self._check(i)
        x, single = _points(x, self.n)
        out = self.D3V(x)[:, i]
        return out[0] if single else out

    def scaled(self, c: float) -> "VectorFieldSet":
        return VectorFieldSet(
            self.n, self.d, lambda x: c * self.V(x), lambda x: c * self.DV(x),
            lambda x: c * self.D2V(x), lambda x: c * self.D3V(x),
            {k: abs(c) * v for k, v in self.bounds.items()}, f"{c}*{self.name}")

    def subset(self, idx: Sequence[int]) -> "VectorFieldSet":
        idx = list(idx)
        return VectorFieldSet(
            self.n, len(idx), lambda x: self.V(x)[:, idx], lambda x: self.DV(x)[:, idx],
            lambda x: self.D2V(x)[:, idx], lambda x: self.D3V(x)[:, idx], dict(self.bounds), self.name)


def concat(*sets: VectorFieldSet) -> VectorFieldSet:
    n = sets[0].n
    if any(s.n != n for s in sets):
        raise ValueError("state dimensions differ")
    return VectorFieldSet(
        n, sum(s.d for s in sets),
        lambda x: np.concatenate([s.V(x) for s in sets], axis=1),
        lambda x: np.concatenate([s.DV(x) for s in sets], axis=1),
        lambda x: np.concatenate([s.D2V(x) for s in sets], axis=1),
        lambda x: np.concatenate([s.D3V(x) for s in sets], axis=1),
        _merge_bounds(sets), name="+".join(s.name for s in sets))


def _merge_bounds(sets):
    keys = set.intersection(*(set(s.bounds) for s in sets))
    return {k: max(float(s.bounds[k]) for s in sets) for k in keys}


# ---------------------------------------------------------------- brackets

def lie_bracket(V: VectorFieldSet, i: int, j: int, x) -> np.ndarray:
    """``[V_i, V_j](x) = DV_j(x) V_i(x) - DV_i(x) V_j(x)``."""
    V._check(i)
    V._check(j)
    x, single = _points(x, V.n)
    if i == j:
        out = np.zeros((x.shape[0], V.n))
    else:
        v, dv = V.V(x), V.DV(x)
        out = (np.einsum("Nab,Nb->Na", dv[:, j], v[:, i])
               - np.einsum("Nab,Nb->Na", dv[:, i], v[:, j]))
    return out[0] if single else out


def bracket_field(V: VectorFieldSet, i: int, j: int) -> VectorFieldSet:
    """The field ``[V_i, V_j]`` with analytic first and second derivatives.

    Uses third derivatives of ``V``; the bracket's own third derivative
    falls back to central differences.
    """
    V._check(i)
    V._check(j)

    def g(x, a, b):
        # G_ab = DV_b V_a and its derivatives
        v, dv = V.V(x), V.DV(x)
        return np.einsum("Nab,Nb->Na", dv[:, b], v[:, a])

    def dg(x, a, b):
        v, dv, d2v = V.V(x), V.DV(x), V.D2V(x)
        return (np.einsum("Nabc,Nb->Nac", d2v[:, b], v[:, a])
                + np.einsum("Nab,Nbc->Nac", dv[:, b], dv[:, a]))

    def d2g(x, a, b):
        v, dv, d2v, d3v = V.V(x), V.DV(x), V.D2V(x), V.D3V(x)
        return (np.einsum("Nabcd,Nb->Nacd", d3v[:, b], v[:, a])
                + np.einsum("Nabc,Nbd->Nacd", d2v[:, b], dv[:, a])
                + np.einsum("Nabd,Nbc->Nacd", d2v[:, b], dv[:, a])
                + np.einsum("Nab,Nbcd->Nacd", dv[:, b], d2v[:, a]))

    return VectorFieldSet(
        V.n, 1,
        lambda x: (g(x, i, j) - g(x, j, i))[:, None],
        lambda x: (dg(x, i, j) - dg(x, j, i))[:, None],
        lambda x: (d2g(x, i, j) - d2g(x, j, i))[:, None],
        name=f"[{V.name}_{i},{V.name}_{j}]")


@dataclass(frozen=True)
class BracketSpec:
    alpha: tuple

    def __post_init__(self):
        if len(self.alpha) < 2:
            raise ValueError("bracket words need length >= 2")
        object.__setattr__(self, "alpha", tuple(int(a) for a in self.alpha))


def iterated_bracket(V: VectorFieldSet, spec: BracketSpec | Sequence[int], x) -> np.ndarray:
    """Right-nested bracket ``[V_a1, [V_a2, ... [V_a(N-1), V_aN]]]`` at ``x``.

    Derivatives of inner brackets are taken by central differences.
    """
    if not isinstance(spec, BracketSpec):
        spec = BracketSpec(tuple(spec))
    for a in spec.alpha:
        V._check(a)
    x, single = _points(x, V.n)
    inner = _nested_field(V, spec.alpha)
    out = inner(x)
    return out[0] if single else out


def _nested_field(V: VectorFieldSet, alpha: tuple) -> Callable:
    if len(alpha) == 2:
        return lambda x: lie_bracket(V, alpha[0], alpha[1], x)
    rest = _nested_field(V, alpha[1:])
    i = alpha[0]

    def field_(x):
        w = rest(x)
        dw = _central_difference(rest, x)
        vi = V.V(x)[:, i]
        return np.einsum("Nab,Nb->Na", dw, vi) - np.einsum("Nab,Nb->Na", V.DV(x)[:, i], w)

    return field_


# ---------------------------------------------------------------- named library

def constant_fields(vectors) -> VectorFieldSet:
    """``V_i(x) = c_i`` for the rows ``c_i`` of ``vectors`` (shape (d, n))."""
    c = np.atleast_2d(np.asarray(vectors, dtype=float))
    d, n = c.shape
    return VectorFieldSet(
        n, d,
        lambda x: np.broadcast_to(c, (x.shape[0], d, n)).copy(),
        lambda x: np.zeros((x.shape[0], d, n, n)),
        lambda x: np.zeros((x.shape[0], d, n, n, n)),
        lambda x: np.zeros((x.shape[0], d, n, n, n, n)),
        {"sup": float(np.max(np.abs(c))), "lip": 0.0}, "constant")


def linear_fields(matrices) -> VectorFieldSet:
    """``V_i(x) = A_i x``."""
    A = np.asarray(matrices, dtype=float)
    if A.ndim == 2:
        A = A[None]
    d, n, _ = A.shape
    return VectorFieldSet(
        n, d,
        lambda x: np.einsum("iab,Nb->Nia", A, x),
        lambda x: np.broadcast_to(A, (x.shape[0], d, n, n)).copy(),
        lambda x: np.zeros((x.shape[0], d, n, n, n)),
        lambda x: np.zeros((x.shape[0], d, n, n, n, n)),
        {"lip": float(max(np.linalg.norm(a, 2) for a in A))}, "linear")


def sin_cos_fields() -> VectorFieldSet:
    """``V = (sin, cos)`` on the real line (n = 1, d = 2)."""

    def vals(x):
        out = np.empty((x.shape[0], 2, 1))
        out[:, 0] = np.sin(x)
        out[:, 1] = np.cos(x)
        return out

    def jac(x):
        return vals(x)[:, ::-1, :, None] * np.array([1.0, -1.0])[None, :, None, None]

    def hess(x):
        return -vals(x)[..., None, None]

    def third(x):
        return -jac(x)[..., None, None]

    def jet(x):
        v = np.empty((x.shape[0], 2))
        np.sin(x[:, 0], out=v[:, 0])
        np.cos(x[:, 0], out=v[:, 1])
        a1 = v[:, ::-1] * np.array([1.0, -1.0])
        return v, a1, -v, -a1

    return VectorFieldSet(1, 2, vals, jac, hess, third, {"sup": 1.0, "lip": 1.0}, "sin-cos", jet)


def compact_bump_fields(directions, radius: float = 2.0) -> VectorFieldSet:
    """``V_i(x) = w_i rho(x)`` with the smooth bump ``rho = exp(1 - 1/(1 - |x|^2/R^2))``.

    Third derivatives use the finite-difference fallback.
    """
    w = np.atleast_2d(np.asarray(directions, dtype=float))
    d, n = w.shape
    R2 = radius ** 2

    def parts(x):
        s = np.sum(x ** 2, axis=1) / R2
        inside = s < 1.0
        q = np.where(inside, 1.0 - s, 1.0)
        rho = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
        # rho as a function of s: rho' = -rho / q^2, rho'' = rho (1 - 2 q) / q^4
        r1 = np.where(inside, -rho / q ** 2, 0.0)
        r2 = np.where(inside, rho * (1.0 - 2.0 * q) / q ** 4, 0.0)
        return rho, r1, r2

    def vals(x):
        rho = parts(x)[0]
        return rho[:, None, None] * w[None]

    def jac(x):
        _, r1, _ = parts(x)
        grad = (2.0 / R2) * r1[:, None] * x
        return np.einsum("ia,Nb->Niab", w, grad)

    def hess(x):
        _, r1, r2 = parts(x)
        eye = np.eye(n)
        h = ((4.0 / R2 ** 2) * r2[:, None, None] * np.einsum("Nb,Nc->Nbc", x, x)
             + (2.0 / R2) * r1[:, None, None] * eye[None])
        return np.einsum("ia,Nbc->Niabc", w, h)

    return VectorFieldSet(n, d, vals, jac, hess, None,
                          {"sup": float(np.max(np.abs(w)))}, "compact-bump")


def named_fields(name: str, **params) -> VectorFieldSet:
    if name == "constant":
        return constant_fields(params.get("vectors", [[1.0]]))
    if name == "linear":
        return linear_fields(params["matrices"])
    if name == "sin-cos":
        return sin_cos_fields()
    if name == "compact-bump":
        return compact_bump_fields(params.get("directions", [[1.0]]), params.get("radius", 2.0))
    raise KeyError(f"unknown vector field library {name!r}")


FIELD_LIBRARY = ("constant", "linear", "sin-cos", "compact-bump")
