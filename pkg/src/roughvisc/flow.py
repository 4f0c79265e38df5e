"""Flows of dy = V(y) dz for smooth and level-2 rough drivers.

Every driver interval ``[t_k, t_{k+1}]`` is described by a (possibly
time-dependent) increment field

    E(y) = sum_i c_i V_i(y) + sum_{ij} C_ij (DV_j V_i)(y)

integrated over a unit pseudo-time ``s``. For smooth paths ``c = z'(t) dt``
and ``C = 0``. For rough increments ``(a, M)`` the default ``logode`` scheme
uses ``c = a`` and ``C = Anti(M)``, i.e. the vector field
``sum a_i V_i + sum_{i<j} A_ij [V_i, V_j]``; the ``taylor`` scheme performs
the single explicit update ``y + sum a_i V_i + sum M_ij DV_j V_i``.

Derivatives of the flow map are propagated with the first and second
variational equations along the same integrator.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .roughpath import RoughDriver
from .vecfield import VectorFieldSet

BLOWUP = 1e8


class FlowDivergenceError(RuntimeError):
    pass


class FlowRangeError(ValueError):
    pass


def increment_field(V: VectorFieldSet, y, c, C=None, order: int = 0):
    """Value, Jacobian and Hessian (up to ``order``) of the increment field.

    ``E = sum_i c_i V_i + sum_ij C_ij DV_j V_i``. Contractions are written as
    batched matmuls; einsum call overhead dominates for small ``n``.
    """
    if V.n == 1:
        return _increment_field_1d(V, y, c, C, order)
    v = V.V(y)
    N, d, n = v.shape
    E = np.matmul(c, v)
    hasC = C is not None and np.any(C)
    need_dv = hasC or order >= 1
    dv = V.DV(y) if need_dv else None
    if hasC:
        w = np.matmul(C.T, v)                                  # w_j = sum_i C_ij v_i
        E = E + np.matmul(dv, w[..., None]).sum(axis=1)[..., 0]
    if order == 0:
        return (E,)
    DE = np.matmul(c, dv.reshape(N, d, n * n)).reshape(N, n, n)
    d2v = V.D2V(y) if (order >= 2 or hasC) else None
    if hasC:
        U = np.matmul(C.T, dv.reshape(N, d, n * n)).reshape(N, d, n, n)
        DE = DE + (np.matmul(w[:, :, None, None, :], d2v).sum(axis=1)[:, :, 0]
                   + np.matmul(dv, U).sum(axis=1))
    if order == 1:
        return E, DE
    D2E = np.matmul(c, d2v.reshape(N, d, n ** 3)).reshape(N, n, n, n)
    if hasC:
        d3v = V.D3V(y)
        t1 = np.matmul(w[:, :, None, None, :], d3v.reshape(N, d, n, n, n * n)).sum(axis=1)
        t2 = np.matmul(np.swapaxes(d2v, -1, -2), U[:, :, None]).sum(axis=1)
        W = np.matmul(C.T, d2v.reshape(N, d, n ** 3)).reshape(N, d, n, n * n)
        t4 = np.matmul(dv, W).sum(axis=1)
        D2E = D2E + t1.reshape(N, n, n, n) + t2 + np.swapaxes(t2, -1, -2) + t4.reshape(N, n, n, n)
    return E, DE, D2E


def _increment_field_1d(V, y, c, C, order):
    # scalar state: every derivative is (N, d) and the sums over i, j become matmuls with c and C
    hasC = C is not None and np.any(C)
    jet = V.jet1d(y, order + 1 if hasC else order)
    v = jet[0]
    E = v @ c
    if hasC:
        vC = v @ C
        E = E + (vC * jet[1]).sum(1)
    if order == 0:
        return (E[:, None],)
    a1 = jet[1]
    DE = a1 @ c
    if hasC:
        a1C = a1 @ C
        DE = DE + (vC * jet[2]).sum(1) + (a1C * a1).sum(1)
    if order == 1:
        return E[:, None], DE[:, None, None]
    a2 = jet[2]
    D2E = a2 @ c
    if hasC:
        D2E = D2E + (vC * jet[3]).sum(1) + 2 * (a1C * a2).sum(1) + ((a2 @ C) * a1).sum(1)
    return E[:, None], DE[:, None, None], D2E[:, None, None, None]


def _rhs(V, y, P, Q, c, C):
    if P is None:
        return increment_field(V, y, c, C, 0)[0], None, None
    if Q is None:
        E, DE = increment_field(V, y, c, C, 1)
        return E, np.matmul(DE, P), None
    E, DE, D2E = increment_field(V, y, c, C, 2)
    N, n = y.shape
    if n == 1:
        return E, DE * P, DE[..., None] * Q + D2E * (P * P)[..., None]
    dP = np.matmul(DE, P)
    # D2E[P, P]: contract c with P, then b with P
    T = np.matmul(D2E, P[:, None])
    dQ = (np.matmul(DE, Q.reshape(N, n, n * n)).reshape(N, n, n, n)
          + np.matmul(np.swapaxes(P, 1, 2)[:, None], T))
    return E, dP, dQ


def _axpy(state, k, h):
    return tuple(None if s is None else s + h * ks for s, ks in zip(state, k))


def _rk4(V, state, coeff: Callable, s0: float, s1: float):
    """One classical RK4 step in pseudo-time from s0 to s1."""
    h = s1 - s0
    if state[1] is None:
        y = state[0]
        c, C = coeff(s0)
        k1 = increment_field(V, y, c, C)[0]
        c, C = coeff(s0 + h / 2)
        k2 = increment_field(V, y + (h / 2) * k1, c, C)[0]
        k3 = increment_field(V, y + (h / 2) * k2, c, C)[0]
        c, C = coeff(s1)
        k4 = increment_field(V, y + h * k3, c, C)[0]
        return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4), None, None

    def f(s, st):
        c, C = coeff(s)
        return _rhs(V, st[0], st[1], st[2], c, C)

    k1 = f(s0, state)
    k2 = f(s0 + h / 2, _axpy(state, k1, h / 2))
    k3 = f(s0 + h / 2, _axpy(state, k2, h / 2))
    k4 = f(s1, _axpy(state, k3, h))
    return tuple(None if s is None else s + (h / 6) * (a + 2 * b + 2 * c + d)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4))


def _check_blowup(y):
    if not np.all(np.isfinite(y)) or np.max(np.abs(y), initial=0.0) > BLOWUP:
        raise FlowDivergenceError("flow diverged (|y| > 1e8)")


# ---------------------------------------------------------------- steppers

class _RoughStepper:
    def __init__(self, V, driver: RoughDriver, scheme: str, max_substep: float):
        if scheme not in ("logode", "taylor"):
            raise ValueError(f"unknown rough scheme {scheme!r}")
        if driver.d != V.d:
            raise ValueError(f"driver has d={driver.d} channels but V has {V.d} fields")
        self.V = V
        self.scheme = scheme
        self.da, self.M = driver.increments()
        self.A = 0.5 * (self.M - np.swapaxes(self.M, 1, 2))
        # chained chord lifts leave ~1e-16 of area; treat it as zero so the cheap branch applies
        noise = 1e-13 * np.maximum(1.0, np.sum(self.da ** 2, axis=1))
        self.A[np.max(np.abs(self.A), axis=(1, 2)) <= noise] = 0.0
        lip = max(1.0, float(V.bounds.get("lip", 1.0)))
        size = (np.sum(np.abs(self.da), axis=1) + np.sum(np.abs(self.A), axis=(1, 2))) * lip
        self.substeps = np.maximum(1, np.ceil(size / max_substep)).astype(int)

    def __call__(self, k, state, s0, s1):
        if s0 == s1:
            return state
        if self.scheme == "taylor" and {s0, s1} == {0.0, 1.0}:
            return self._taylor(k, state, forward=s1 > s0)
        a, A = self.da[k], self.A[k]
        hasA = bool(np.any(A))
        if not (hasA or np.any(a)):
            return state
        m = max(1, int(math.ceil(self.substeps[k] * abs(s1 - s0))))
        coeff = (lambda s: (a, A)) if hasA else (lambda s: (a, None))
        if m == 1:
            return _rk4(self.V, state, coeff, s0, s1)
        grid = np.linspace(s0, s1, m + 1)
        for u0, u1 in zip(grid[:-1], grid[1:]):
            state = _rk4(self.V, state, coeff, u0, u1)
        return state

    def _taylor(self, k, state, forward):
        a, M = self.da[k], self.M[k]
        if not forward:
            a, M = -a, -M + np.outer(a, a)
        y, P, Q = state
        order = 0 if P is None else (1 if Q is None else 2)
        terms = increment_field(self.V, y, a, M, order)
        y1 = y + terms[0]
        P1 = None if P is None else P + np.einsum("Nab,Nbi->Nai", terms[1], P)
        Q1 = None
        if Q is not None:
            Q1 = (Q + np.einsum("Nab,Nbij->Naij", terms[1], Q)
                  + np.einsum("Nabc,Nbi,Ncj->Naij", terms[2], P, P))
        return y1, P1, Q1


class _SmoothStepper:
    """Adaptive RK4 with step-doubling error control for y' = V(y) zdot(t)."""

    def __init__(self, V, times, zdot: Callable, tol: float, min_step: float):
        self.V = V
        self.times = times
        self.zdot = zdot
        self.tol = tol
        self.min_step = min_step
        self.rejected = 0
        self._table = None
        self._vectorised = True

    def _stage_table(self):
        # z' at the five stage points of every interval, if zdot accepts arrays
        if self._table is None and self._vectorised:
            frac = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
            dt = np.diff(self.times)
            ts = self.times[:-1, None] + frac[None, :] * dt[:, None]
            try:
                vals = np.asarray(self.zdot(ts.ravel()), dtype=float)
                vals = vals.reshape(ts.size, -1) if vals.ndim > 1 and vals.shape[0] == ts.size \
                    else vals.T.reshape(ts.size, -1)
                self._table = vals.reshape(dt.size, 5, -1) * dt[:, None, None]
            except Exception:
                self._vectorised = False
        return self._table

    def _coeff(self, k, s):
        dt = self.times[k + 1] - self.times[k]
        return np.atleast_1d(self.zdot(self.times[k] + s * dt)) * dt

    def __call__(self, k, state, s0, s1):
        if s0 == s1:
            return state
        table = self._stage_table() if (s0, s1) in ((0.0, 1.0), (1.0, 0.0)) else None
        if table is not None:
            cs = table[k] if s1 > s0 else table[k][::-1]
        else:
            cs = [self._coeff(k, s0 + f * (s1 - s0)) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
        return self._adaptive(k, state, s0, s1, cs)

    def _adaptive(self, k, state, s0, s1, cs):
        full, half = _rk4_pair(self.V, state, cs, s1 - s0)
        err = np.max(np.abs(half[0] - full[0]), initial=0.0) / 15.0
        if err <= self.tol:
            return half
        if abs(s1 - s0) < self.min_step:
            raise FlowDivergenceError(
                f"step rejected: local error {err:.2e} > {self.tol:.0e} at the step-size floor")
        self.rejected += 1
        mid = 0.5 * (s0 + s1)
        for a, b in ((s0, mid), (mid, s1)):
            sub = [self._coeff(k, a + f * (b - a)) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
            state = self._adaptive(k, state, a, b, sub)
        return state


def _rk4_pair(V, state, cs, h):
    """Full RK4 step and two half steps, coefficients given at fractions 0, 1/4, 1/2, 3/4, 1."""
    if state[1] is None:
        y0 = state[0]
        vals = V.values

        def g(y, c):
            return np.matmul(c, vals(y))

        k0 = g(y0, cs[0])
        k2 = g(y0 + (h / 2) * k0, cs[2])
        k3 = g(y0 + (h / 2) * k2, cs[2])
        k4 = g(y0 + h * k3, cs[4])
        full = y0 + (h / 6) * (k0 + 2 * k2 + 2 * k3 + k4)
        q = h / 2
        a2 = g(y0 + (q / 2) * k0, cs[1])
        a3 = g(y0 + (q / 2) * a2, cs[1])
        a4 = g(y0 + q * a3, cs[2])
        ym = y0 + (q / 6) * (k0 + 2 * a2 + 2 * a3 + a4)
        b1 = g(ym, cs[2])
        b2 = g(ym + (q / 2) * b1, cs[3])
        b3 = g(ym + (q / 2) * b2, cs[3])
        b4 = g(ym + q * b3, cs[4])
        return (full, None, None), (ym + (q / 6) * (b1 + 2 * b2 + 2 * b3 + b4), None, None)

    def f(st, c):
        return _rhs(V, st[0], st[1], st[2], c, None)

    k0 = f(state, cs[0])
    # full step
    k2 = f(_axpy(state, k0, h / 2), cs[2])
    k3 = f(_axpy(state, k2, h / 2), cs[2])
    k4 = f(_axpy(state, k3, h), cs[4])
    full = _combine(state, (k0, k2, k3, k4), h)
    # two half steps
    q = h / 2
    a2 = f(_axpy(state, k0, q / 2), cs[1])
    a3 = f(_axpy(state, a2, q / 2), cs[1])
    a4 = f(_axpy(state, a3, q), cs[2])
    mid = _combine(state, (k0, a2, a3, a4), q)
    b1 = f(mid, cs[2])
    b2 = f(_axpy(mid, b1, q / 2), cs[3])
    b3 = f(_axpy(mid, b2, q / 2), cs[3])
    b4 = f(_axpy(mid, b3, q), cs[4])
    return full, _combine(mid, (b1, b2, b3, b4), q)


def _combine(state, ks, h):
    k1, k2, k3, k4 = ks
    return tuple(None if s is None else s + (h / 6) * (a + 2 * b + 2 * c + d)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4))


# ---------------------------------------------------------------- flow object

@dataclass(eq=False)
class FlowSolution:
    """Flow ``phi_t`` of a driven ODE/RDE with inverse and inverse derivatives."""

    V: VectorFieldSet
    times: np.ndarray
    stepper: Callable
    kind: str = "rough"
    probes: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def quality(self) -> float:
        """Round-trip error sup |phi_T^{-1}(phi_T(x)) - x| over the probe points."""
        if "quality" not in self.info:
            self.info["quality"] = self.round_trip_error()
        return self.info["quality"]

    @property
    def n(self):
        return self.V.n

    @property
    def T(self):
        return float(self.times[-1])

    def _locate(self, t):
        if t < self.times[0] - 1e-14 or t > self.T * (1 + 1e-12) + 1e-14:
            raise FlowRangeError(f"time {t} outside flow range [{self.times[0]}, {self.T}]")
        t = min(max(t, self.times[0]), self.T)
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if k >= self.times.size - 1:
            return self.times.size - 2, 1.0
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, s

    def _init(self, x, order):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        y = x.reshape(-1, self.n).copy()
        N, n = y.shape
        P = np.broadcast_to(np.eye(n), (N, n, n)).copy() if order >= 1 else None
        Q = np.zeros((N, n, n, n)) if order >= 2 else None
        return (y, P, Q), single

    def _run(self, state, t0, t1):
        """Propagate from time t0 to t1 (either direction)."""
        k0, s0 = self._locate(t0)
        k1, s1 = self._locate(t1)
        if (k0, s0) == (k1, s1):
            return state
        if (k1, s1) > (k0, s0):
            if s0 == 1.0:
                k0, s0 = k0 + 1, 0.0
            while k0 < k1:
                state = self.stepper(k0, state, s0, 1.0)
                if k0 % 64 == 0:
                    _check_blowup(state[0])
                k0, s0 = k0 + 1, 0.0
            state = self.stepper(k1, state, s0, s1)
        else:
            if s0 == 0.0 and k0 > 0:
                k0, s0 = k0 - 1, 1.0
            while k0 > k1:
                state = self.stepper(k0, state, s0, 0.0)
                if k0 % 64 == 0:
                    _check_blowup(state[0])
                k0, s0 = k0 - 1, 1.0
            state = self.stepper(k1, state, s0, s1)
        _check_blowup(state[0])
        return state

    def forward(self, t, x, start: float = 0.0):
        """phi_{start,t}(x)."""
        state, single = self._init(x, 0)
        y = self._run(state, start, t)[0]
        return y[0] if single else y

    def inverse(self, t, y):
        """phi_t^{-1}(y) by running the reversed dynamics from t back to 0."""
        state, single = self._init(y, 0)
        x = self._run(state, t, 0.0)[0]
        return x[0] if single else x

    def inverse_derivatives(self, t, y):
        """(phi_t^{-1}(y), D phi_t^{-1}(y), D^2 phi_t^{-1}(y)) via reversed variational equations."""
        state, single = self._init(y, 2)
        x, J, H = self._run(state, t, 0.0)
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
        if single:
            return x[0], J[0], H[0]
        return x, J, H

    def forward_jacobian(self, t, x):
        state, single = self._init(x, 1)
        _, P, _ = self._run(state, 0.0, t)
        return P[0] if single else P

    def jac_inv(self, t, x):
        return inverse_transform_data(self, t, x)[1]

    def hess_inv(self, t, x):
        return inverse_transform_data(self, t, x)[2]

    def march(self, x, times, derivatives: bool = True):
        """Yield ``(t, phi_t(x), J, H)`` for increasing ``times``.

        Marches forward once, carrying D phi and D^2 phi, and inverts them:
        ``J = (D phi)^{-1}``, ``H^k_ij = -J^k_a (D^2 phi)^a_bc J^b_i J^c_j``.
        """
        state, _ = self._init(x, 2 if derivatives else 0)
        t_prev = float(self.times[0])
        for t in times:
            state = self._run(state, t_prev, t)
            t_prev = t
            y, P, Q = state
            if not derivatives:
                yield t, y, None, None
                continue
            J = np.linalg.inv(P)
            H = -np.einsum("Nka,Nabc,Nbi,Ncj->Nkij", J, Q, J, J)
            yield t, y, J, 0.5 * (H + np.swapaxes(H, -1, -2))

    def round_trip_error(self, probes=None, t=None):
        probes = self.probes if probes is None else np.asarray(probes, dtype=float).reshape(-1, self.n)
        t = self.T if t is None else t
        back = self.inverse(t, self.forward(t, probes))
        return float(np.max(np.abs(back - probes)))

    def diagnostics_json(self, probes=None) -> str:
        probes = self.probes if probes is None else np.asarray(probes, dtype=float).reshape(-1, self.n)
        y = self.forward(self.T, probes)
        doc = {
            "kind": self.kind,
            "T": self.T,
            "probes": probes.tolist(),
            "phi_T": y.tolist(),
            "round_trip_error": self.round_trip_error(probes),
            **{k: v for k, v in self.info.items() if isinstance(v, (int, float, str))},
        }
        return json.dumps(doc)


def _default_probes(n):
    g = np.linspace(-1.5, 1.5, 5)
    if n == 1:
        return g[:, None]
    mesh = np.meshgrid(*([g[::2]] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def solve_flow_rough(V: VectorFieldSet, Z: RoughDriver, scheme: str = "logode",
                     max_substep: float = 0.1, probes=None) -> FlowSolution:
    """Flow of dy = V(y) dZ for a level-2 driver."""
    stepper = _RoughStepper(V, Z, scheme, max_substep)
    probes = _default_probes(V.n) if probes is None else np.asarray(probes, float).reshape(-1, V.n)
    fl = FlowSolution(V, np.asarray(Z.times), stepper, "rough", probes=probes,
                      info={"scheme": scheme, "steps": int(stepper.substeps.sum())})
    return fl


def solve_flow_smooth(V: VectorFieldSet, path, tgrid=None, tol: float = 1e-8,
                      min_step: float = 1e-6, probes=None) -> FlowSolution:
    """Flow of y' = V(y) z'(t) by adaptive classical RK4.

    ``path`` is either ``(times, points)`` samples, interpolated piecewise
    linearly, or a callable returning ``z'(t)``; the callable form needs
    ``tgrid``.
    """
    if callable(path):
        if tgrid is None:
            raise ValueError("a derivative callable needs an explicit time grid")
        times = np.asarray(tgrid, dtype=float)
        zdot = path
    else:
        times, points = path
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float).reshape(times.size, -1)
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        vel = np.diff(points, axis=0) / np.diff(times)[:, None]

        def zdot(t, _times=times, _vel=vel):
            k = min(max(int(np.searchsorted(_times, t, side="right")) - 1, 0), _vel.shape[0] - 1)
            return _vel[k]

        if tgrid is not None:
            times = np.union1d(times, np.asarray(tgrid, dtype=float))
    stepper = _PiecewiseSmooth(V, times, zdot, tol, min_step) if not callable(path) else \
        _SmoothStepper(V, times, zdot, tol, min_step)
    probes = _default_probes(V.n) if probes is None else np.asarray(probes, float).reshape(-1, V.n)
    return FlowSolution(V, times, stepper, "smooth", probes=probes, info={"tol": tol})


class _PiecewiseSmooth(_SmoothStepper):
    # velocity is constant on each interval
    def _coeff(self, k, s):
        dt = self.times[k + 1] - self.times[k]
        return np.atleast_1d(self.zdot(self.times[k] + 0.5 * dt)) * dt

    def _stage_table(self):
        return None

    def __call__(self, k, state, s0, s1):
        if s0 == s1:
            return state
        c = self._coeff(k, 0.5)
        if not np.any(c):
            return state
        return self._adaptive(k, state, s0, s1, [c] * 5)


def inverse_transform_data(flowsol: FlowSolution, t: float, x):
    """``(phi_t(x), J_x, H_x)`` with ``J_x = D phi_t^{-1}`` and ``H_x = D^2 phi_t^{-1}`` at ``phi_t(x)``."""
    if t > flowsol.T * (1 + 1e-12) + 1e-14 or t < flowsol.times[0] - 1e-14:
        raise FlowRangeError(f"time {t} outside flow range [0, {flowsol.T}]")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    y = flowsol.forward(t, x.reshape(-1, flowsol.n))
    _, J, H = flowsol.inverse_derivatives(t, y)
    if single:
        return y[0], J[0], H[0]
    return y, J, H
