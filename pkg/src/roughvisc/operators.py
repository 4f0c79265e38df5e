"""Second-order operators F(t, x, p, X), their flow transforms, and sampled checks.

Coefficient callables are batched over points ``x`` of shape ``(N, n)``:

=============  ===============================  ==========================
kind           sigma                            b
=============  ===============================  ==========================
linear         sigma(t, x) -> (N, n, n')        b(t, x) -> (N, n)
hjb            sigma(t, x, g)                   b(t, x, g)
isaacs         sigma(t, x, beta, g)             b(t, x, beta, g)
quasilinear    sigma(t, x, p) -> (N, n, n')     b(t, x, p) -> (N,)   (scalar)
custom         ``func(t, x, p, X) -> (N,)``
=============  ===============================  ==========================

``F = Tr[sigma sigma^T X] + b . p`` for the linear branches, ``inf`` over the
control set ``controls`` for hjb, ``sup`` over ``outer_controls`` of ``inf`` over
``controls`` for isaacs.

The transform by a flow phi uses ``J = D phi_t^{-1}`` and ``H = D^2 phi_t^{-1}``
at ``phi_t(x)``; the Hessian contraction is ``<p, H>_{ij} = sum_k p_k H^k_{ij}``
with ``H^k`` the Hessian of the k-th component of ``phi_t^{-1}``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .flow import FlowSolution, inverse_transform_data

OPERATOR_KINDS = ("linear", "quasilinear", "hjb", "isaacs", "custom")


class OperatorError(ValueError):
    pass


def _batch(t, x, p, X, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, n)
    N = x.shape[0]
    p = np.broadcast_to(np.asarray(p, dtype=float).reshape(-1, n), (N, n))
    X = np.broadcast_to(np.asarray(X, dtype=float).reshape(-1, n, n), (N, n, n))
    return x, p, X, single


@dataclass(frozen=True, eq=False)
class Operator:
    kind: str
    n: int
    sigma: Optional[Callable] = None
    b: Optional[Callable] = None
    controls: Sequence = ()
    outer_controls: Sequence = ()
    func: Optional[Callable] = None
    c1: Optional[float] = None
    b_lip: float = 0.0
    trivial: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise OperatorError(f"unknown operator kind {self.kind!r}")
        if self.kind == "custom" and self.func is None:
            raise OperatorError("custom operators need func(t, x, p, X)")
        if self.kind in ("hjb", "isaacs") and len(self.controls) == 0:
            raise OperatorError("control set is empty")
        if self.kind == "isaacs" and len(self.outer_controls) == 0:
            raise OperatorError("outer control set is empty")

    # linear-in-(p, X) branches ---------------------------------------------

    def branches(self, t, x):
        """Nested list ``[[(a, b), ...], ...]`` (outer sup, inner inf) of diffusion/drift arrays."""
        if self.kind == "linear":
            return [[_ab(self.sigma(t, x), self.b(t, x))]]
        if self.kind == "hjb":
            return [[_ab(self.sigma(t, x, g), self.b(t, x, g)) for g in self.controls]]
        if self.kind == "isaacs":
            return [[_ab(self.sigma(t, x, be, g), self.b(t, x, be, g)) for g in self.controls]
                    for be in self.outer_controls]
        raise OperatorError(f"{self.kind} operators have no linear branches")

    def quasilinear_terms(self, t, x, p):
        s = self.sigma(t, x, p)
        return np.einsum("Nim,Njm->Nij", s, s), self.b(t, x, p)

    def eval(self, t, x, p, X):
        x, p, X, single = _batch(t, x, p, X, self.n)
        if self.kind == "custom":
            out = np.asarray(self.func(t, x, p, X), dtype=float)
        elif self.kind == "quasilinear":
            a, bs = self.quasilinear_terms(t, x, p)
            out = np.einsum("Nij,Nij->N", a, X) + bs
        else:
            out = _reduce_branches(self.branches(t, x), p, X)
        return out[0] if single else out


def _ab(s, b):
    s = np.asarray(s, dtype=float)
    return np.einsum("Nim,Njm->Nij", s, s), np.asarray(b, dtype=float)


def _reduce_branches(branches, p, X):
    outer = []
    for row in branches:
        vals = [np.einsum("Nij,Nij->N", a, X) + np.einsum("Ni,Ni->N", b, p) for a, b in row]
        outer.append(np.min(vals, axis=0))
    return np.max(outer, axis=0)


def eval_operator(F, t, x, p, X):
    """F(t, x, p, X); ``x`` may be a single point or a batch."""
    X = np.asarray(X, dtype=float)
    if not np.allclose(X, np.swapaxes(X, -1, -2)):
        raise OperatorError("X must be symmetric")
    return F.eval(t, x, p, X)


# ---------------------------------------------------------------- transform

@dataclass(frozen=True, eq=False)
class TransformedOperator:
    """``F^phi(t, x, p, X) = F(t, phi_t(x), J^T p, J^T X J + <p, H>)``.

    ``flow=None`` stands for the identity flow.
    """

    base: Operator
    flow: Optional[FlowSolution] = None

    @property
    def n(self):
        return self.base.n

    @property
    def kind(self):
        return self.base.kind

    @property
    def trivial(self):
        return self.base.trivial

    def flow_data(self, t, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if self.flow is None:
            N, n = x.shape
            return x, np.broadcast_to(np.eye(n), (N, n, n)), np.zeros((N, n, n, n))
        return inverse_transform_data(self.flow, t, x)

    def transformed_arguments(self, p, X, J, H):
        p2 = np.einsum("Nki,Nk->Ni", J, p)
        X2 = np.einsum("Nki,Nkl,Nlj->Nij", J, X, J) + np.einsum("Nk,Nkij->Nij", p, H)
        return p2, X2

    def eval(self, t, x, p, X, data=None):
        x, p, X, single = _batch(t, x, p, X, self.n)
        y, J, H = self.flow_data(t, x) if data is None else data
        p2, X2 = self.transformed_arguments(p, X, J, H)
        out = self.base.eval(t, y, p2, X2)
        return out[0] if single else out

    def branches(self, t, x, data=None):
        """Linear branches of F^phi: ``a^phi = J a J^T``, ``b^phi = J b + <a, H>``."""
        y, J, H = self.flow_data(t, x) if data is None else data
        out = []
        for row in self.base.branches(t, y):
            out.append([(np.einsum("Nki,Nij,Nlj->Nkl", J, a, J),
                         np.einsum("Nki,Ni->Nk", J, b) + np.einsum("Nij,Nkij->Nk", a, H))
                        for a, b in row])
        return out

    def quasilinear_terms(self, t, x, p, data=None):
        """``(a^phi(p), b^phi(p))`` with the scalar ``b^phi`` absorbing ``Tr[a <p, H>]``."""
        y, J, H = self.flow_data(t, x) if data is None else data
        p2 = np.einsum("Nki,Nk->Ni", J, p)
        a, bs = self.base.quasilinear_terms(t, y, p2)
        a_phi = np.einsum("Nki,Nij,Nlj->Nkl", J, a, J)
        return a_phi, bs + np.einsum("Nij,Nk,Nkij->N", a, p, H)


def transform_operator(F: Operator, flow: FlowSolution) -> TransformedOperator:
    if flow is not None and flow.n != F.n:
        raise OperatorError(f"flow dimension {flow.n} does not match operator dimension {F.n}")
    return TransformedOperator(F, flow)


def linear_closed_form(F: Operator, flow: FlowSolution, t, x):
    """``(sigma^phi, b^phi)`` of a linear operator, written out component-wise."""
    if F.kind != "linear":
        raise OperatorError("closed-form transform only exists for the linear kind")
    y, J, H = inverse_transform_data(flow, t, np.asarray(x, dtype=float).reshape(-1, F.n))
    s = np.asarray(F.sigma(t, y), dtype=float)
    b = np.asarray(F.b(t, y), dtype=float)
    N, n, m = s.shape
    sig = np.zeros((N, n, m))
    bphi = np.zeros((N, n))
    for k in range(n):
        for mm in range(m):
            for i in range(n):
                sig[:, k, mm] += s[:, i, mm] * J[:, k, i]
        for i in range(n):
            bphi[:, k] += b[:, i] * J[:, k, i]
            for j in range(n):
                for mm in range(m):
                    bphi[:, k] += s[:, i, mm] * s[:, j, mm] * H[:, k, i, j]
    return sig, bphi


# ---------------------------------------------------------------- checks

def _random_symmetric(rng, N, n, scale):
    G = rng.standard_normal((N, n, n)) * scale
    return 0.5 * (G + np.swapaxes(G, 1, 2))


def _sample_times(F, rng, count):
    flow = getattr(F, "flow", None)
    T = flow.T if flow is not None else 1.0
    return np.sort(rng.uniform(0.0, T, count))


@dataclass
class EllipticityReport:
    samples: int
    violations: int
    worst: float
    witnesses: list = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0


def check_ellipticity(F, samples: int = 1000, seed: int = 0, box: float = 2.0,
                      scale: float = 1.0, times: int = 8, tol: float = 1e-10) -> EllipticityReport:
    """Sample F(t,x,p,A) <= F(t,x,p,A+B) for random PSD B = G G^T."""
    if samples <= 0:
        raise ValueError("sample count must be positive")
    rng = np.random.default_rng(seed)
    n = F.n
    ts = _sample_times(F, rng, times)
    per = [samples // times + (1 if i < samples % times else 0) for i in range(times)]
    violations, worst, wit = 0, 0.0, []
    for t, N in zip(ts, per):
        if N == 0:
            continue
        x = rng.uniform(-box, box, (N, n))
        p = rng.standard_normal((N, n)) * scale
        A = _random_symmetric(rng, N, n, scale)
        G = rng.standard_normal((N, n, n)) * scale
        B = np.einsum("Nij,Nkj->Nik", G, G)
        gap = F.eval(t, x, p, A) - F.eval(t, x, p, A + B)
        bad = gap > tol
        violations += int(bad.sum())
        if bad.any():
            worst = max(worst, float(gap.max()))
            k = int(np.argmax(gap))
            wit.append({"t": float(t), "x": x[k].tolist(), "gap": float(gap[k])})
    return EllipticityReport(samples, violations, worst, wit)


def matrix_inequality_feasible(X, Y, alpha: float, tol: float = 1e-12) -> bool:
    """``-3a I <= diag(X, -Y) <= 3a [[I, -I], [-I, I]]`` by eigenvalue test."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = X.shape[0]
    Z = np.zeros((2 * n, 2 * n))
    Z[:n, :n] = X
    Z[n:, n:] = -Y
    I = np.eye(n)
    K = np.block([[I, -I], [-I, I]])
    lower = np.linalg.eigvalsh(Z + 3 * alpha * np.eye(2 * n)).min()
    upper = np.linalg.eigvalsh(3 * alpha * K - Z).min()
    return bool(lower >= -tol and upper >= -tol)


@dataclass
class ModulusReport:
    samples: list
    theta_fit: list
    acceptance_rate: float
    starved: bool
    vanishing: bool

    def max_lhs(self):
        return max((s["lhs"] for s in self.samples), default=float("nan"))


def check_modulus(F, alphas: Sequence[float] = (1.0, 10.0, 100.0), samples: int = 200,
                  seed: int = 0, box: float = 2.0, t: float = 0.0, bins: int = 8,
                  max_draws: int = 200000) -> ModulusReport:
    """Sample F(t,x,a(x-x~),X) - F(t,x~,a(x-x~),Y) over feasible (X, Y) pairs.

    Pairs are drawn by rejection from random symmetric matrices of scale 3a,
    with (0, 0) always included. The envelope ``theta_fit`` is the maximum
    left-hand side per logarithmic bin of ``r = a|x-x~|^2 + |x-x~|``.
    """
    rng = np.random.default_rng(seed)
    n = F.n
    records = []
    draws = accepted = 0
    for alpha in alphas:
        for _ in range(samples):
            x = rng.uniform(-box, box, n)
            dx = rng.standard_normal(n) * 10 ** rng.uniform(-4, 0)
            xt = x - dx
            pairs = [(np.zeros((n, n)), np.zeros((n, n)))]
            for _try in range(50):
                draws += 1
                X = _random_symmetric(rng, 1, n, 3 * alpha)[0]
                Y = _random_symmetric(rng, 1, n, 3 * alpha)[0]
                if matrix_inequality_feasible(X, Y, alpha):
                    accepted += 1
                    pairs.append((X, Y))
                    break
                if draws > max_draws:
                    break
            p = alpha * (x - xt)
            r = alpha * float(dx @ dx) + float(np.linalg.norm(dx))
            for X, Y in pairs:
                lhs = float(F.eval(t, x, p, X) - F.eval(t, xt, p, Y))
                records.append({"alpha": float(alpha), "x": x.tolist(), "x_tilde": xt.tolist(),
                                "X": X.tolist(), "Y": Y.tolist(), "r": r, "lhs": lhs,
                                "bound": None})
    rate = accepted / max(draws, 1)
    starved = rate < 1e-4
    if starved:
        warnings.warn(f"matrix-inequality sampler starved (acceptance rate {rate:.1e})")
    rs = np.array([s["r"] for s in records])
    lh = np.array([s["lhs"] for s in records])
    edges = np.logspace(np.log10(rs.min()), np.log10(rs.max()) + 1e-12, bins + 1)
    env = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (rs >= lo) & (rs <= hi)
        env.append([float(np.sqrt(lo * hi)), float(lh[sel].max()) if sel.any() else float("nan")])
    top = max(max(e[1] for e in env if np.isfinite(e[1])), 0.0)
    first = next(e[1] for e in env if np.isfinite(e[1]))
    for s in records:
        s["bound"] = float(np.interp(s["r"], [e[0] for e in env], [max(e[1], 0.0) for e in env]))
    vanishing = bool(first <= 0.1 * top + 1e-12)
    return ModulusReport(records, env, rate, starved, vanishing)


def check_gradient_damping(F: Operator, c1: float, samples: int = 1000, seed: int = 0,
                           box: float = 2.0) -> int:
    """Count violations of |sigma(p) - sigma(q)| <= c1 |p - q| / (1 + |p| + |q|)."""
    if F.kind != "quasilinear":
        raise OperatorError("gradient damping only applies to quasilinear operators")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-box, box, (samples, F.n))
    p = rng.standard_normal((samples, F.n)) * 10 ** rng.uniform(-2, 2, (samples, 1))
    q = rng.standard_normal((samples, F.n)) * 10 ** rng.uniform(-2, 2, (samples, 1))
    lhs = np.linalg.norm(F.sigma(0.0, x, p) - F.sigma(0.0, x, q), axis=(1, 2))
    rhs = c1 * np.linalg.norm(p - q, axis=1) / (1 + np.linalg.norm(p, axis=1) + np.linalg.norm(q, axis=1))
    return int(np.sum(lhs > rhs + 1e-12))


# ---------------------------------------------------------------- constructors

def zero_operator(n: int) -> Operator:
    return Operator("linear", n, lambda t, x: np.zeros((x.shape[0], n, n)),
                    lambda t, x: np.zeros((x.shape[0], n)), trivial=True, name="zero")


def linear_operator(n: int, sigma: Callable, b: Optional[Callable] = None, name: str = "") -> Operator:
    if b is None:
        b = lambda t, x: np.zeros((x.shape[0], n))  # noqa: E731
    return Operator("linear", n, sigma, b, name=name)


def heat_operator(n: int, lam: float = 1.0) -> Operator:
    """``lam * Tr X`` (sigma = sqrt(lam) I)."""
    s = np.sqrt(lam) * np.eye(n)
    return linear_operator(n, lambda t, x: np.broadcast_to(s, (x.shape[0], n, n)).copy(),
                           name=f"heat({lam})")


def drift_operator(bvec) -> Operator:
    bvec = np.atleast_1d(np.asarray(bvec, dtype=float))
    n = bvec.size
    return Operator("linear", n, lambda t, x: np.zeros((x.shape[0], n, n)),
                    lambda t, x: np.broadcast_to(bvec, (x.shape[0], n)).copy(), name="drift")


def hjb_operator(n: int, sigma: Callable, b: Callable, controls: Sequence) -> Operator:
    return Operator("hjb", n, sigma, b, controls=tuple(controls), name="hjb")


def isaacs_operator(n: int, sigma: Callable, b: Callable, outer: Sequence, inner: Sequence) -> Operator:
    return Operator("isaacs", n, sigma, b, controls=tuple(inner), outer_controls=tuple(outer),
                    name="isaacs")


def quasilinear_example(n: int, lam: float = 1.0, bvec=None) -> Operator:
    """``sigma(p) = sqrt(lam) I / (1 + |p|^2)^(1/4)`` and scalar ``b(p) = bvec . p``.

    ``|sigma(p) - sigma(q)| <= c1 |p - q| / (1 + |p| + |q|)`` holds with ``c1 = 2 sqrt(lam n)``.
    """
    bvec = np.zeros(n) if bvec is None else np.asarray(bvec, dtype=float)
    eye = np.eye(n)

    def sigma(t, x, p):
        s = np.sqrt(lam) / (1.0 + np.sum(p ** 2, axis=1)) ** 0.25
        return s[:, None, None] * eye

    def b(t, x, p):
        return p @ bvec

    return Operator("quasilinear", n, sigma, b, c1=2.0 * np.sqrt(lam * n),
                    b_lip=float(np.linalg.norm(bvec)), name="quasilinear")
