"""Level-2 rough path algebra.

Elements of the step-2 group are stored as ``(level1, level2)`` with
``level2`` the full (not only antisymmetric) second iterated integral.
A ``RoughDriver`` keeps, on a time grid, the running signature relative to
``t = 0``; increments are recovered with the group inverse.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("smooth-sampled", "brownian", "pure-area", "custom")


class DimensionError(ValueError):
    pass


class UnsupportedLevelError(ValueError):
    pass


@dataclass(frozen=True)
class SignatureElement:
    level1: np.ndarray
    level2: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.level1, dtype=float)
        m = np.asarray(self.level2, dtype=float)
        if a.ndim != 1 or m.shape != (a.size, a.size):
            raise DimensionError(f"level2 shape {m.shape} does not match level1 length {a.size}")
        object.__setattr__(self, "level1", a)
        object.__setattr__(self, "level2", m)

    @property
    def d(self) -> int:
        return self.level1.size

    @classmethod
    def identity(cls, d: int) -> "SignatureElement":
        return cls(np.zeros(d), np.zeros((d, d)))

    @classmethod
    def segment(cls, increment) -> "SignatureElement":
        """Signature of a straight line with the given increment."""
        a = np.asarray(increment, dtype=float)
        return cls(a, 0.5 * np.outer(a, a))

    @property
    def area(self) -> np.ndarray:
        return 0.5 * (self.level2 - self.level2.T)

    def inverse(self) -> "SignatureElement":
        a = self.level1
        return SignatureElement(-a, -self.level2 + np.outer(a, a))

    def __mul__(self, other: "SignatureElement") -> "SignatureElement":
        return chen_concat(self, other)


def chen_concat(g1: SignatureElement, g2: SignatureElement) -> SignatureElement:
    if g1.d != g2.d:
        raise DimensionError(f"cannot concatenate elements of dimension {g1.d} and {g2.d}")
    return SignatureElement(g1.level1 + g2.level1,
                            g1.level2 + g2.level2 + np.outer(g1.level1, g2.level1))


def shuffle_defect(level1: np.ndarray, level2: np.ndarray) -> float:
    """max |level2 + level2^T - level1 (x) level1| over all stored points."""
    level1 = np.atleast_2d(level1)
    level2 = level2.reshape(level1.shape[0], level1.shape[1], level1.shape[1])
    sym = level2 + np.swapaxes(level2, 1, 2)
    return float(np.max(np.abs(sym - np.einsum("ti,tj->tij", level1, level1)), initial=0.0))


@dataclass(frozen=True)
class MeshSpec:
    T: float = 1.0
    k: int = 8
    loop_points: int = 32

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("dyadic level k must be >= 0")
        if self.loop_points < 8 or self.loop_points % 2:
            raise ValueError("loop_points must be an even integer >= 8")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(2 ** self.k + 1) / 2 ** self.k


@dataclass(frozen=True, eq=False)
class RoughDriver:
    """Time-gridded level-2 path.

    ``level1[k]`` and ``level2[k]`` hold the signature over ``[0, times[k]]``.
    """

    times: np.ndarray
    level1: np.ndarray
    level2: np.ndarray
    p: float = 2.5
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        a = np.asarray(self.level1, dtype=float)
        m = np.asarray(self.level2, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a driver needs at least two grid times")
        if np.any(np.diff(t) <= 0):
            raise ValueError("driver times must be strictly increasing")
        if a.shape[0] != t.size or m.shape != (t.size, a.shape[1], a.shape[1]):
            raise DimensionError("level arrays do not match the time grid")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.p >= 3:
            raise UnsupportedLevelError("only level-2 drivers (p < 3) are supported")
        if self.kind not in KINDS:
            raise ValueError(f"unknown driver kind {self.kind!r}")
        for name, arr in (("times", t), ("level1", a), ("level2", m)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.level1.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def __len__(self):
        return self.times.size

    def element(self, k: int) -> SignatureElement:
        return SignatureElement(self.level1[k], self.level2[k])

    def increment(self, s_idx: int, t_idx: int) -> SignatureElement:
        """Group increment over ``[times[s_idx], times[t_idx]]``."""
        a_s, a_t = self.level1[s_idx], self.level1[t_idx]
        da = a_t - a_s
        m = self.level2[t_idx] - self.level2[s_idx] - np.outer(a_s, da)
        return SignatureElement(da, m)

    def increments(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-interval increments, arrays of shape (K, d) and (K, d, d)."""
        a = self.level1
        da = np.diff(a, axis=0)
        m = np.diff(self.level2, axis=0) - np.einsum("ki,kj->kij", a[:-1], da)
        return da, m

    def at(self, t: float) -> SignatureElement:
        """Signature over ``[0, t]``.

        Inside a grid interval the increment ``(a, M)`` is interpolated as
        ``(s a, s^2/2 a(x)a + s Anti(M))``; exact for chord segments.
        """
        if t < self.times[0] - 1e-14 or t > self.T + 1e-12 * max(1.0, self.T):
            raise ValueError(f"time {t} outside driver range [{self.times[0]}, {self.T}]")
        k = int(np.searchsorted(self.times, t, side="left"))
        if k < self.times.size and t == self.times[k]:
            return self.element(k)
        k = min(max(k - 1, 0), self.times.size - 2)
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        inc = self.increment(k, k + 1)
        part = SignatureElement(s * inc.level1,
                                0.5 * s * s * np.outer(inc.level1, inc.level1) + s * inc.area)
        return chen_concat(self.element(k), part)

    def resample(self, times) -> "RoughDriver":
        times = np.asarray(times, dtype=float)
        els = [self.at(t) for t in times]
        return RoughDriver(times, np.array([g.level1 for g in els]),
                           np.array([g.level2 for g in els]), self.p, self.kind, dict(self.meta))

    def reversed(self) -> "RoughDriver":
        """Time reversal ``s -> T - s`` (increments replaced by group inverses)."""
        da, m = self.increments()
        inv1 = -da[::-1]
        inv2 = (-m + np.einsum("ki,kj->kij", da, da))[::-1]
        times = self.T - self.times[::-1]
        return from_increments(times, inv1, inv2, p=self.p, kind=self.kind)

    def shuffle_defect(self) -> float:
        return shuffle_defect(self.level1, self.level2)

    def to_json(self) -> str:
        def enc(x):
            return json.loads(json.dumps(np.asarray(x).tolist()))

        doc = {"d": self.d, "p": self.p, "kind": self.kind,
               "times": enc(self.times), "level1": enc(self.level1), "level2": enc(self.level2)}
        return _dump17(doc)

    @classmethod
    def from_json(cls, text: str) -> "RoughDriver":
        doc = json.loads(text)
        drv = cls(np.array(doc["times"]), np.array(doc["level1"]).reshape(-1, doc["d"]),
                  np.array(doc["level2"]).reshape(-1, doc["d"], doc["d"]),
                  float(doc["p"]), doc.get("kind", "custom"))
        return drv


def _dump17(obj) -> str:
    # repr of a Python float is the shortest round-tripping form (<= 17 digits)
    def fmt(x):
        if isinstance(x, float):
            return format(x, ".17g")
        if isinstance(x, list):
            return "[" + ",".join(fmt(v) for v in x) + "]"
        if isinstance(x, dict):
            return "{" + ",".join(json.dumps(k) + ":" + fmt(v) for k, v in x.items()) + "}"
        return json.dumps(x)

    return fmt(obj)


def from_increments(times, inc1, inc2, p: float = 2.5, kind: str = "custom") -> RoughDriver:
    """Chain per-interval increments by the Chen product."""
    inc1 = np.asarray(inc1, dtype=float)
    inc2 = np.asarray(inc2, dtype=float)
    K, d = inc1.shape
    level1 = np.zeros((K + 1, d))
    level2 = np.zeros((K + 1, d, d))
    for k in range(K):
        level1[k + 1] = level1[k] + inc1[k]
        level2[k + 1] = level2[k] + inc2[k] + np.outer(level1[k], inc1[k])
    return RoughDriver(np.asarray(times, dtype=float), level1, level2, p, kind)


def lift_smooth(times, points, p: float = 2.5, kind: str = "smooth-sampled") -> RoughDriver:
    """Lift the piecewise-linear interpolation of sampled points."""
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if times.size < 2 or points.shape[0] != times.size:
        raise ValueError("need >= 2 samples with one time per sample")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")
    da = np.diff(points, axis=0)
    chained = from_increments(times, da, 0.5 * np.einsum("ki,kj->kij", da, da), p=p, kind=kind)
    # level 1 straight from the samples, so traces agree exactly at sample times
    drv = RoughDriver(times, points - points[0], chained.level2, p, kind)
    if np.any(points[0] != 0):
        # signatures only see increments; keep the start point for trace queries
        drv.meta["origin"] = points[0].tolist()
    return drv


def identity_driver(d: int, T: float = 1.0, steps: int = 1, p: float = 2.5) -> RoughDriver:
    times = T * np.arange(steps + 1) / steps
    return RoughDriver(times, np.zeros((steps + 1, d)), np.zeros((steps + 1, d, d)), p, "custom")


def pure_area_driver(T: float = 1.0, steps: int = 64, d: int = 2, i: int = 0, j: int = 1,
                     rate: float = math.pi, p: float = 2.5) -> RoughDriver:
    """Zero path with area ``A^{ij}(t) = rate * t``."""
    if i == j:
        raise ValueError("area plane needs two distinct axes")
    times = T * np.arange(steps + 1) / steps
    level2 = np.zeros((steps + 1, d, d))
    level2[:, i, j] = rate * times
    level2[:, j, i] = -rate * times
    return RoughDriver(times, np.zeros((steps + 1, d)), level2, p, "pure-area")


def sample_brownian(seed: int, d: int, mesh: MeshSpec, p: float = 2.5) -> RoughDriver:
    """Brownian path on the dyadic mesh, lifted by chords (Stratonovich level 2)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    times = mesh.times
    steps = rng.standard_normal((times.size - 1, d)) * np.sqrt(np.diff(times))[:, None]
    points = np.vstack([np.zeros(d), np.cumsum(steps, axis=0)])
    drv = lift_smooth(times, points, p=p, kind="brownian")
    drv.meta.update(seed=int(seed), level=mesh.k)
    return drv


def _mesh_indices(fine: RoughDriver, mesh_times: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(fine.times, mesh_times)
    idx = np.clip(idx, 0, fine.times.size - 1)
    tol = 1e-12 * max(1.0, fine.T)
    lower = np.clip(idx - 1, 0, None)
    idx = np.where(np.abs(fine.times[lower] - mesh_times) < np.abs(fine.times[idx] - mesh_times), lower, idx)
    if np.any(np.abs(fine.times[idx] - mesh_times) > tol):
        raise ValueError("fine driver grid does not refine the requested dyadic mesh")
    return idx


def piecewise_linear_driver(fine: RoughDriver, k: int) -> RoughDriver:
    """Chord lift through the level-1 values of ``fine`` on the level-k dyadic mesh."""
    mesh_times = fine.times[0] + (fine.T - fine.times[0]) * np.arange(2 ** k + 1) / 2 ** k
    idx = _mesh_indices(fine, mesh_times)
    if idx.size == fine.times.size:
        return fine if _is_chord_lift(fine) else lift_smooth(fine.times, fine.level1, fine.p, fine.kind)
    drv = lift_smooth(fine.times[idx], fine.level1[idx], p=fine.p, kind=fine.kind)
    drv.meta.update(fine.meta)
    drv.meta["level"] = k
    return drv


def _is_chord_lift(drv: RoughDriver) -> bool:
    da, m = drv.increments()
    return bool(np.allclose(m, 0.5 * np.einsum("ki,kj->kij", da, da), rtol=1e-12, atol=1e-14))


def twisted_driver(fine: RoughDriver, mesh: MeshSpec, i: int, j: int, loops: bool = True) -> RoughDriver:
    """Chords on the mesh plus one circular loop of area ``dt`` per interval.

    Each mesh interval ``[t_m, t_m + dt]`` is traversed as: chord during the first
    half, then a radial spoke of length ``r`` along ``e_i``, a counter-clockwise
    regular ``loop_points``-gon in the ``(i, j)`` plane centred at the chord's end
    point, and the spoke back. ``r`` is chosen so the polygon encloses area ``dt``
    exactly (a circle of radius ``sqrt(dt / pi)`` would give slightly less). Centring the loop
    cancels its third-level moment, so the only net effect is the area ``dt``.
    With ``loops=False`` the result is the plain chord lift.
    """
    if fine.d < 2:
        raise ValueError("twisted approximations need d >= 2")
    if i == j or not (0 <= i < fine.d and 0 <= j < fine.d):
        raise ValueError("twist plane needs two distinct valid axes")
    if not loops:
        return piecewise_linear_driver(fine, mesh.k)
    mesh_times = fine.times[0] + (fine.T - fine.times[0]) * np.arange(2 ** mesh.k + 1) / 2 ** mesh.k
    idx = _mesh_indices(fine, mesh_times)
    base = fine.level1[idx]
    m = mesh.loop_points
    theta = 2 * np.pi * np.arange(m + 1) / m
    poly = 0.5 * m * math.sin(2 * math.pi / m)
    # fractions of the loop half-interval: spoke, m circle edges, spoke
    frac = np.concatenate([[1.0], 1.0 + np.arange(1, m + 1), [m + 2.0]]) / (m + 2.0)
    times, pts = [mesh_times[0]], [base[0]]
    for q in range(mesh_times.size - 1):
        t0, t1 = mesh_times[q], mesh_times[q + 1]
        dt = t1 - t0
        r = math.sqrt(dt / poly)
        tm = t0 + 0.5 * dt
        times.append(tm)
        pts.append(base[q + 1])
        loop = np.repeat(base[q + 1][None, :], m + 2, axis=0)
        loop[:-1, i] += r * np.cos(theta)
        loop[:-1, j] += r * np.sin(theta)
        loop[:-1, j][[0, -1]] = base[q + 1][j]
        times.extend(tm + 0.5 * dt * frac)
        pts.extend(loop)
        times[-1] = t1
    drv = lift_smooth(np.array(times), np.array(pts), p=fine.p, kind="custom")
    drv.meta.update(twisted=(i, j), level=mesh.k, loop_points=m)
    return drv


def augment_with_time(drv: RoughDriver) -> RoughDriver:
    """Append a channel equal to ``t`` (chord-wise cross integrals)."""
    da, m = drv.increments()
    dt = np.diff(drv.times)
    K, d = da.shape
    inc1 = np.hstack([da, dt[:, None]])
    inc2 = np.zeros((K, d + 1, d + 1))
    inc2[:, :d, :d] = m
    inc2[:, :d, d] = 0.5 * da * dt[:, None]
    inc2[:, d, :d] = 0.5 * da * dt[:, None]
    inc2[:, d, d] = 0.5 * dt ** 2
    out = from_increments(drv.times, inc1, inc2, p=drv.p, kind="custom")
    out.meta.update(drv.meta)
    out.meta["time_channel"] = d
    return out


# ---------------------------------------------------------------- p-variation

def _pair_norms(X: RoughDriver, Y: RoughDriver, j: int) -> np.ndarray:
    """Matrix of |X^{(level)}_{s,t} - Y^{(level)}_{s,t}| for grid indices s < t."""
    a = X.level1 - Y.level1
    if j == 1:
        diff = a[None, :, :] - a[:, None, :]
        return np.sqrt(np.sum(diff ** 2, axis=-1))
    n = X.times.size
    out = np.zeros((n, n))
    for s in range(n - 1):
        dax = X.level1[s + 1:] - X.level1[s]
        day = Y.level1[s + 1:] - Y.level1[s]
        mx = X.level2[s + 1:] - X.level2[s] - np.einsum("i,kj->kij", X.level1[s], dax)
        my = Y.level2[s + 1:] - Y.level2[s] - np.einsum("i,kj->kij", Y.level1[s], day)
        out[s, s + 1:] = np.sqrt(np.sum((mx - my) ** 2, axis=(1, 2)))
    return out


def _pvar_dp(dist: np.ndarray, p: float) -> float:
    n = dist.shape[0]
    best = np.zeros(n)
    w = dist ** p
    for t in range(1, n):
        best[t] = np.max(best[:t] + w[:t, t])
    return float(best[-1])


def p_variation_distance(X: RoughDriver, Y: RoughDriver, p: float | None = None) -> float:
    """Level-2 p-variation distance restricted to grid partitions, exponent ``p`` at both levels.

    ``max_j (sup_D sum |X^{(j)}_{t_i,t_{i+1}} - Y^{(j)}_{t_i,t_{i+1}}|^p)^{1/p}`` with the
    supremum taken over partitions drawn from the common refinement of both grids
    (dynamic programming, O(n^2) per level), hence a lower bound on the continuum
    value. Tensor norms are Euclidean (Frobenius).
    """
    p = X.p if p is None else float(p)
    if p < 1:
        raise ValueError("p must be >= 1")
    if p >= 3:
        raise UnsupportedLevelError("level-2 distance requires p < 3")
    if X.d != Y.d:
        raise DimensionError("drivers have different dimensions")
    if not np.isclose(X.T, Y.T) or not np.isclose(X.times[0], Y.times[0]):
        raise ValueError("drivers must share the time interval")
    grid = np.union1d(X.times, Y.times)
    # collapse near-duplicates from float noise
    keep = np.concatenate([[True], np.diff(grid) > 1e-13 * max(1.0, grid[-1])])
    grid = grid[keep]
    Xr = X if np.array_equal(grid, X.times) else X.resample(grid)
    Yr = Y if np.array_equal(grid, Y.times) else Y.resample(grid)
    levels = [1, 2] if p >= 2 else [1]
    vals = [_pvar_dp(_pair_norms(Xr, Yr, j), p) ** (1.0 / p) for j in levels]
    return max(vals)


def sup_trace_distance(X: RoughDriver, Y: RoughDriver) -> float:
    """sup over the common grid of |level1_X(t) - level1_Y(t)|."""
    grid = np.union1d(X.times, Y.times)
    a = np.array([X.at(t).level1 for t in grid])
    b = np.array([Y.at(t).level1 for t in grid])
    return float(np.max(np.linalg.norm(a - b, axis=1)))
