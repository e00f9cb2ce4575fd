"""Homogeneous Lie group underlying degenerate Kolmogorov operators.

The state space is R^{N+1} with points z = (x, t).  The spatial variable is
split into blocks x = (x^(0), ..., x^(kappa)) of non-increasing sizes
m_0 >= m_1 >= ... >= m_kappa >= 1.  A strictly lower block triangular drift
matrix B defines the (non-commutative) composition

    (x, t) o (xi, tau) = (xi + E(tau) x, t + tau),     E(s) = exp(-s B),

and the anisotropic dilations scale block j by r^(2j+1) and time by r^2.
All operations here are pure; every value is immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelStructure",
    "Group",
    "GroupPoint",
    "build_structure",
    "canonical_b",
    "matrix_exp",
    "compose",
    "inverse",
    "dilate",
    "hom_norm",
    "hom_norm_1",
    "distance",
]

_NILPOTENT_TOL = 1e-14


@dataclass(frozen=True)
class ModelStructure:
    """Block layout and dilation exponents of the group."""

    kappa: int
    m: tuple[int, ...]
    N: int
    alpha: tuple[int, ...]
    Q: int

    def block_slices(self) -> list[slice]:
        """Index ranges of the blocks x^(0), ..., x^(kappa) inside x."""
        out, start = [], 0
        for size in self.m:
            out.append(slice(start, start + size))
            start += size
        return out


def build_structure(m) -> ModelStructure:
    """Build the block structure for block sizes m = [m_0, ..., m_kappa].

    The sizes must be positive and non-increasing.  Coordinate i in block j
    receives the dilation exponent alpha_i = 2j+1, and the spatial
    homogeneous dimension is Q = sum_j (2j+1) m_j.
    """
    m = [int(v) for v in m]
    if not m:
        raise ValueError("block size list must be nonempty")
    if any(v < 1 for v in m):
        raise ValueError(f"block sizes must be positive, got {m}")
    if any(m[j] < m[j + 1] for j in range(len(m) - 1)):
        raise ValueError(f"block sizes must be non-increasing, got {m}")
    kappa = len(m) - 1
    alpha = []
    for j, size in enumerate(m):
        alpha.extend([2 * j + 1] * size)
    return ModelStructure(
        kappa=kappa,
        m=tuple(m),
        N=sum(m),
        alpha=tuple(alpha),
        Q=sum((2 * j + 1) * size for j, size in enumerate(m)),
    )


def canonical_b(structure: ModelStructure, blocks=None) -> np.ndarray:
    """Canonical drift matrix: only sub-diagonal blocks B_1, ..., B_kappa.

    B_k has shape m_k x m_{k-1} and full rank m_k.  When ``blocks`` is None
    each B_k is the rank-m_k slab [I | 0].
    """
    N = structure.N
    B = np.zeros((N, N))
    sl = structure.block_slices()
    for k in range(1, len(structure.m)):
        mk, mk1 = structure.m[k], structure.m[k - 1]
        if blocks is None:
            Bk = np.zeros((mk, mk1))
            Bk[:, :mk] = np.eye(mk)
        else:
            Bk = np.asarray(blocks[k - 1], dtype=float)
            if Bk.shape != (mk, mk1):
                raise ValueError(f"block {k} must be {mk}x{mk1}, got {Bk.shape}")
        B[sl[k], sl[k - 1]] = Bk
    B.setflags(write=False)
    return B


def _nilpotency_index(B: np.ndarray) -> int | None:
    """Smallest k with B^k = 0 (within tolerance), or None if B is not nilpotent."""
    n = B.shape[0]
    P = np.eye(n)
    scale = max(np.abs(B).max(), 1.0)
    for k in range(1, n + 1):
        P = P @ B
        if np.abs(P).max() <= _NILPOTENT_TOL * scale**k:
            return k
    return None


def matrix_exp(B: np.ndarray, s: float) -> np.ndarray:
    """E(s) = exp(-s B).

    For nilpotent B (the canonical case) the power series terminates and is
    evaluated exactly; otherwise falls back to scipy's scaling-and-squaring.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError(f"B must be square, got shape {B.shape}")
    k = _nilpotency_index(B)
    if k is None:
        from scipy.linalg import expm

        return expm(-s * B)
    E = np.eye(B.shape[0])
    term = np.eye(B.shape[0])
    for i in range(1, k):
        term = term @ (-s * B) / i
        E = E + term
    return E


class Group:
    """The group (R^{N+1}, o, delta_r) for a fixed structure and drift matrix B."""

    def __init__(self, structure: ModelStructure, B: np.ndarray | None = None):
        self.structure = structure
        if B is None:
            B = canonical_b(structure)
        B = np.array(B, dtype=float)
        if B.shape != (structure.N, structure.N):
            raise ValueError(
                f"B must be {structure.N}x{structure.N}, got {B.shape}"
            )
        B.setflags(write=False)
        self.B = B
        self.trace_B = float(np.trace(B))
        # Powers of B up to the nilpotency index; E(s) is then a terminating
        # polynomial in s, evaluated exactly and vectorized over s.
        idx = _nilpotency_index(B)
        self._nilpotent = idx is not None
        if self._nilpotent:
            powers = [np.eye(structure.N)]
            for _ in range(1, idx):
                powers.append(powers[-1] @ B)
            self._B_powers = powers
        self._alpha = np.array(structure.alpha, dtype=float)

    # -- elementary maps -------------------------------------------------

    def E(self, s: float) -> np.ndarray:
        """Matrix E(s) = exp(-s B)."""
        if not self._nilpotent:
            from scipy.linalg import expm

            return expm(-s * self.B)
        E = np.zeros_like(self.B)
        c = 1.0
        for i, P in enumerate(self._B_powers):
            if i > 0:
                c *= -s / i
            E = E + c * P
        return E

    def apply_E(self, s, x) -> np.ndarray:
        """E(s) x, vectorized over rows of x and entries of s."""
        s = np.asarray(s, dtype=float)
        x = np.asarray(x, dtype=float)
        if not self._nilpotent:
            from scipy.linalg import expm

            if s.ndim == 0:
                return x @ expm(-s * self.B).T
            return np.stack([xi @ expm(-si * self.B).T for si, xi in zip(s, x)])
        out = np.zeros(np.broadcast_shapes(s[..., None].shape, x.shape))
        c = np.ones_like(s)
        for i, P in enumerate(self._B_powers):
            if i > 0:
                c = c * (-s / i)
            out = out + c[..., None] * (x @ P.T)
        return out

    def point(self, x, t: float) -> "GroupPoint":
        return GroupPoint(np.asarray(x, dtype=float), float(t), self)

    def origin(self) -> "GroupPoint":
        return self.point(np.zeros(self.structure.N), 0.0)

    # -- batch operations on raw (n, N) arrays ---------------------------

    def compose_xt(self, x1, t1, x2, t2):
        """(x1,t1) o (x2,t2) componentwise; arrays broadcast over rows."""
        return np.asarray(x2) + self.apply_E(t2, x1), np.asarray(t1) + np.asarray(t2)

    def inverse_xt(self, x, t):
        t = np.asarray(t, dtype=float)
        return -self.apply_E(-t, x), -t

    def dilate_xt(self, r, x, t):
        r = np.asarray(r, dtype=float)
        scale = r[..., None] ** self._alpha
        return np.asarray(x) * scale, np.asarray(t) * r**2

    def norm_xt(self, x, t) -> np.ndarray:
        """Anisotropic homogeneous norm, vectorized over rows of x.

        For z != 0 the norm is the unique r > 0 solving
        sum_i x_i^2 / r^(2 alpha_i) + t^2 / r^4 = 1.  The defining function is
        strictly decreasing in r, so we bisect; working in log(r) gives
        uniform relative accuracy across magnitudes.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = x.shape[0]
        out = np.zeros(n)
        nontrivial = (np.abs(x).max(axis=1) > 0) | (np.abs(t) > 0)
        if not np.any(nontrivial):
            return out
        xs, ts = x[nontrivial], t[nontrivial]
        hi = 1.0 + np.abs(xs).sum(axis=1) + np.sqrt(np.abs(ts))
        exps = 2.0 * self._alpha
        # Each term x_i^2 / r^(2 alpha_i) is evaluated as exp(2 log|x_i| -
        # 2 alpha_i log r); zero coordinates carry -inf and contribute 0, and
        # overflow to +inf keeps the correct sign of the defining function.
        with np.errstate(divide="ignore"):
            log_x2 = 2.0 * np.log(np.abs(xs))
            log_t2 = 2.0 * np.log(np.abs(ts))

        def g_positive(logr):
            with np.errstate(over="ignore", under="ignore"):
                val = np.exp(log_x2 - logr[:, None] * exps).sum(axis=1)
                val = val + np.exp(log_t2 - 4.0 * logr)
            return val > 1.0

        llo = np.full_like(hi, np.log(1e-300))
        lhi = np.log(hi)
        for _ in range(200):
            mid = 0.5 * (llo + lhi)
            high = g_positive(mid)
            llo = np.where(high, mid, llo)
            lhi = np.where(high, lhi, mid)
            if np.max(lhi - llo) < 1e-14:
                break
        out[nontrivial] = np.exp(0.5 * (llo + lhi))
        return out

    def distance_xt(self, x1, t1, x2, t2) -> np.ndarray:
        xi, ti = self.inverse_xt(x1, t1)
        xr, tr = self.compose_xt(xi, ti, x2, t2)
        return self.norm_xt(xr, tr)

    def same_as(self, other: "Group") -> bool:
        return self.structure.m == other.structure.m and np.array_equal(
            self.B, other.B
        )

    def __repr__(self):
        return f"Group(m={list(self.structure.m)}, Q={self.structure.Q})"


@dataclass(frozen=True)
class GroupPoint:
    """A point z = (x, t) attached to its group."""

    x: np.ndarray
    t: float
    group: Group = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.shape != (self.group.structure.N,):
            raise ValueError(
                f"x must have length {self.group.structure.N}, got {x.shape}"
            )
        if not (np.all(np.isfinite(x)) and math.isfinite(self.t)):
            raise ValueError("point coordinates must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    def as_array(self) -> np.ndarray:
        return np.append(self.x, self.t)


def _check_same_group(*points: GroupPoint) -> Group:
    g = points[0].group
    for p in points[1:]:
        if p.group is not g and not g.same_as(p.group):
            raise ValueError("points live on different group structures")
    return g


def compose(z: GroupPoint, zeta: GroupPoint) -> GroupPoint:
    """Group composition z o zeta = (zeta.x + E(zeta.t) z.x, z.t + zeta.t)."""
    g = _check_same_group(z, zeta)
    x, t = g.compose_xt(z.x, z.t, zeta.x, zeta.t)
    return GroupPoint(x, float(t), g)


def inverse(z: GroupPoint) -> GroupPoint:
    """Group inverse (x,t)^-1 = (-E(-t) x, -t)."""
    x, t = z.group.inverse_xt(z.x, z.t)
    return GroupPoint(x, float(t), z.group)


def dilate(r: float, z: GroupPoint) -> GroupPoint:
    """Anisotropic dilation: coordinate i scales by r^alpha_i, time by r^2."""
    if r <= 0:
        raise ValueError(f"dilation factor must be positive, got {r}")
    x, t = z.group.dilate_xt(float(r), z.x, z.t)
    return GroupPoint(x, float(t), z.group)


def hom_norm(z: GroupPoint) -> float:
    """Homogeneous norm of Definition type: level set of the anisotropic sphere."""
    return float(z.group.norm_xt(z.x[None, :], np.array([z.t]))[0])


def hom_norm_1(z: GroupPoint) -> float:
    """Equivalent 1-homogeneous comparison norm |t|^(1/2) + sum |x_i|^(1/alpha_i)."""
    alpha = np.array(z.group.structure.alpha, dtype=float)
    return float(np.sqrt(abs(z.t)) + (np.abs(z.x) ** (1.0 / alpha)).sum())


def distance(z: GroupPoint, w: GroupPoint) -> float:
    """Left-invariant quasi-distance d(z, w) = || z^-1 o w ||."""
    g = _check_same_group(z, w)
    return float(g.distance_xt(z.x[None, :], np.array([z.t]), w.x[None, :], np.array([w.t]))[0])
