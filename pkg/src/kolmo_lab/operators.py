"""Operator data and validation of the structural assumptions.

An operator is determined by the diffusion coefficient A0 on the first block,
ellipticity bounds, the constant drift matrix B (carried by the group), the
lower order coefficients b, c, the source f and the integrability exponent q.
The checks here validate ellipticity, the canonical shape of B, the rank
condition for hypoellipticity and its Gramian-positivity counterpart, and the
integrability/divergence requirements on the lower order terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import Group, GroupPoint

__all__ = [
    "OperatorSpec",
    "ValidationReport",
    "validate_h1",
    "validate_b_canonical",
    "hormander_rank",
    "gramian",
    "validate_h3",
]

RANK_RTOL = 1e-10  # singular values below RANK_RTOL * sigma_max count as zero


@dataclass
class ValidationReport:
    name: str
    ok: bool
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


@dataclass
class OperatorSpec:
    """Everything defining the operator: diffusion block, drift, lower order terms.

    ``A0`` is either a constant (m0 x m0) matrix or a callable ``A0(x, t)``
    returning one.  ``b`` maps (x, t) to an R^{m0} vector; ``c`` and ``f`` are
    scalar fields.  ``div_b`` may supply an analytic divergence; otherwise it
    is estimated by central differences.
    """

    group: Group
    lam: float = 1.0
    Lam: float = 1.0
    A0: np.ndarray | Callable = None
    b: Callable | None = None
    div_b: Callable | None = None
    c: Callable | None = None
    f: Callable | None = None
    q: float = 6.0

    def __post_init__(self):
        if self.Lam < self.lam:
            raise ValueError(f"Lambda={self.Lam} must be >= lambda={self.lam}")
        if self.q <= 1:
            raise ValueError(f"integrability exponent must exceed 1, got {self.q}")
        if self.A0 is None:
            self.A0 = np.eye(self.m0)

    @property
    def m0(self) -> int:
        return self.group.structure.m[0]

    def a0_at(self, x, t) -> np.ndarray:
        A = self.A0(x, t) if callable(self.A0) else self.A0
        return np.asarray(A, dtype=float)

    def a0_embedded(self, x=None, t=0.0) -> np.ndarray:
        """A0 padded to N x N (zero outside the first block)."""
        N = self.group.structure.N
        out = np.zeros((N, N))
        x = np.zeros(N) if x is None else x
        out[: self.m0, : self.m0] = self.a0_at(x, t)
        return out

    def q_threshold(self) -> float:
        return 0.75 * (self.group.structure.Q + 2)


def validate_h1(spec: OperatorSpec, sample_points: list[GroupPoint]) -> ValidationReport:
    """Ellipticity on the first block: lambda <= eig(A0) <= Lambda at samples."""
    if not sample_points:
        raise ValueError("need at least one sample point")
    sym_defect = 0.0
    eig_lo, eig_hi = np.inf, -np.inf
    for z in sample_points:
        A = spec.a0_at(z.x, z.t)
        sym_defect = max(sym_defect, np.abs(A - A.T).max())
        w = np.linalg.eigvalsh(0.5 * (A + A.T))
        eig_lo = min(eig_lo, w[0])
        eig_hi = max(eig_hi, w[-1])
    ok = (
        sym_defect <= 1e-12
        and eig_lo >= spec.lam - 1e-12
        and eig_hi <= spec.Lam + 1e-12
    )
    return ValidationReport(
        "h1",
        ok,
        {
            "min_eig": float(eig_lo),
            "max_eig": float(eig_hi),
            "symmetry_defect": float(sym_defect),
            "lambda": spec.lam,
            "Lambda": spec.Lam,
            "n_samples": len(sample_points),
        },
    )


def validate_b_canonical(B: np.ndarray, structure) -> ValidationReport:
    """Check the canonical sparsity pattern and full rank of the sub-diagonal blocks."""
    B = np.asarray(B, dtype=float)
    N = structure.N
    if B.shape != (N, N):
        return ValidationReport("b_canonical", False, {"reason": "shape mismatch"})
    sl = structure.block_slices()
    nblocks = len(structure.m)
    pattern_ok = True
    off_pattern = 0.0
    ranks = []
    for i in range(nblocks):
        for j in range(nblocks):
            blk = B[sl[i], sl[j]]
            if i == j + 1:
                s = np.linalg.svd(blk, compute_uv=False)
                rank = int(np.sum(s > RANK_RTOL * max(s[0], 1e-300)))
                ranks.append(rank)
            else:
                off_pattern = max(off_pattern, np.abs(blk).max(initial=0.0))
    if off_pattern > 1e-14:
        pattern_ok = False
    ranks_ok = all(r == structure.m[k + 1] for k, r in enumerate(ranks))
    return ValidationReport(
        "b_canonical",
        pattern_ok and ranks_ok,
        {
            "pattern_ok": pattern_ok,
            "off_pattern_max": float(off_pattern),
            "block_ranks": ranks,
            "required_ranks": list(structure.m[1:]),
        },
    )


def _embedding(structure) -> np.ndarray:
    """N x m0 matrix of the first-block coordinate directions."""
    N, m0 = structure.N, structure.m[0]
    E = np.zeros((N, m0))
    E[:m0, :m0] = np.eye(m0)
    return E


def hormander_rank(B: np.ndarray, structure) -> bool:
    """Rank condition for the principal operator with constant diffusion block.

    True iff the controllability matrix [Ebar, B Ebar, ..., B^{N-1} Ebar]
    has full rank N, which is equivalent to hypoellipticity of the principal
    part and to positivity of the Gramian.
    """
    B = np.asarray(B, dtype=float)
    Ebar = _embedding(structure)
    cols = [Ebar]
    P = Ebar
    for _ in range(structure.N - 1):
        P = B @ P
        cols.append(P)
    K = np.hstack(cols)
    s = np.linalg.svd(K, compute_uv=False)
    return bool(np.sum(s > RANK_RTOL * max(s[0], 1e-300)) == structure.N)


def gramian(
    group: Group, t: float, A0: np.ndarray | None = None
) -> tuple[np.ndarray, bool]:
    """Covariance matrix C(t) = int_0^t E(s) A0 E(s)^T ds and its positivity.

    A0 is the N x N embedded constant diffusion block (identity block by
    default).  For nilpotent B the integrand is polynomial in s, so the
    Gauss-Legendre rule with 2 kappa + 4 nodes is exact; otherwise composite
    panels are refined until stable.
    """
    N = group.structure.N
    if A0 is None:
        A0 = np.zeros((N, N))
        A0[: group.structure.m[0], : group.structure.m[0]] = np.eye(
            group.structure.m[0]
        )
    A0 = np.asarray(A0, dtype=float)
    if t == 0.0:
        return np.zeros((N, N)), False

    def quad(n_nodes, panels=1):
        nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
        C = np.zeros((N, N))
        edges = np.linspace(0.0, t, panels + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            s = 0.5 * (b - a) * nodes + 0.5 * (a + b)
            w = 0.5 * (b - a) * weights
            for si, wi in zip(s, w):
                E = group.E(si)
                C += wi * (E @ A0 @ E.T)
        return C

    if group._nilpotent:
        C = quad(2 * group.structure.kappa + 4)
    else:
        C = quad(12, panels=4)
        for panels in (8, 16, 32):
            C2 = quad(12, panels=panels)
            if np.abs(C2 - C).max() <= 1e-12 * max(1.0, np.abs(C2).max()):
                C = C2
                break
            C = C2
    C = 0.5 * (C + C.T)
    if t < 0:
        return C, False
    w = np.linalg.eigvalsh(C)
    is_positive = bool(w[0] > RANK_RTOL * max(w[-1], 1e-300))
    return C, is_positive


def validate_h3(spec: OperatorSpec, sample_points: list[GroupPoint]) -> ValidationReport:
    """Integrability exponent above the threshold and div b >= 0 at samples."""
    threshold = spec.q_threshold()
    q_ok = spec.q > threshold
    div_min = np.inf
    if spec.b is not None:
        for z in sample_points:
            if spec.div_b is not None:
                d = float(spec.div_b(z.x, z.t))
            else:
                d = _divergence_fd(spec, z)
            div_min = min(div_min, d)
        div_ok = div_min >= -1e-10
    else:
        div_min = 0.0
        div_ok = True
    return ValidationReport(
        "h3",
        q_ok and div_ok,
        {
            "q": spec.q,
            "q_threshold": threshold,
            "q_ok": q_ok,
            "div_b_min": float(div_min),
            "div_ok": div_ok,
        },
    )


def _divergence_fd(spec: OperatorSpec, z: GroupPoint, step: float = 1e-5) -> float:
    """Central-difference divergence of b in the first m0 coordinates."""
    total = 0.0
    for i in range(spec.m0):
        xp = z.x.copy()
        xm = z.x.copy()
        xp[i] += step
        xm[i] -= step
        bp = np.asarray(spec.b(xp, z.t), dtype=float)
        bm = np.asarray(spec.b(xm, z.t), dtype=float)
        total += (bp[i] - bm[i]) / (2 * step)
    return float(total)
