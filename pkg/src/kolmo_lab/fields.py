"""Discrete scalar fields on box domains with the anisotropic calculus.

A GridField is a tensor grid over a space-time box with one refinement
parameter h: every axis carries ~2/h nodes, so the physical spacing of an
axis is proportional to its extent.  On dilated boxes the spacings then scale
exactly like the group dilations.  Central differences give the partial
gradient in the first block and the drift derivative; norms are Riemann sums
with the anisotropic cell volume; the negative-order norm is computed by a
slice-wise coercive solve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import Group

__all__ = [
    "GridField",
    "grid_axes",
    "sample",
    "d_m0",
    "drift_Y",
    "lp_norm",
    "sup_inf",
    "level_measure",
    "neg_sobolev_norm",
    "SmoothStep",
    "cutoff_chi",
    "CutoffPsi",
    "cutoff_psi",
    "Psi1",
    "cutoff_psi1",
    "save_grid",
    "load_grid",
]


class GridField:
    """Scalar values on a tensor grid (N spatial axes + time axis)."""

    def __init__(self, group: Group, axes, values, h: float | None = None):
        self.group = group
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        if len(self.axes) != group.structure.N + 1:
            raise ValueError("need one axis per spatial coordinate plus time")
        values = np.asarray(values, dtype=float)
        if values.shape != tuple(len(a) for a in self.axes):
            raise ValueError(
                f"value shape {values.shape} does not match axes "
                f"{tuple(len(a) for a in self.axes)}"
            )
        self.values = values
        self.h = h
        self.spacings = tuple(
            float(a[1] - a[0]) if len(a) > 1 else 1.0 for a in self.axes
        )
        self._points = None

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def with_values(self, values) -> "GridField":
        return GridField(self.group, self.axes, values, h=self.h)

    def node_points(self) -> np.ndarray:
        if self._points is None:
            mesh = np.meshgrid(*self.axes, indexing="ij")
            self._points = np.column_stack([m.ravel() for m in mesh])
        return self._points

    def flat_values(self) -> np.ndarray:
        return self.values.ravel()

    def coordinate_arrays(self):
        """Broadcastable coordinate arrays (X_1, ..., X_N, T) on the grid."""
        return np.meshgrid(*self.axes, indexing="ij")

    def interior_slices(self, width: int = 1):
        return tuple(slice(width, -width) for _ in self.axes)

    def region_mask(self, region=None) -> np.ndarray:
        if region is None:
            return np.ones(self.values.shape, dtype=bool)
        pts = self.node_points()
        mask = region.contains_xt(pts[:, :-1], pts[:, -1])
        return mask.reshape(self.values.shape)


def grid_axes(bounds, h: float):
    """Axes for the box bounds = (xlo, xhi, tlo, thi) at refinement h.

    Every axis gets round(2/h) + 1 nodes (at least 5), mirroring the unit
    cylinder diameter; halving h doubles the resolution on all axes.
    """
    xlo, xhi, tlo, thi = bounds
    n = int(round(2.0 / h)) + 1
    if n < 5:
        raise ValueError(f"h={h} too coarse: fewer than 5 nodes per axis")
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(np.atleast_1d(xlo), np.atleast_1d(xhi))]
    axes.append(np.linspace(tlo, thi, n))
    return axes


def sample(group: Group, fun, bounds, h: float) -> GridField:
    """Point-sample a function onto the tensor grid of the given box."""
    axes = grid_axes(bounds, h)
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.column_stack([m.ravel() for m in mesh[:-1]])
    T = mesh[-1].ravel()
    try:
        vals = np.asarray(fun(X, T), dtype=float)
        if vals.shape != T.shape:
            raise TypeError
    except (TypeError, ValueError, IndexError):
        vals = np.array([fun(x, t) for x, t in zip(X, T)], dtype=float)
    return GridField(group, axes, vals.reshape(mesh[0].shape), h=h)


def d_m0(u: GridField) -> list[GridField]:
    """Partial gradient in the first m0 axes by central differences.

    Second-order one-sided stencils at the edges keep the operator exact on
    quadratics everywhere.
    """
    m0 = u.group.structure.m[0]
    for i in range(m0):
        if len(u.axes[i]) < 3:
            raise ValueError("need at least 3 nodes per differentiated axis")
    return [
        u.with_values(np.gradient(u.values, u.spacings[i], axis=i, edge_order=2))
        for i in range(m0)
    ]


def drift_Y(u: GridField) -> GridField:
    """Drift derivative Yu = <B x, Du> - du/dt by central differences."""
    g = u.group
    N = g.structure.N
    mesh = u.coordinate_arrays()
    out = -np.gradient(u.values, u.spacings[N], axis=N, edge_order=2)
    for i in range(N):
        row = g.B[i]
        nz = np.nonzero(row)[0]
        if nz.size == 0:
            continue
        bx = sum(row[j] * mesh[j] for j in nz)
        out += bx * np.gradient(u.values, u.spacings[i], axis=i, edge_order=2)
    return u.with_values(out)


def lp_norm(u: GridField, p: float, region=None) -> float:
    """Riemann-sum L^p norm over the grid (optionally masked to a region)."""
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    mask = u.region_mask(region)
    if not mask.any():
        raise ValueError("region does not intersect the grid")
    return float(
        (np.abs(u.values[mask]) ** p).sum() * u.cell_volume
    ) ** (1.0 / p)


def sup_inf(u: GridField, region=None) -> tuple[float, float]:
    mask = u.region_mask(region)
    if not mask.any():
        raise ValueError("region does not intersect the grid")
    vals = u.values[mask]
    return float(vals.max()), float(vals.min())


def level_measure(u: GridField, s: float, region=None) -> float:
    """Anisotropic cell measure of {u > s} within the region."""
    mask = u.region_mask(region)
    return float(np.sum(u.values[mask] > s) * u.cell_volume)


def neg_sobolev_norm(g: GridField) -> float:
    """Dual-norm surrogate: slice-wise coercive solve of (I - Lap) w = g.

    For each slice in the remaining variables (y, t) the zero-boundary
    problem on the first block yields ||g||^2 = <g, w>; slices aggregate in
    L^2.  The discretization is symmetric positive definite, so the solve
    cannot be singular.
    """
    group = g.group
    m0 = group.structure.m[0]
    shape = g.values.shape
    block_shape = shape[:m0]
    rest = int(np.prod(shape[m0:]))
    # (I - Lap) on interior nodes of the first block, Dirichlet boundary
    mats = []
    for i in range(m0):
        n_int = block_shape[i] - 2
        if n_int < 1:
            raise ValueError("block axis too coarse for the dual-norm solve")
        dx2 = g.spacings[i] ** 2
        lap1d = sp.diags(
            [np.full(n_int - 1, 1.0 / dx2), np.full(n_int, -2.0 / dx2),
             np.full(n_int - 1, 1.0 / dx2)],
            offsets=[-1, 0, 1],
            format="csc",
        )
        mats.append(lap1d)
    n_int_total = int(np.prod([m.shape[0] for m in mats]))
    lap = sp.csc_matrix((n_int_total, n_int_total))
    for i, m in enumerate(mats):
        factors = [
            m if j == i else sp.identity(mats[j].shape[0], format="csc")
            for j in range(m0)
        ]
        term = factors[0]
        for f in factors[1:]:
            term = sp.kron(term, f, format="csc")
        lap = lap + term
    A = sp.identity(n_int_total, format="csc") - lap
    solver = splu(A.tocsc())
    V = g.values.reshape(block_shape + (rest,))
    interior = tuple(slice(1, -1) for _ in range(m0))
    G = V[interior].reshape(n_int_total, rest)
    W = solver.solve(G)
    block_cell = float(np.prod(g.spacings[:m0]))
    rest_cell = float(np.prod(g.spacings[m0:]))
    slice_sq = (G * W).sum(axis=0) * block_cell
    slice_sq = np.maximum(slice_sq, 0.0)
    return math.sqrt(float(slice_sq.sum() * rest_cell))


# -- cut-off functions --------------------------------------------------------


@dataclass(frozen=True)
class SmoothStep:
    """C^2 quintic transition: 1 on [0, rho], 0 on [r, inf).

    The maximal slope is 15/(8 (r - rho)), below the 2/(r - rho) budget, so
    the derivative bound holds by construction.
    """

    rho: float
    r: float
    in_standard_range: bool

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        u = np.clip((s - self.rho) / (self.r - self.rho), 0.0, 1.0)
        return 1.0 - (10 * u**3 - 15 * u**4 + 6 * u**5)

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        u = (s - self.rho) / (self.r - self.rho)
        inside = (u > 0) & (u < 1)
        du = np.where(inside, -30 * u**2 * (1 - u) ** 2 / (self.r - self.rho), 0.0)
        return du

    @property
    def max_slope(self) -> float:
        return 15.0 / (8.0 * (self.r - self.rho))


def cutoff_chi(rho: float, r: float) -> SmoothStep:
    """1-D radial cut-off with |chi'| <= 2/(r - rho)."""
    if not rho < r:
        raise ValueError(f"need rho < r, got rho={rho}, r={r}")
    standard = 0.5 <= rho < r <= 1.0
    return SmoothStep(float(rho), float(r), standard)


def _norm_gradient(group: Group, X, T):
    """Analytic gradient of the homogeneous norm away from the origin."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.atleast_1d(np.asarray(T, dtype=float))
    r = group.norm_xt(X, T)
    alpha = np.array(group.structure.alpha, dtype=float)
    r_safe = np.where(r > 0, r, 1.0)
    dF_dr = -(2 * alpha * X**2 * r_safe[:, None] ** (-2 * alpha - 1)).sum(axis=1)
    dF_dr -= 4 * T**2 * r_safe**-5
    dF_dx = 2 * X * r_safe[:, None] ** (-2 * alpha)
    dF_dt = 2 * T * r_safe**-4
    grad_x = -dF_dx / dF_dr[:, None]
    grad_t = -dF_dt / dF_dr
    grad_x[r == 0] = 0.0
    grad_t[r == 0] = 0.0
    return grad_x, grad_t, r


class CutoffPsi:
    """Radial cut-off psi(z) = chi(||z||): 1 on the inner norm ball, 0 outside
    the outer one, with measured derivative constants."""

    def __init__(self, group: Group, rho: float, r: float, n_probe: int = 20000, seed: int = 0):
        self.group = group
        self.chi = cutoff_chi(rho, r)
        self.rho, self.r = float(rho), float(r)
        self._measure_constants(n_probe, seed)

    def __call__(self, X, T):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return self.chi(self.group.norm_xt(X, T))

    def grad_x(self, X, T):
        gx, _, r = _norm_gradient(self.group, X, T)
        return self.chi.derivative(r)[:, None] * gx

    def y_drift(self, X, T):
        """Y psi = chi'(||z||) (<Bx, grad_x ||z||> - d_t ||z||), analytic."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = np.atleast_1d(np.asarray(T, dtype=float))
        gx, gt, r = _norm_gradient(self.group, X, T)
        bx = X @ self.group.B.T
        return self.chi.derivative(r) * ((bx * gx).sum(axis=1) - gt)

    def _measure_constants(self, n_probe, seed):
        rng = np.random.default_rng(seed)
        alpha = np.array(self.group.structure.alpha, dtype=float)
        half = self.r**alpha
        pts_x = rng.uniform(-half, half, size=(n_probe, alpha.size))
        pts_t = rng.uniform(-self.r**2, self.r**2, size=n_probe)
        r = self.group.norm_xt(pts_x, pts_t)
        shell = (r > self.rho) & (r < self.r)
        Xs, Ts = pts_x[shell], pts_t[shell]
        m0 = self.group.structure.m[0]
        if Xs.shape[0] == 0:
            self.c0 = self.c1 = 0.0
            return
        gx = self.grad_x(Xs, Ts)
        self.c1 = float(np.abs(gx[:, :m0]).max() * (self.r - self.rho))
        self.c0 = float(
            np.abs(self.y_drift(Xs, Ts)).max() * self.rho * (self.r - self.rho)
        )

    def grid(self, h: float, t_lo: float | None = None) -> GridField:
        """Sample onto the past box enclosing the outer norm ball."""
        alpha = np.array(self.group.structure.alpha, dtype=float)
        half = self.r**alpha
        t_lo = -self.r**2 if t_lo is None else t_lo
        return sample(self.group, self.__call__, (-half, half, t_lo, 0.0), h)


class Psi1:
    """Space-time cut-off with signed drift, for the localization machinery.

    psi1 = chi0(||x^(0)||) * S(w) * chi_t(t) with
    w = sum_{i > m0} a_i x_i^2 - C t.  The first factor is drift-neutral, S
    is decreasing with Y w >= C - kappa2 w0 > 0 on the support, and the time
    profile rises with slope 1 on the early slab.  Hence Y psi1 <= 0
    everywhere, and Y psi1 <= -1 on core x (-1-eta^2, -1-T] where the
    spatial factors equal 1; the core contains the zero box.
    """

    def __init__(
        self,
        group: Group,
        eta: float,
        T: float,
        C: float,
        margin: float = 1.0,
    ):
        if not 0 < eta <= 1:
            raise ValueError(f"eta must be in (0, 1], got {eta}")
        if not 0 < T < eta**2:
            raise ValueError(f"T must be in (0, eta^2), got {T}")
        if C <= 1:
            raise ValueError(f"C must exceed 1, got {C}")
        self.group = group
        self.eta, self.T, self.C, self.margin = float(eta), float(T), float(C), float(margin)
        st = group.structure
        self.m0 = st.m[0]
        alpha = np.array(st.alpha, dtype=float)
        # support half-widths for the coordinates above the first block
        self.s_full = margin * 2.0**alpha
        self.s_full[: self.m0] = 1.95
        tail = slice(self.m0, st.N)
        s_tail = self.s_full[tail] * 0.98
        eps0 = float((1.0 / s_tail**2).sum()) if s_tail.size else 0.0
        if eps0 >= 1:
            raise ValueError("support box too small for the level construction")
        kappa1 = (1 + eta**2) / (1 - eps0)
        kappa0 = eps0 / (1 - eps0) + 1.05
        # drift bound sup |sum 2 a_i x_i (Bx)_i| <= kappa2 * w0 on the support
        bnd = np.abs(group.B) @ self.s_full
        kappa2 = float((2.0 * bnd[tail] / s_tail).sum()) if s_tail.size else 0.0
        self.c_min = (
            (1 + kappa2 * kappa0) / (1 - kappa2 * kappa1)
            if kappa2 * kappa1 < 1
            else math.inf
        )
        self.feasible = C >= self.c_min
        self.w_hi = (eps0 + C * (1 + eta**2)) / (1 - eps0) + 0.05
        self.w0 = self.w_hi + 1.0
        self.a = np.zeros(st.N)
        self.a[tail] = self.w0 / s_tail**2
        self.s_step = SmoothStep(self.w_hi, self.w0, False)
        s_in = max(1.05, math.sqrt(self.m0) * eta + 0.02)
        self.chi0 = SmoothStep(s_in, 1.95, False)
        self._eps0, self._kappa2 = eps0, kappa2

    # time profile: 0 at -1-eta^2, slope 1 on the early slab, 1 from -1 on
    def chi_t(self, t):
        t = np.asarray(t, dtype=float)
        eta2, T = self.eta**2, self.T
        out = np.zeros_like(t)
        early = (t > -1 - eta2) & (t <= -1 - T)
        out[early] = t[early] + 1 + eta2
        win = (t > -1 - T) & (t < -1)
        if np.any(win):
            u = (t[win] + 1 + T) / T
            int_r = u - (2.5 * u**4 - 3.0 * u**5 + u**6)
            int_b = 10 * u**3 - 15 * u**4 + 6 * u**5
            A = 1 - eta2 + T
            c_b = A / T - 0.5
            out[win] = (eta2 - T) + T * (int_r + c_b * int_b)
        out[t >= -1] = 1.0
        return out

    def chi_t_slope(self, t):
        t = np.asarray(t, dtype=float)
        eta2, T = self.eta**2, self.T
        out = np.zeros_like(t)
        early = (t > -1 - eta2) & (t <= -1 - T)
        out[early] = 1.0
        win = (t > -1 - T) & (t < -1)
        if np.any(win):
            u = (t[win] + 1 + T) / T
            r_prof = 1.0 - (10 * u**3 - 15 * u**4 + 6 * u**5)
            b_prof = 30 * u**2 * (1 - u) ** 2
            A = 1 - eta2 + T
            out[win] = r_prof + (A / T - 0.5) * b_prof
        return out

    def w(self, X, t):
        return (self.a * X**2).sum(axis=1) - self.C * t

    def __call__(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s0 = np.sqrt((X[:, : self.m0] ** 2).sum(axis=1))
        return self.chi0(s0) * self.s_step(self.w(X, t)) * self.chi_t(t)

    def y_drift(self, X, t):
        """Y psi1, analytic; <= 0 everywhere when C >= c_min."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s0 = np.sqrt((X[:, : self.m0] ** 2).sum(axis=1))
        chi0 = self.chi0(s0)
        w = self.w(X, t)
        S, dS = self.s_step(w), self.s_step.derivative(w)
        ct, dct = self.chi_t(t), self.chi_t_slope(t)
        bx = X @ self.group.B.T
        y_w = 2.0 * (self.a * X * bx).sum(axis=1) + self.C
        # the first block is drift-neutral: B has no rows there
        return chi0 * (ct * dS * y_w - S * dct)

    def core_box(self):
        """Region where the spatial factors are identically 1 (contains the zero box)."""
        lo = -np.ones(self.group.structure.N)
        hi = np.ones(self.group.structure.N)
        r0 = self.chi0.rho / math.sqrt(self.m0)
        lo[: self.m0], hi[: self.m0] = -r0, r0
        return lo, hi

    def support_box(self):
        return -self.s_full, self.s_full

    def grid(self, h: float, pad: float = 0.0) -> GridField:
        lo, hi = self.support_box()
        return sample(
            self.group, self.__call__, (lo - pad, hi + pad, -1 - self.eta**2, 0.0), h
        )


def cutoff_psi(group: Group, rho: float, r: float, **kw) -> CutoffPsi:
    return CutoffPsi(group, rho, r, **kw)


def cutoff_psi1(group: Group, eta: float, T: float, C: float, **kw) -> Psi1:
    return Psi1(group, eta, T, C, **kw)


def min_working_c(group: Group, eta: float, T: float, margin: float = 1.0) -> float:
    """Smallest drift constant C for which the sign conditions are certified."""
    probe = Psi1(group, eta, T, max(2.0, 1.01), margin)
    return probe.c_min


# -- binary snapshot format ---------------------------------------------------


def save_grid(field: GridField, prefix: str, extra: dict | None = None):
    """Flat little-endian float64 array + JSON header describing the grid."""
    values = np.ascontiguousarray(field.values, dtype="<f8")
    with open(f"{prefix}.bin", "wb") as fh:
        fh.write(values.tobytes())
    header = {
        "shape": list(field.values.shape),
        "axis_lo": [float(a[0]) for a in field.axes],
        "axis_hi": [float(a[-1]) for a in field.axes],
        "spacings": list(field.spacings),
        "blocks": list(field.group.structure.m),
        "dtype": "<f8",
        "byte_order": "little-endian",
        "order": "C",
    }
    if extra:
        header["extra"] = extra
    with open(f"{prefix}.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    return f"{prefix}.json", f"{prefix}.bin"


def load_grid(group: Group, prefix: str) -> GridField:
    with open(f"{prefix}.json") as fh:
        header = json.load(fh)
    shape = tuple(header["shape"])
    values = np.fromfile(f"{prefix}.bin", dtype="<f8").reshape(shape)
    axes = [
        np.linspace(lo, hi, n)
        for lo, hi, n in zip(header["axis_lo"], header["axis_hi"], shape)
    ]
    return GridField(group, axes, values)
