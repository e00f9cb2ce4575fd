"""Slanted space-time cylinders and the covering/measure machinery.

Cylinders Q_r(z0) are group translates of dilated unit cylinders, so their
sections slant along the drift flow.  This module provides membership,
volumes and uniform sampling for all cylinder variants (plain, box, stacked,
delayed), the interval/stacking lemmas, Vitali selection, the ink-spots
inequality checks and the stacked chain construction, with a seedable
quasi-random measure engine for everything that has no closed form.

Time faces follow the half-open convention (lo, hi] throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .model import Group, GroupPoint

__all__ = [
    "Cylinder",
    "BoxCylinder",
    "StackedCylinder",
    "DelayedCylinder",
    "unit_cylinder_volume",
    "mc_measure",
    "ball_sandwich",
    "min_sandwich_cbar",
    "inclusion_lemma_check",
    "random_qualifying_pair",
    "vitali_select",
    "maximal_function",
    "interval_stack_bound",
    "stacked_union_bound",
    "InkSpotsInstance",
    "build_ink_spots_instance",
    "ink_spots_check",
    "stacked_chain",
    "q_plus",
    "q_minus",
    "q_zero",
    "q_ext",
    "q_pos",
]

_TIME_SLACK = 1e-12


def _ball_volume(m: int, r: float = 1.0) -> float:
    return math.pi ** (m / 2) / math.gamma(m / 2 + 1) * r**m


def unit_cylinder_volume(structure) -> float:
    """Measure of the unit cylinder: product of unit-ball block volumes x 1."""
    v = 1.0
    for mj in structure.m:
        v *= _ball_volume(mj)
    return v


def _sample_ball(rng, n, m, r=1.0):
    g = rng.standard_normal((n, m))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    u = rng.random(n) ** (1.0 / m)
    return r * g * u[:, None]


class Cylinder:
    """Slanted cylinder Q_r(z0) = z0 o delta_r(Q_1), time face (t0 - r^2, t0]."""

    def __init__(self, center: GroupPoint, r: float):
        if r <= 0:
            raise ValueError(f"radius must be positive, got {r}")
        self.group = center.group
        self.center = center
        self.r = float(r)
        self._alpha = np.array(self.group.structure.alpha, dtype=float)

    def __repr__(self):
        return f"Cylinder(x0={self.center.x.tolist()}, t0={self.center.t}, r={self.r})"

    def _unit_coords(self, X, T):
        """Map points to unit-cylinder coordinates delta_{1/r}(z0^{-1} o z)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = np.atleast_1d(np.asarray(T, dtype=float))
        s = T - self.center.t
        Zx = X - self.group.apply_E(s, np.broadcast_to(self.center.x, X.shape))
        zeta_x = Zx / self.r**self._alpha
        zeta_t = s / self.r**2
        return zeta_x, zeta_t

    def contains_xt(self, X, T):
        zeta_x, zeta_t = self._unit_coords(X, T)
        ok = (zeta_t > -1.0 - _TIME_SLACK) & (zeta_t <= _TIME_SLACK)
        for sl in self.group.structure.block_slices():
            ok &= (zeta_x[:, sl] ** 2).sum(axis=1) <= 1.0 + _TIME_SLACK
        return ok

    def contains(self, z: GroupPoint) -> bool:
        return bool(self.contains_xt(z.x[None, :], np.array([z.t]))[0])

    def volume(self) -> float:
        return self.r ** (self.group.structure.Q + 2) * unit_cylinder_volume(
            self.group.structure
        )

    def sample_xt(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """n uniform points; the map zeta -> z0 o delta_r(zeta) has unit Jacobian
        up to the constant factor r^(Q+2), so uniform zeta gives uniform z."""
        structure = self.group.structure
        zeta_x = np.empty((n, structure.N))
        for mj, sl in zip(structure.m, structure.block_slices()):
            zeta_x[:, sl] = _sample_ball(rng, n, mj)
        zeta_t = -rng.random(n)  # uniform in (-1, 0]
        wx = zeta_x * self.r**self._alpha
        wt = zeta_t * self.r**2
        X = wx + self.group.apply_E(wt, np.broadcast_to(self.center.x, wx.shape))
        return X, self.center.t + wt

    def sample(self, n: int, seed=None, rng=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng(seed)
        X, T = self.sample_xt(n, rng)
        return np.column_stack([X, T])

    def bounding_box(self, pad: float = 0.0):
        """Conservative axis-aligned box; the drift shift of the center is
        bounded by scanning E(s) x0 over the time face."""
        s_grid = np.linspace(-self.r**2, 0.0, 65)
        shifted = self.group.apply_E(
            s_grid, np.broadcast_to(self.center.x, (65, self.group.structure.N))
        )
        half = self.r**self._alpha
        lo = shifted.min(axis=0) - half - pad
        hi = shifted.max(axis=0) + half + pad
        return lo, hi, self.center.t - self.r**2 - pad, self.center.t + pad


class StackedCylinder:
    """kQ_r(z0): time-lifted k-dilate, (0,..,0,(k^2-1)r^2/2) o Q_{kr}(z0)."""

    def __init__(self, base: Cylinder, k: float):
        if k < 1:
            raise ValueError(f"stacking factor must be >= 1, got {k}")
        self.base = base
        self.k = float(k)
        self.shift = (k**2 - 1.0) / 2.0 * base.r**2
        self._scaled = Cylinder(base.center, k * base.r)

    def contains_xt(self, X, T):
        return self._scaled.contains_xt(X, np.asarray(T, dtype=float) - self.shift)

    def contains(self, z: GroupPoint) -> bool:
        return bool(self.contains_xt(z.x[None, :], np.array([z.t]))[0])

    def volume(self) -> float:
        return self.k ** (self.base.group.structure.Q + 2) * self.base.volume()

    def sample(self, n, seed=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        pts = self._scaled.sample(n, rng=rng)
        pts[:, -1] += self.shift
        return pts

    def bounding_box(self, pad: float = 0.0):
        lo, hi, tlo, thi = self._scaled.bounding_box(pad)
        return lo, hi, tlo + self.shift, thi + self.shift


class DelayedCylinder:
    """Forward time-stack of m unit delays of Q_r(z0).

    Realized as the disjoint union of the translates (0,..,0, i r^2) o Q_r(z0)
    for i = 1..m: it starts immediately at the end of Q_r(z0) and spans time
    (t0, t0 + m r^2].
    """

    def __init__(self, base: Cylinder, m: int):
        if m < 1:
            raise ValueError(f"delay multiplier must be >= 1, got {m}")
        self.base = base
        self.m = int(m)

    def contains_xt(self, X, T):
        T = np.asarray(T, dtype=float)
        ok = np.zeros(np.atleast_1d(T).shape, dtype=bool)
        for i in range(1, self.m + 1):
            ok |= self.base.contains_xt(X, T - i * self.base.r**2)
        return ok

    def contains(self, z: GroupPoint) -> bool:
        return bool(self.contains_xt(z.x[None, :], np.array([z.t]))[0])

    def volume(self) -> float:
        return self.m * self.base.volume()

    def sample(self, n, seed=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        pts = self.base.sample(n, rng=rng)
        shifts = rng.integers(1, self.m + 1, size=n) * self.base.r**2
        pts[:, -1] += shifts
        return pts

    def bounding_box(self, pad: float = 0.0):
        lo, hi, tlo, thi = self.base.bounding_box(pad)
        return lo, hi, tlo + self.base.r**2, thi + self.m * self.base.r**2


class BoxCylinder:
    """Tensor cylinder: per-block balls or cubes x half-open time interval."""

    def __init__(
        self,
        group: Group,
        radii,
        t_lo: float,
        t_hi: float,
        center=None,
        block_shape: str = "ball",
    ):
        if t_lo >= t_hi:
            raise ValueError(f"need t_lo < t_hi, got [{t_lo}, {t_hi}]")
        radii = [float(r) for r in radii]
        if len(radii) != len(group.structure.m):
            raise ValueError("one radius per block required")
        if any(r <= 0 for r in radii):
            raise ValueError(f"radii must be positive, got {radii}")
        if block_shape not in ("ball", "cube"):
            raise ValueError(f"unknown block shape {block_shape!r}")
        self.group = group
        self.radii = radii
        self.t_lo = float(t_lo)
        self.t_hi = float(t_hi)
        self.center = (
            np.zeros(group.structure.N)
            if center is None
            else np.asarray(center, dtype=float)
        )
        self.block_shape = block_shape

    def contains_xt(self, X, T):
        X = np.atleast_2d(np.asarray(X, dtype=float)) - self.center
        T = np.atleast_1d(np.asarray(T, dtype=float))
        ok = (T > self.t_lo - _TIME_SLACK) & (T <= self.t_hi + _TIME_SLACK)
        for rj, sl in zip(self.radii, self.group.structure.block_slices()):
            if self.block_shape == "ball":
                ok &= (X[:, sl] ** 2).sum(axis=1) <= rj**2 * (1 + _TIME_SLACK)
            else:
                ok &= (np.abs(X[:, sl]) <= rj * (1 + _TIME_SLACK)).all(axis=1)
        return ok

    def contains(self, z: GroupPoint) -> bool:
        return bool(self.contains_xt(z.x[None, :], np.array([z.t]))[0])

    def volume(self) -> float:
        v = self.t_hi - self.t_lo
        for rj, mj in zip(self.radii, self.group.structure.m):
            v *= _ball_volume(mj, rj) if self.block_shape == "ball" else (2 * rj) ** mj
        return v

    def sample(self, n, seed=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        structure = self.group.structure
        X = np.empty((n, structure.N))
        for rj, mj, sl in zip(self.radii, structure.m, structure.block_slices()):
            if self.block_shape == "ball":
                X[:, sl] = _sample_ball(rng, n, mj, rj)
            else:
                X[:, sl] = rng.uniform(-rj, rj, size=(n, mj))
        T = rng.uniform(self.t_lo, self.t_hi, size=n)
        return np.column_stack([X + self.center, T])

    def bounding_box(self, pad: float = 0.0):
        half = np.empty(self.group.structure.N)
        for rj, sl in zip(self.radii, self.group.structure.block_slices()):
            half[sl] = rj
        return (
            self.center - half - pad,
            self.center + half + pad,
            self.t_lo - pad,
            self.t_hi + pad,
        )


# -- standard regions ------------------------------------------------------


def q_plus(group: Group, omega: float) -> BoxCylinder:
    radii = [omega ** (2 * j + 1) for j in range(len(group.structure.m))]
    return BoxCylinder(group, radii, -(omega**2), 0.0, block_shape="ball")


def q_minus(group: Group, omega: float) -> BoxCylinder:
    radii = [omega ** (2 * j + 1) for j in range(len(group.structure.m))]
    return BoxCylinder(group, radii, -1.0, -1.0 + omega**2, block_shape="ball")


def q_zero(group: Group, eta: float) -> BoxCylinder:
    """Coordinate box |x_i| <= eta^alpha_i with time slab (-1-eta^2, -1]."""
    radii = [eta ** (2 * j + 1) for j in range(len(group.structure.m))]
    return BoxCylinder(group, radii, -1.0 - eta**2, -1.0, block_shape="cube")


def q_ext(group: Group, eta: float, R: float) -> BoxCylinder:
    radii = [2 ** (2 * j + 1) * R for j in range(len(group.structure.m))]
    return BoxCylinder(group, radii, -1.0 - eta**2, 0.0, block_shape="cube")


def q_pos(group: Group, theta: float) -> BoxCylinder:
    radii = [theta ** (2 * j + 1) for j in range(len(group.structure.m))]
    return BoxCylinder(group, radii, -1.0 - theta**2, -1.0, block_shape="ball")


# -- quasi-random measure engine --------------------------------------------


def mc_measure(contains_fn, bbox, n: int, seed: int, replicates: int = 8):
    """Measure of {contains_fn} inside bbox by scrambled-Sobol sampling.

    Returns (estimate, sigma) where sigma is the standard error across the
    independent scrambles.
    """
    lo, hi, tlo, thi = bbox
    lo = np.append(lo, tlo)
    hi = np.append(hi, thi)
    d = lo.size
    box_vol = float(np.prod(hi - lo))
    n_rep = max(2, replicates)
    per = max(16, int(n) // n_rep)
    m_bits = max(4, math.ceil(math.log2(per)))
    ests = []
    for k in range(n_rep):
        sob = qmc.Sobol(d, scramble=True, seed=seed + 1000003 * k)
        u = sob.random_base2(m_bits)
        pts = lo + u * (hi - lo)
        mask = contains_fn(pts[:, :-1], pts[:, -1])
        ests.append(box_vol * float(np.mean(mask)))
    ests = np.array(ests)
    return float(ests.mean()), float(ests.std(ddof=1) / math.sqrt(n_rep))


def _union_contains(objs):
    def fn(X, T):
        ok = np.zeros(np.atleast_1d(T).shape, dtype=bool)
        for o in objs:
            ok |= o.contains_xt(X, T)
        return ok

    return fn


def _union_bbox(objs, pad=0.0):
    boxes = [o.bounding_box(pad) for o in objs]
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    tlo = min(b[2] for b in boxes)
    thi = max(b[3] for b in boxes)
    return lo, hi, tlo, thi


# -- sandwich and inclusion checks ------------------------------------------


@dataclass
class CheckReport:
    name: str
    ok: bool
    vacuous: bool = False
    n_samples: int = 0
    n_fail: int = 0
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def ball_sandwich(cyl: Cylinder, cbar: float, n: int = 20000, seed: int = 0):
    """Inner/outer box cylinders with radii (r/cbar)^alpha_j and (cbar r)^alpha_j.

    Verifies inneric Q and Q in outer by sampling; failure means cbar is too small.
    """
    if cbar < 1:
        raise ValueError(f"cbar must be >= 1, got {cbar}")
    g = cyl.group
    nb = len(g.structure.m)
    r1, r2 = cyl.r / cbar, cbar * cyl.r
    inner = BoxCylinder(
        g,
        [r1 ** (2 * j + 1) for j in range(nb)],
        cyl.center.t - r1**2,
        cyl.center.t,
        center=cyl.center.x,
        block_shape="ball",
    )
    outer = BoxCylinder(
        g,
        [r2 ** (2 * j + 1) for j in range(nb)],
        cyl.center.t - r2**2,
        cyl.center.t,
        center=cyl.center.x,
        block_shape="ball",
    )
    rng = np.random.default_rng(seed)
    pts_in = inner.sample(n, rng=rng)
    fail_in = int(np.sum(~cyl.contains_xt(pts_in[:, :-1], pts_in[:, -1])))
    pts_cyl = cyl.sample(n, rng=rng)
    fail_out = int(np.sum(~outer.contains_xt(pts_cyl[:, :-1], pts_cyl[:, -1])))
    ok = fail_in == 0 and fail_out == 0
    report = CheckReport(
        "ball_sandwich",
        ok,
        n_samples=2 * n,
        n_fail=fail_in + fail_out,
        details={"cbar": cbar, "fail_inner": fail_in, "fail_outer": fail_out},
    )
    if not ok:
        report.details["reason"] = "cbar too small"
    return inner, outer, report


def min_sandwich_cbar(cyl: Cylinder, n: int = 20000, seed: int = 0, iters: int = 24):
    """Bisection for the smallest cbar certifying the sandwich by sampling."""
    lo, hi = 1.0, 1.0
    for _ in range(24):
        if ball_sandwich(cyl, hi, n, seed)[2].ok:
            break
        lo, hi = hi, 2 * hi
    else:
        raise RuntimeError("no working cbar found")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= 1.0:
            break
        if ball_sandwich(cyl, mid, n, seed)[2].ok:
            hi = mid
        else:
            lo = mid
    # certify against an independent sample; pad the boundary estimate if needed
    for _ in range(20):
        if ball_sandwich(cyl, hi, n, seed + 99991)[2].ok:
            break
        hi *= 1.05
    return hi


def inclusion_lemma_check(
    q0: Cylinder, q1: Cylinder, k: float = 5.0, n: int = 10000, seed: int = 0
) -> CheckReport:
    """Sampled check that Q_{r1} c kQ_{r0} for intersecting cylinders, 2 r0 >= r1."""
    rng = np.random.default_rng(seed)
    stacked = StackedCylinder(q0, k)
    # precondition: nonempty intersection (sampled) and the radius relation
    probe = q1.sample(512, rng=rng)
    intersects = bool(np.any(q0.contains_xt(probe[:, :-1], probe[:, -1])))
    if not intersects:
        probe0 = q0.sample(512, rng=rng)
        intersects = bool(np.any(q1.contains_xt(probe0[:, :-1], probe0[:, -1])))
    if not intersects or 2 * q0.r < q1.r:
        return CheckReport(
            "inclusion_lemma",
            True,
            vacuous=True,
            details={"intersects": intersects, "radius_ok": 2 * q0.r >= q1.r},
        )
    pts = q1.sample(n, rng=rng)
    inside = stacked.contains_xt(pts[:, :-1], pts[:, -1])
    n_fail = int(np.sum(~inside))
    return CheckReport(
        "inclusion_lemma", n_fail == 0, n_samples=n, n_fail=n_fail, details={"k": k}
    )


def random_qualifying_pair(group: Group, rng, r_max: float = 0.4):
    """Random (Q_{r0}, Q_{r1}) with guaranteed common point and r1 <= 2 r0."""
    N = group.structure.N
    r0 = float(rng.uniform(0.05, r_max))
    r1 = float(rng.uniform(0.05, 2.0)) * r0
    r1 = min(r1, 2 * r0)
    z0 = group.point(rng.uniform(-1, 1, N), rng.uniform(-1, 0))
    q0 = Cylinder(z0, r0)
    w = q0.sample(1, rng=rng)[0]  # common point
    # place q1 so that w = z1 o delta_{r1} zeta for a random unit zeta
    zeta = Cylinder(group.origin(), 1.0).sample(1, rng=rng)[0]
    wx, wt = group.dilate_xt(np.array(r1), zeta[:-1], zeta[-1])
    ix, it = group.inverse_xt(wx[None, :], np.array([wt]))
    x1, t1 = group.compose_xt(w[:-1][None, :], np.array([w[-1]]), ix, it)
    q1 = Cylinder(group.point(x1[0], float(t1[0])), r1)
    return q0, q1


def _cylinders_intersect(a: Cylinder, b: Cylinder, rng, probe: int = 256) -> bool:
    small, big = (a, b) if a.r <= b.r else (b, a)
    pts = small.sample(probe, rng=rng)
    if np.any(big.contains_xt(pts[:, :-1], pts[:, -1])):
        return True
    pts = big.sample(probe, rng=rng)
    return bool(np.any(small.contains_xt(pts[:, :-1], pts[:, -1])))


def vitali_select(cylinders: list[Cylinder], seed: int = 0, probe: int = 256):
    """Greedy Vitali selection: radius-descending, keep those disjoint (sampled)
    from all kept so far.  Ties broken by lexicographic center for determinism."""
    if not cylinders:
        return []
    rng = np.random.default_rng(seed)
    order = sorted(
        range(len(cylinders)),
        key=lambda i: (
            -cylinders[i].r,
            tuple(cylinders[i].center.x),
            cylinders[i].center.t,
        ),
    )
    selected: list[Cylinder] = []
    for i in order:
        c = cylinders[i]
        if not any(_cylinders_intersect(c, s, rng, probe) for s in selected):
            selected.append(c)
    return selected


def vitali_cover_report(
    cylinders, selected, k: float = 5.0, n: int = 100000, seed: int = 0
) -> CheckReport:
    """Sampled check that the union of inputs sits inside union of k-dilations."""
    rng = np.random.default_rng(seed)
    dilated = [StackedCylinder(s, k) for s in selected]
    per = max(1, n // max(1, len(cylinders)))
    n_fail = 0
    n_tot = 0
    for c in cylinders:
        pts = c.sample(per, rng=rng)
        covered = _union_contains(dilated)(pts[:, :-1], pts[:, -1])
        n_fail += int(np.sum(~covered))
        n_tot += per
    return CheckReport(
        "vitali_cover", n_fail == 0, n_samples=n_tot, n_fail=n_fail, details={"k": k}
    )


# -- maximal function --------------------------------------------------------


def maximal_function(f, z: GroupPoint, radii, centers_per_radius: int = 8, seed: int = 0):
    """Cylinder maximal function of a nonnegative grid field at z.

    Supremum over tested cylinders Q_r(zc) containing z of the average of |f|
    over the cylinder (grid Riemann sum restricted to the grid's box).
    ``f`` must expose node_points() -> (n, N+1), flat_values and cell_volume.
    """
    group = z.group
    rng = np.random.default_rng(seed)
    pts = f.node_points()
    vals = np.abs(f.flat_values())
    best = 0.0
    unit = Cylinder(group.origin(), 1.0)
    for r in radii:
        zetas = unit.sample(centers_per_radius, rng=rng)
        for zeta in zetas:
            # choose zc with z = zc o delta_r(zeta)  =>  zc = z o (delta_r zeta)^-1
            wx, wt = group.dilate_xt(np.array(float(r)), zeta[:-1], zeta[-1])
            ix, it = group.inverse_xt(wx[None, :], np.array([wt]))
            cx, ct = group.compose_xt(z.x[None, :], np.array([z.t]), ix, it)
            cyl = Cylinder(group.point(cx[0], float(ct[0])), float(r))
            inside = cyl.contains_xt(pts[:, :-1], pts[:, -1])
            n_in = int(np.sum(inside))
            if n_in == 0:
                continue
            avg = float(vals[inside].sum() * f.cell_volume) / cyl.volume()
            best = max(best, avg)
    return best


# -- interval and stacked-union lemmas ---------------------------------------


def _union_length(intervals) -> float:
    """Exact measure of a union of half-open intervals (a, b] by sort-merge."""
    ivs = sorted((a, b) for a, b in intervals if b > a)
    total = 0.0
    cur_a, cur_b = None, None
    for a, b in ivs:
        if cur_b is None or a > cur_b:
            if cur_b is not None:
                total += cur_b - cur_a
            cur_a, cur_b = a, b
        else:
            cur_b = max(cur_b, b)
    if cur_b is not None:
        total += cur_b - cur_a
    return total


def interval_stack_bound(intervals, m: float):
    """|U (a_k, a_k + m h_k]| >= m/(m+1) |U (a_k - h_k, a_k]|, exactly."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    for _, h in intervals:
        if h <= 0:
            raise ValueError("interval lengths must be positive")
    lhs = _union_length([(a, a + m * h) for a, h in intervals])
    rhs = m / (m + 1.0) * _union_length([(a - h, a) for a, h in intervals])
    return lhs, rhs, lhs >= rhs - 1e-12


def stacked_union_bound(
    cylinders: list[Cylinder], m: int, n: int = 200000, seed: int = 0,
    rel_target: float = 0.01,
):
    """MC check of |U delayed^m| >= m/(m+1) |U base| for a cylinder family."""
    if not cylinders:
        return 0.0, 0.0, CheckReport("stacked_union", True, vacuous=True)
    delayed = [DelayedCylinder(c, m) for c in cylinders]
    base_meas, base_sig = mc_measure(
        _union_contains(cylinders), _union_bbox(cylinders), n, seed
    )
    del_meas, del_sig = mc_measure(
        _union_contains(delayed), _union_bbox(delayed), n, seed + 1
    )
    rhs = m / (m + 1.0) * base_meas
    sigma = math.hypot(del_sig, m / (m + 1.0) * base_sig)
    inconclusive = (
        base_meas > 0
        and (base_sig > rel_target * base_meas or del_sig > rel_target * max(del_meas, 1e-300))
    )
    ok = del_meas >= rhs - 3.0 * sigma
    rep = CheckReport(
        "stacked_union",
        ok,
        n_samples=n,
        details={
            "measure_delayed": del_meas,
            "measure_base": base_meas,
            "sigma": sigma,
            "inconclusive": inconclusive,
        },
    )
    return del_meas, base_meas, rep


# -- ink spots ---------------------------------------------------------------


class InkSpotsInstance:
    """Synthetic (E, F) pair satisfying the ink-spots hypotheses by construction.

    E is a union of witness cylinders, each notched by a small subcylinder so
    that |Q_i cap E| >= (1-mu)|Q_i|; F contains E together with the delayed
    stacks of every witness.
    """

    def __init__(self, witnesses, notches, m: int, mu: float):
        self.witnesses = witnesses
        self.notches = notches
        self.m = int(m)
        self.mu = float(mu)
        self.delayed = [DelayedCylinder(c, m) for c in witnesses]

    def e_contains(self, X, T):
        ok = _union_contains(self.witnesses)(X, T)
        ok &= ~_union_contains(self.notches)(X, T)
        return ok

    def f_contains(self, X, T):
        return self.e_contains(X, T) | _union_contains(self.witnesses + self.delayed)(X, T)

    def bbox(self):
        return _union_bbox(self.witnesses + self.delayed)


def build_ink_spots_instance(
    group: Group, n_cyl: int, m: int, mu: float, seed: int = 0
) -> InkSpotsInstance:
    """Disjoint witness cylinders inside the unit cylinder, notched to density 1 - mu/2."""
    rng = np.random.default_rng(seed)
    witnesses: list[Cylinder] = []
    tries = 0
    while len(witnesses) < n_cyl and tries < 400 * n_cyl:
        tries += 1
        r = float(rng.uniform(0.05, 0.18))
        x = rng.uniform(-0.5, 0.5, group.structure.N)
        t = float(rng.uniform(-0.9, -0.1))
        cand = Cylinder(group.point(x, t), r)
        if all(not _cylinders_intersect(cand, w, rng, 128) for w in witnesses):
            witnesses.append(cand)
    notches = []
    for w in witnesses:
        # a notch of relative volume (mu/2)^(... ) <= mu/2: radius factor keeps
        # |notch| = (mu/2) |Q| since volume scales like r^(Q+2)
        frac = (mu / 2.0) ** (1.0 / (group.structure.Q + 2))
        notches.append(Cylinder(w.center, frac * w.r))
    return InkSpotsInstance(witnesses, notches, m, mu)


def ink_spots_check(
    instance: InkSpotsInstance,
    k: float = 5.0,
    n: int = 200000,
    seed: int = 0,
) -> CheckReport:
    """MC verdict on |E| <= (m+1)/m (1 - c_is mu) |F| with c_is = k^-(Q+2)/2."""
    group = instance.witnesses[0].group if instance.witnesses else None
    if group is None:
        return CheckReport("ink_spots", True, vacuous=True, details={"empty": True})
    Q = group.structure.Q
    c_is = k ** -(Q + 2) / 2.0
    # hypothesis check on the witnesses
    for w, nt in zip(instance.witnesses, instance.notches):
        density = 1.0 - nt.volume() / w.volume()
        if density < 1.0 - instance.mu - 1e-12:
            raise ValueError("witness cylinder violates the density hypothesis")
    bbox = instance.bbox()
    e_meas, e_sig = mc_measure(instance.e_contains, bbox, n, seed)
    f_meas, f_sig = mc_measure(instance.f_contains, bbox, n, seed + 7)
    factor = (instance.m + 1.0) / instance.m * (1.0 - c_is * instance.mu)
    rhs = factor * f_meas
    sigma = math.hypot(e_sig, factor * f_sig)
    ok = e_meas <= rhs + 3.0 * sigma
    return CheckReport(
        "ink_spots",
        ok,
        n_samples=n,
        details={
            "E": e_meas,
            "F": f_meas,
            "c_is": c_is,
            "factor": factor,
            "sigma": sigma,
        },
    )


# -- stacked chains ----------------------------------------------------------


@dataclass
class ChainResult:
    chain: list[Cylinder]
    final: Cylinder
    bridge: Cylinder
    T: list[float]
    branch: str
    rho: float
    R: float
    inclusions: list[CheckReport]

    @property
    def ok(self) -> bool:
        return all(rep.ok for rep in self.inclusions)


def stacked_chain(
    z0: GroupPoint,
    r: float,
    omega: float,
    n_samples: int = 100000,
    seed: int = 0,
) -> ChainResult:
    """Chain of cylinders Q_{2^k r} climbing from Q_r(z0) toward the origin.

    The k-th cylinder is centered at z_k = z0 o (0,..,0,T_k) with
    T_k = sum_{j<=k} (2^j r)^2, so consecutive time faces are contiguous.
    Verifies by sampling: the positivity cylinder is captured by the final
    cylinder, the chain stays inside (-1,0] x B_2, and (in the R >= rho
    branch) the bridge cylinder sits inside the last chain cylinder.  In the
    R < rho branch the bridge lies below every chain cylinder and the third
    inclusion is recorded as vacuous.
    """
    group = z0.group
    kappa = group.structure.kappa
    if omega >= 1.0 / math.sqrt(2 * kappa + 1):
        raise ValueError(f"omega must be < 1/sqrt(2 kappa + 1), got {omega}")
    qm = q_minus(group, omega)
    probe = Cylinder(z0, r).sample(256, seed=seed)
    if not np.all(qm.contains_xt(probe[:, :-1], probe[:, -1])):
        raise ValueError("base cylinder must sit inside the past cylinder")
    rho = ((3 * kappa + 1) * omega) ** (1.0 / (2 * kappa + 1))
    t0 = z0.t
    T = [0.0]
    while T[-1] <= -t0:
        k = len(T)
        T.append(T[-1] + (2**k * r) ** 2)
    Nmax = len(T) - 2  # T_N <= -t0 < T_{N+1}
    if Nmax < 1:
        raise ValueError("base cylinder too large for a chain")
    zeros = np.zeros(group.structure.N)
    chain = []
    for k in range(1, Nmax + 1):
        zk = GroupPoint(*_compose_time(group, z0, T[k]), group)
        chain.append(Cylinder(zk, 2**k * r))
    R = math.sqrt(abs(t0 + T[Nmax]))
    R_final = max(R, rho)
    if R >= rho:
        zN1 = GroupPoint(*_compose_time(group, chain[-1].center, R**2), group)
        branch = "R>=rho"
    else:
        zN1 = group.origin()
        branch = "R<rho"
    final = Cylinder(zN1, R_final) if R_final > 0 else Cylinder(zN1, rho)
    bridge_center = GroupPoint(*_compose_time(group, zN1, -(R_final**2)), group)
    bridge = Cylinder(bridge_center, R_final / 2.0)

    rng = np.random.default_rng(seed)
    reports = []
    # 1. positivity cylinder captured by the final cylinder
    qp = q_plus(group, omega)
    pts = qp.sample(n_samples, rng=rng)
    fails = int(np.sum(~final.contains_xt(pts[:, :-1], pts[:, -1])))
    reports.append(
        CheckReport("chain_captures_qplus", fails == 0, n_samples=n_samples, n_fail=fails)
    )
    # 2. chain cylinders Q_r[1..N] inside (-1, 0] x B_2; the final capture
    # cylinder has radius max(R, rho) and is covered by inclusion 1.
    per = max(1, n_samples // max(1, len(chain)))
    fails = 0
    tot = 0
    for c in chain:
        pts = c.sample(per, rng=rng)
        ok_t = (pts[:, -1] > -1.0 - _TIME_SLACK) & (pts[:, -1] <= _TIME_SLACK)
        ok_x = np.ones(per, dtype=bool)
        for rj, sl in zip(
            [2.0 ** (2 * j + 1) for j in range(len(group.structure.m))],
            group.structure.block_slices(),
        ):
            ok_x &= (pts[:, sl.start : sl.stop] ** 2).sum(axis=1) <= rj**2 + 1e-12
        fails += int(np.sum(~(ok_t & ok_x)))
        tot += per
    reports.append(CheckReport("chain_inside_box", fails == 0, n_samples=tot, n_fail=fails))
    # 3. bridge cylinder inside the last chain cylinder (meaningful branch only)
    if branch == "R>=rho":
        pts = bridge.sample(n_samples, rng=rng)
        fails = int(np.sum(~chain[-1].contains_xt(pts[:, :-1], pts[:, -1])))
        reports.append(
            CheckReport("bridge_in_last", fails == 0, n_samples=n_samples, n_fail=fails)
        )
    else:
        reports.append(
            CheckReport(
                "bridge_in_last",
                True,
                vacuous=True,
                details={"branch": branch, "note": "bridge lies below the chain"},
            )
        )
    return ChainResult(chain, final, bridge, T[: Nmax + 2], branch, rho, R, reports)


def _compose_time(group: Group, z: GroupPoint, dt: float):
    """z o (0, ..., 0, dt): pure time translations only shift t."""
    x, t = group.compose_xt(
        z.x[None, :], np.array([z.t]), np.zeros((1, group.structure.N)), np.array([dt])
    )
    return x[0], float(t[0])
