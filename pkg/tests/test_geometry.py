import math

import numpy as np
import pytest

from kolmo_lab.geometry import (
    BoxCylinder,
    Cylinder,
    DelayedCylinder,
    StackedCylinder,
    ball_sandwich,
    build_ink_spots_instance,
    ink_spots_check,
    inclusion_lemma_check,
    interval_stack_bound,
    maximal_function,
    mc_measure,
    min_sandwich_cbar,
    q_minus,
    q_plus,
    q_zero,
    random_qualifying_pair,
    stacked_chain,
    stacked_union_bound,
    unit_cylinder_volume,
    vitali_cover_report,
    vitali_select,
)
from kolmo_lab.model import Group, build_structure, dilate


@pytest.fixture(scope="module")
def kinetic():
    return Group(build_structure([1, 1]))


class TestCylinderBasics:
    def test_unit_volume_kinetic(self, kinetic):
        assert unit_cylinder_volume(kinetic.structure) == pytest.approx(4.0)

    def test_center_on_time_face_contained(self, kinetic):
        c = Cylinder(kinetic.point([0.3, -0.2], -0.5), 0.7)
        assert c.contains(c.center)

    def test_volume_scaling(self, kinetic):
        c = Cylinder(kinetic.origin(), 2.0)
        assert c.volume() == pytest.approx(2.0**6 * 4.0)

    def test_volume_against_mc(self, kinetic):
        c = Cylinder(kinetic.origin(), 2.0)
        est, sig = mc_measure(c.contains_xt, c.bounding_box(), 400000, seed=5)
        assert est == pytest.approx(256.0, rel=5e-3)

    def test_membership_dilation_equivariance(self, kinetic):
        rng = np.random.default_rng(2)
        c1 = Cylinder(kinetic.origin(), 1.0)
        for _ in range(200):
            z = kinetic.point(rng.uniform(-1.5, 1.5, 2), rng.uniform(-1.5, 0.5))
            s = float(rng.uniform(0.3, 2.0))
            zs = dilate(s, z)
            cs = Cylinder(kinetic.origin(), s)
            assert c1.contains(z) == cs.contains(zs)

    def test_samples_are_members(self, kinetic):
        c = Cylinder(kinetic.point([0.5, 1.0], -0.3), 0.8)
        pts = c.sample(5000, seed=3)
        assert np.all(c.contains_xt(pts[:, :-1], pts[:, -1]))

    def test_bad_radius(self, kinetic):
        with pytest.raises(ValueError):
            Cylinder(kinetic.origin(), 0.0)


class TestStackedDelayed:
    def test_stacked_volume(self, kinetic):
        base = Cylinder(kinetic.point([0.1, 0.2], -0.5), 0.3)
        st = StackedCylinder(base, 5.0)
        assert st.volume() == pytest.approx(5.0**6 * base.volume())

    def test_stacked_volume_mc(self, kinetic):
        base = Cylinder(kinetic.origin(), 0.4)
        st = StackedCylinder(base, 3.0)
        est, sig = mc_measure(st.contains_xt, st.bounding_box(), 400000, seed=8)
        assert est == pytest.approx(st.volume(), rel=0.02)

    def test_base_inside_stacked(self, kinetic):
        base = Cylinder(kinetic.point([0.4, -0.1], -0.2), 0.35)
        st = StackedCylinder(base, 5.0)
        pts = base.sample(4000, seed=1)
        assert np.all(st.contains_xt(pts[:, :-1], pts[:, -1]))

    def test_delayed_time_support(self, kinetic):
        base = Cylinder(kinetic.point([0.0, 0.0], -0.5), 0.3)
        d = DelayedCylinder(base, 3)
        pts = d.sample(4000, seed=4)
        assert pts[:, -1].min() > -0.5
        assert pts[:, -1].max() <= -0.5 + 3 * 0.09 + 1e-12
        # starts immediately at the end of the base cylinder
        assert pts[:, -1].min() < -0.5 + 0.25 * 0.09

    def test_delayed_volume(self, kinetic):
        base = Cylinder(kinetic.origin(), 0.3)
        d = DelayedCylinder(base, 4)
        assert d.volume() == pytest.approx(4 * base.volume())
        est, sig = mc_measure(d.contains_xt, d.bounding_box(), 300000, seed=9)
        assert est == pytest.approx(d.volume(), rel=0.02)


class TestBoxRegions:
    def test_q_zero_geometry(self, kinetic):
        qz = q_zero(kinetic, 0.5)
        assert qz.contains(kinetic.point([0.4, 0.1], -1.1))
        assert not qz.contains(kinetic.point([0.6, 0.0], -1.1))
        assert not qz.contains(kinetic.point([0.0, 0.0], -0.5))
        assert qz.volume() == pytest.approx((2 * 0.5) * (2 * 0.125) * 0.25)

    def test_q_plus_minus(self, kinetic):
        qp, qm = q_plus(kinetic, 0.5), q_minus(kinetic, 0.5)
        assert qp.contains(kinetic.point([0.0, 0.0], -0.1))
        assert qm.contains(kinetic.point([0.0, 0.0], -0.9))
        assert not qm.contains(kinetic.point([0.0, 0.0], -0.5))

    def test_box_sampling(self, kinetic):
        qz = q_zero(kinetic, 0.7)
        pts = qz.sample(2000, seed=11)
        assert np.all(qz.contains_xt(pts[:, :-1], pts[:, -1]))


class TestBallSandwich:
    def test_trivial_parabolic_case(self):
        g = Group(build_structure([2]), B=np.zeros((2, 2)))
        c = Cylinder(g.origin(), 0.8)
        inner, outer, rep = ball_sandwich(c, 1.0, n=4000, seed=0)
        assert rep.ok  # B = 0, single block: box form coincides

    def test_kinetic_needs_larger_cbar(self, kinetic):
        c = Cylinder(kinetic.point([0.8, -0.5], -0.4), 0.9)
        cbar = min_sandwich_cbar(c, n=4000, seed=1)
        assert 1.0 <= cbar < 8.0
        _, _, rep = ball_sandwich(c, cbar, n=4000, seed=2)
        assert rep.ok

    def test_too_small_reported(self, kinetic):
        c = Cylinder(kinetic.point([1.0, 1.0], -0.5), 1.0)
        with pytest.raises(ValueError):
            ball_sandwich(c, 0.5)


class TestInclusionLemma:
    def test_identical_cylinders(self, kinetic):
        c = Cylinder(kinetic.point([0.3, 0.1], -0.4), 0.5)
        rep = inclusion_lemma_check(c, c, k=5.0, n=2000, seed=0)
        assert rep.ok and not rep.vacuous

    def test_random_qualifying_pairs(self, kinetic):
        rng = np.random.default_rng(100)
        for i in range(60):
            q0, q1 = random_qualifying_pair(kinetic, rng)
            rep = inclusion_lemma_check(q0, q1, k=5.0, n=2000, seed=i)
            assert rep.ok, (i, rep.details, q0, q1)

    def test_k1_fails_for_separated_pair(self, kinetic):
        q0 = Cylinder(kinetic.origin(), 0.4)
        # overlapping but offset cylinder of equal radius: k=1 cannot capture it
        q1 = Cylinder(kinetic.point([0.55, 0.0], 0.0), 0.4)
        rep = inclusion_lemma_check(q0, q1, k=1.0, n=4000, seed=3)
        assert not rep.vacuous
        assert not rep.ok

    def test_vacuous_when_disjoint(self, kinetic):
        q0 = Cylinder(kinetic.origin(), 0.2)
        q1 = Cylinder(kinetic.point([5.0, 0.0], 3.0), 0.2)
        rep = inclusion_lemma_check(q0, q1, n=1000, seed=0)
        assert rep.vacuous and rep.ok


class TestVitali:
    def test_single(self, kinetic):
        c = Cylinder(kinetic.origin(), 0.5)
        assert vitali_select([c]) == [c]

    def test_two_disjoint(self, kinetic):
        a = Cylinder(kinetic.origin(), 0.3)
        b = Cylinder(kinetic.point([3.0, 0.0], 0.0), 0.3)
        sel = vitali_select([a, b])
        assert len(sel) == 2

    def test_containing_pair_drops_one(self, kinetic):
        a = Cylinder(kinetic.origin(), 1.0)
        b = Cylinder(kinetic.point([0.05, 0.0], -0.05), 0.2)
        sel = vitali_select([a, b])
        assert sel == [a]

    def test_cover_property(self, kinetic):
        rng = np.random.default_rng(7)
        cyls = [
            Cylinder(
                kinetic.point(rng.uniform(-1, 1, 2), rng.uniform(-1, 0)),
                float(rng.uniform(0.05, 0.35)),
            )
            for _ in range(60)
        ]
        sel = vitali_select(cyls, seed=1)
        rep = vitali_cover_report(cyls, sel, k=5.0, n=30000, seed=2)
        assert rep.ok, rep.details

    def test_empty(self):
        assert vitali_select([]) == []


class _StubField:
    """Minimal grid-field stand-in: uniform nodes over a box with values."""

    def __init__(self, group, lo, hi, tlo, thi, n, fun):
        axes = [np.linspace(lo[i], hi[i], n) for i in range(group.structure.N)]
        axes.append(np.linspace(tlo, thi, n))
        mesh = np.meshgrid(*axes, indexing="ij")
        self._pts = np.column_stack([m.ravel() for m in mesh])
        self._vals = fun(self._pts[:, :-1], self._pts[:, -1])
        self.cell_volume = float(
            np.prod([(a[-1] - a[0]) / (len(a) - 1) for a in axes])
        )

    def node_points(self):
        return self._pts

    def flat_values(self):
        return self._vals


class TestMaximalFunction:
    def test_zero_field(self, kinetic):
        f = _StubField(kinetic, [-2, -2], [2, 2], -2, 0.5, 21, lambda X, T: 0.0 * T)
        val = maximal_function(f, kinetic.point([0.0, 0.0], -0.5), [0.3, 0.6])
        assert val == 0.0

    def test_constant_field(self, kinetic):
        f = _StubField(
            kinetic, [-2, -2], [2, 2], -2, 0.5, 41, lambda X, T: np.ones_like(T)
        )
        val = maximal_function(f, kinetic.point([0.0, 0.0], -0.5), [0.5, 0.8])
        assert val == pytest.approx(1.0, rel=0.3)

    def test_weak_type_bound(self, kinetic):
        # |{Mf > lam}| <= C/lam ||f||_1 with C = 2 k^(Q+2) is loose at this scale
        rng = np.random.default_rng(3)
        C_bound = 2 * 5.0**6
        for trial in range(3):
            c = rng.uniform(0.5, 2.0)
            f = _StubField(
                kinetic,
                [-2, -2],
                [2, 2],
                -2,
                0.0,
                15,
                lambda X, T, c=c: c * np.exp(-(X**2).sum(axis=1)),
            )
            l1 = float(np.abs(f.flat_values()).sum() * f.cell_volume)
            pts = f.node_points()[:: 40]
            mvals = np.array(
                [
                    maximal_function(
                        f, kinetic.point(p[:-1], p[-1]), [0.3, 0.6], 4, seed=trial
                    )
                    for p in pts
                ]
            )
            for lam in (0.1, 0.5, 1.0):
                meas = float(np.sum(mvals > lam) / len(mvals) * 16.0 * 2.0)
                assert meas <= C_bound / lam * l1 + 1e-9


class TestIntervalStacking:
    def test_single_interval(self):
        lhs, rhs, ok = interval_stack_bound([(0.0, 1.0)], 2)
        assert lhs == pytest.approx(2.0)
        assert rhs == pytest.approx(2.0 / 3.0)
        assert ok

    def test_two_overlapping(self):
        lhs, rhs, ok = interval_stack_bound([(0.0, 1.0), (0.5, 1.0)], 1)
        assert lhs == pytest.approx(1.5)
        assert rhs == pytest.approx(0.75)
        assert ok

    def test_random_families(self):
        rng = np.random.default_rng(19)
        for _ in range(1000):
            k = rng.integers(1, 8)
            fam = [
                (float(rng.uniform(-3, 3)), float(rng.uniform(0.05, 1.5)))
                for _ in range(k)
            ]
            for m in (1, 2, 3):
                lhs, rhs, ok = interval_stack_bound(fam, m)
                assert ok, (fam, m, lhs, rhs)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            interval_stack_bound([(0.0, -1.0)], 2)
        with pytest.raises(ValueError):
            interval_stack_bound([(0.0, 1.0)], 0.5)


class TestStackedUnion:
    def test_empty_family(self, kinetic):
        d, b, rep = stacked_union_bound([], 2)
        assert rep.vacuous and rep.ok

    def test_single_cylinder(self, kinetic):
        c = Cylinder(kinetic.point([0.2, -0.3], -0.6), 0.35)
        d, b, rep = stacked_union_bound([c], 3, n=150000, seed=5)
        assert rep.ok
        assert d >= 3 / 4 * b - 3 * rep.details["sigma"]

    def test_overlapping_pair(self, kinetic):
        a = Cylinder(kinetic.point([0.0, 0.0], -0.5), 0.3)
        b_ = Cylinder(kinetic.point([0.1, 0.02], -0.45), 0.28)
        d, b, rep = stacked_union_bound([a, b_], 2, n=150000, seed=6)
        assert rep.ok, rep.details


class TestInkSpots:
    def test_c_is_value_q4(self):
        assert 5.0 ** -(4 + 2) / 2.0 == pytest.approx(1.0 / 31250.0)

    def test_empty_instance(self, kinetic):
        inst = build_ink_spots_instance(kinetic, 0, 3, 0.5, seed=0)
        rep = ink_spots_check(inst)
        assert rep.vacuous and rep.ok

    def test_randomized_instances(self, kinetic):
        for seed in range(5):
            inst = build_ink_spots_instance(kinetic, 4, 3, 0.5, seed=seed)
            assert len(inst.witnesses) == 4
            rep = ink_spots_check(inst, n=60000, seed=seed)
            assert rep.ok, rep.details
            assert rep.details["c_is"] == pytest.approx(1.0 / 31250.0)

    def test_density_hypothesis_enforced(self, kinetic):
        inst = build_ink_spots_instance(kinetic, 2, 3, 0.5, seed=1)
        inst.mu = 0.001  # notches now carve out more than mu allows
        with pytest.raises(ValueError):
            ink_spots_check(inst, n=2000, seed=0)


def valid_chain_seed(group, rng, omega=0.5):
    """Random (z0, r) with Q_r(z0) verifiably inside the past cylinder."""
    qm = q_minus(group, omega)
    for _ in range(400):
        r = float(rng.uniform(0.2, 0.6)) * omega
        radii = [omega ** (2 * j + 1) for j in range(len(group.structure.m))]
        x = np.concatenate(
            [
                0.4 * rj * _unit(rng, mj)
                for rj, mj in zip(radii, group.structure.m)
            ]
        )
        t = float(rng.uniform(-1 + 1.2 * r**2, -1 + omega**2))
        cand = Cylinder(group.point(x, t), r)
        pts = cand.sample(512, rng=rng)
        if np.all(qm.contains_xt(pts[:, :-1], pts[:, -1])):
            return cand.center, r
    raise RuntimeError("no valid chain seed found")


def _unit(rng, m):
    g = rng.standard_normal(m)
    g /= np.linalg.norm(g)
    return g * rng.random() ** (1.0 / m)


class TestStackedChain:
    def test_t_schedule(self, kinetic):
        rng = np.random.default_rng(0)
        z0, _ = valid_chain_seed(kinetic, rng)
        res = stacked_chain(kinetic.point(np.zeros(2), -0.9), 0.1, 0.5, n_samples=2000)
        assert res.T[1] == pytest.approx(0.04)
        assert res.T[2] == pytest.approx(0.20)

    def test_omega_bound(self, kinetic):
        assert 1.0 / math.sqrt(3) == pytest.approx(0.57735, abs=1e-5)
        with pytest.raises(ValueError):
            stacked_chain(kinetic.point(np.zeros(2), -0.9), 0.05, 0.6)

    def test_rho_formula(self, kinetic):
        res = stacked_chain(kinetic.point(np.zeros(2), -0.9), 0.05, 0.5, n_samples=2000)
        assert res.rho == pytest.approx((4 * 0.5) ** (1.0 / 3.0))

    def test_small_omega_hits_bridge_branch(self, kinetic):
        # with omega tiny, rho is small and R >= rho occurs, exercising the
        # bridge inclusion for real
        omega = 0.01
        rng = np.random.default_rng(5)
        bridge_hits = 0
        for i in range(8):
            z0, r = valid_chain_seed(kinetic, rng, omega=omega)
            res = stacked_chain(z0, r, omega, n_samples=20000, seed=i)
            assert all(rep.ok for rep in res.inclusions), [
                rep.details for rep in res.inclusions
            ]
            if res.branch == "R>=rho":
                assert not res.inclusions[2].vacuous
                bridge_hits += 1
        assert bridge_hits > 0

    def test_standard_omega_chain(self, kinetic):
        rng = np.random.default_rng(9)
        for i in range(5):
            z0, r = valid_chain_seed(kinetic, rng)
            res = stacked_chain(z0, r, 0.5, n_samples=20000, seed=i)
            assert res.ok, [rep.details for rep in res.inclusions]
            if res.branch == "R<rho":
                assert np.all(res.final.center.x == 0.0) and res.final.center.t == 0.0
