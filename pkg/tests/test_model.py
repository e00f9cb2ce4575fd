import numpy as np
import pytest
from scipy.optimize import brentq

from kolmo_lab.model import (
    Group,
    build_structure,
    canonical_b,
    compose,
    dilate,
    distance,
    hom_norm,
    hom_norm_1,
    inverse,
    matrix_exp,
)


@pytest.fixture(scope="module")
def kinetic():
    return Group(build_structure([1, 1]))


@pytest.fixture(scope="module")
def g21():
    return Group(build_structure([2, 1]))


def random_points(group, n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return [
        group.point(scale * rng.standard_normal(group.structure.N),
                    scale * rng.standard_normal())
        for _ in range(n)
    ]


class TestStructure:
    def test_kinetic_blocks(self):
        s = build_structure([1, 1])
        assert s.N == 2
        assert s.alpha == (1, 3)
        assert s.Q == 4

    def test_parabolic_single_block(self):
        s = build_structure([2])
        assert s.N == 2
        assert s.alpha == (1, 1)
        assert s.Q == 2
        assert s.kappa == 0

    def test_increasing_blocks_rejected(self):
        with pytest.raises(ValueError):
            build_structure([1, 2])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_structure([])

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            build_structure([2, 0])

    def test_three_blocks(self):
        s = build_structure([3, 2, 1])
        assert s.N == 6
        assert s.alpha == (1, 1, 1, 3, 3, 5)
        assert s.Q == 3 + 3 * 2 + 5 * 1


class TestMatrixExp:
    def test_zero_matrix(self):
        E = matrix_exp(np.zeros((3, 3)), 1.7)
        assert np.allclose(E, np.eye(3), atol=1e-15)

    def test_kinetic_series_oracle(self):
        # B^2 = 0, so exp(-sB) = I - sB exactly.
        B = np.array([[0.0, 0.0], [1.0, 0.0]])
        E = matrix_exp(B, 1.0)
        assert np.allclose(E, [[1.0, 0.0], [-1.0, 1.0]], atol=1e-15)

    def test_inverse_property(self):
        B = canonical_b(build_structure([2, 1]))
        rng = np.random.default_rng(7)
        for s in rng.uniform(-5, 5, size=100):
            P = matrix_exp(B, s) @ matrix_exp(B, -s)
            assert np.abs(P - np.eye(3)).max() < 1e-12

    def test_non_nilpotent_fallback(self):
        from scipy.linalg import expm

        B = np.array([[0.3, 1.0], [-1.0, 0.2]])
        assert np.allclose(matrix_exp(B, 0.9), expm(-0.9 * B), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matrix_exp(np.zeros((2, 3)), 1.0)

    def test_det_is_one_for_canonical(self, kinetic, g21):
        for g in (kinetic, g21):
            for t in (-3.0, -0.5, 0.1, 2.0, 10.0):
                assert abs(np.linalg.det(g.E(t)) - 1.0) < 1e-12


class TestGroupOps:
    def test_identity(self, kinetic):
        z = kinetic.point([1.5, -0.3], 0.7)
        e = kinetic.origin()
        w = compose(z, e)
        assert np.allclose(w.x, z.x) and w.t == z.t

    def test_kinetic_compose_example(self, kinetic):
        z = kinetic.point([1.0, 0.0], 0.0)
        zeta = kinetic.point([0.0, 0.0], 1.0)
        w = compose(z, zeta)
        assert np.allclose(w.x, [1.0, -1.0], atol=1e-15)
        assert w.t == 1.0

    def test_associativity(self, kinetic):
        pts = random_points(kinetic, 3 * 1000, seed=11)
        for a, b, c in zip(pts[::3], pts[1::3], pts[2::3]):
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            assert np.abs(lhs.as_array() - rhs.as_array()).max() <= 1e-12

    def test_inverse_examples(self, kinetic):
        e = kinetic.origin()
        assert np.allclose(inverse(e).as_array(), 0.0)
        z = kinetic.point([1.0, 0.0], 1.0)
        zi = inverse(z)
        assert np.allclose(zi.x, [-1.0, -1.0], atol=1e-15)
        assert zi.t == -1.0

    def test_inverse_roundtrip(self, kinetic):
        for z in random_points(kinetic, 1000, seed=3):
            zz = inverse(inverse(z))
            assert np.abs(zz.as_array() - z.as_array()).max() <= 1e-12
            w = compose(z, inverse(z))
            assert np.abs(w.as_array()).max() <= 1e-12

    def test_structure_mismatch(self, kinetic, g21):
        with pytest.raises(ValueError):
            compose(kinetic.origin(), g21.origin())


class TestDilations:
    def test_identity_dilation(self, kinetic):
        z = kinetic.point([0.4, -2.0], 0.9)
        w = dilate(1.0, z)
        assert np.allclose(w.as_array(), z.as_array())

    def test_kinetic_exponents(self, kinetic):
        w = dilate(2.0, kinetic.point([1.0, 1.0], 1.0))
        assert np.allclose(w.as_array(), [2.0, 8.0, 4.0])

    def test_composition_of_dilations(self, kinetic):
        z = kinetic.point([0.3, 1.1], -0.6)
        a = dilate(2.0, dilate(3.0, z))
        b = dilate(6.0, z)
        assert np.abs(a.as_array() - b.as_array()).max() < 1e-12

    def test_nonpositive_rejected(self, kinetic):
        with pytest.raises(ValueError):
            dilate(0.0, kinetic.origin())


class TestHomNorm:
    def test_single_coordinate(self, kinetic):
        assert hom_norm(kinetic.point([2.0, 0.0], 0.0)) == pytest.approx(2.0, abs=1e-12)

    def test_time_only(self, kinetic):
        assert hom_norm(kinetic.point([0.0, 0.0], -4.0)) == pytest.approx(2.0, abs=1e-12)

    def test_zero(self, kinetic):
        assert hom_norm(kinetic.origin()) == 0.0

    def test_cubic_oracle(self, kinetic):
        # For z = ((1,1),0): 1/r^2 + 1/r^6 = 1, i.e. u^3 - u^2 - 1 = 0 with
        # u = r^2.  Solve the cubic independently by bracketed root finding.
        u = brentq(lambda v: v**3 - v**2 - 1.0, 1.0, 2.0, xtol=1e-15)
        expected = np.sqrt(u)
        got = hom_norm(kinetic.point([1.0, 1.0], 0.0))
        assert got == pytest.approx(expected, rel=1e-10)
        assert got == pytest.approx(1.21061, abs=5e-6)

    def test_homogeneity(self, kinetic, g21):
        rng = np.random.default_rng(5)
        for g in (kinetic, g21):
            for _ in range(300):
                z = g.point(rng.standard_normal(g.structure.N), rng.standard_normal())
                r = float(rng.uniform(0.05, 20.0))
                lhs = hom_norm(dilate(r, z))
                rhs = r * hom_norm(z)
                assert abs(lhs - rhs) <= 1e-10 * max(rhs, 1.0)

    def test_tiny_and_huge_scales(self, kinetic):
        assert hom_norm(kinetic.point([1e-200, 0.0], 0.0)) == pytest.approx(1e-200, rel=1e-10)
        assert hom_norm(kinetic.point([0.0, 0.0], -1e200)) == pytest.approx(1e100, rel=1e-10)

    def test_equivalence_band_with_norm1(self, kinetic):
        # On unit-norm points the comparison norm stays in a two-sided band.
        rng = np.random.default_rng(17)
        vals = []
        for _ in range(10_000):
            z = kinetic.point(rng.standard_normal(2), rng.standard_normal())
            n = hom_norm(z)
            if n == 0:
                continue
            zu = dilate(1.0 / n, z)
            vals.append(hom_norm_1(zu))
        vals = np.array(vals)
        assert vals.min() > 0.1
        assert vals.max() / vals.min() < 10.0


class TestDistance:
    def test_self_distance(self, kinetic):
        z = kinetic.point([0.2, 0.4], -1.0)
        assert distance(z, z) == 0.0

    def test_reduces_to_norm(self, kinetic):
        a = kinetic.origin()
        b = kinetic.point([2.0, 0.0], 0.0)
        assert distance(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_left_invariance(self, kinetic):
        rng = np.random.default_rng(23)
        for _ in range(1000):
            g0 = kinetic.point(rng.standard_normal(2), rng.standard_normal())
            z = kinetic.point(rng.standard_normal(2), rng.standard_normal())
            w = kinetic.point(rng.standard_normal(2), rng.standard_normal())
            d0 = distance(z, w)
            d1 = distance(compose(g0, z), compose(g0, w))
            assert abs(d0 - d1) <= 1e-10 * max(1.0, d0)
