import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simreg_lab import theory as th


class TestMargin:
    def test_value(self):
        assert th.margin([3.0, 1.0, 2.5], 0) == pytest.approx(0.5)
        assert th.margin([3.0, 1.0, 2.5], 1) == pytest.approx(-2.0)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            th.margin([1.0], 0)

    def test_two_class_bound(self):
        loss, bound, ok = th.ce_margin_bound_check([1.0, 0.0], 0)
        assert loss == pytest.approx(0.31326, abs=1e-5)
        assert bound == pytest.approx(math.exp(-1))
        assert ok

    def test_uniform_bound(self):
        loss, bound, ok = th.ce_margin_bound_check(np.zeros(10), 3)
        assert loss == pytest.approx(math.log(10))
        assert bound == pytest.approx(9.0)
        assert ok

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=20), st.data())
    def test_bound_property(self, z, data):
        y = data.draw(st.integers(0, len(z) - 1))
        assert th.ce_margin_bound_check(z, y)[2]


class TestWeightedCenters:
    def test_singleton_positive(self):
        E = np.array([[1.0, 2.0], [0.0, 1.0]])
        cp, cn, _ = th.weighted_centers(E, [0, 1], 0)
        np.testing.assert_array_equal(cp, E[0])
        np.testing.assert_allclose(cn, E[1])

    def test_symmetric_midpoint(self):
        # every inner product with e_0 equals 1, so the weights are uniform
        E = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, -1.0], [0.0, 5.0]])
        cp, _, alpha = th.weighted_centers(E, [0, 0, 0, 1], 0)
        np.testing.assert_allclose(cp, (E[1] + E[2]) / 2, rtol=1e-15)
        np.testing.assert_allclose(alpha[:3], 1 / 3, rtol=1e-15)

    def test_empty_negative(self):
        _, cn, _ = th.weighted_centers(np.eye(3), [1, 1, 1], 0)
        assert cn is None

    @pytest.mark.parametrize("seed", range(5))
    def test_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        E = rng.standard_normal((6, 3)) * 0.5
        labels = rng.integers(0, 2, size=6)
        labels[1] = 1 - labels[0]
        k = 0
        cp, cn, alpha = th.weighted_centers(E, labels, k)
        for mask, c in ((labels == labels[k], cp), (labels != labels[k], cn)):
            w = np.array([math.exp(E[k] @ E[i]) for i in range(6)]) * mask
            np.testing.assert_allclose(c, (w @ E) / w.sum(), rtol=1e-10)
            np.testing.assert_allclose(alpha[mask], w[mask] / w.sum(), rtol=1e-10)

    def test_convex_hull(self):
        rng = np.random.default_rng(9)
        E = rng.uniform(0, 1, size=(8, 2))
        cp, cn, _ = th.weighted_centers(E, rng.integers(0, 2, size=8), 3)
        for c in (cp, cn):
            assert np.all(c >= E.min(axis=0) - 1e-15) and np.all(c <= E.max(axis=0) + 1e-15)


class TestGroupMarginBounds:
    def test_zero_eccentricity(self):
        E = np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [0.2, 0.1, 1.0]])
        W = np.eye(3)
        e = th.group_margin_bounds(E, [0, 1, 2], W, 0)
        assert e.dist_pos == 0.0
        assert e.lower == e.margin

    def test_identity_head(self):
        E = np.array([[2.0, 0.0, 0.0], [1.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
        labels = np.array([0, 0, 2])
        e = th.group_margin_bounds(E, labels, np.eye(3), 1)
        assert e.margin == pytest.approx(1.0)
        assert e.smoothness == pytest.approx(1.0)
        assert e.holds()
        assert e.lower_slack >= 0 and e.upper_slack >= 0

    def test_no_negatives(self):
        e = th.group_margin_bounds(np.eye(2), [1, 1], np.eye(2), 0)
        assert e.upper is None and e.upper_slack is None and e.holds()

    def test_suite(self):
        res = th.run_centers(500, seed=0)
        assert res.violations == 0 and res.worst >= -1e-9

    def test_smoothness_suite(self):
        assert th.run_smoothness(500, seed=1).violations == 0

    def test_smoothness_tight(self):
        # (w_y - w_c) parallel to the displacement and L = sqrt(2): equality
        W = np.array([[1.0, 0.0], [-1.0, 0.0]])
        lhs, rhs, ok = th.smoothness_transfer_check(W, 0, 1, np.array([1.0, 0.0]), np.zeros(2))
        assert lhs == pytest.approx(2.0) and rhs == pytest.approx(2.0) and ok


class TestDynamics:
    def test_fixed_point(self):
        a = np.array([1.0, 0.0])
        A = np.array([a, a, [-1.0, 0.0]])
        e = th.tangent_dynamics_step(A, [0, 0, 1], 0, 1e-3, "positive")
        assert e.delta_pos == pytest.approx(0.0, abs=1e-15)

    def test_antipodal_negative(self):
        A = np.array([[1.0, 0.0], [-1.0, 0.0]])
        e = th.tangent_dynamics_step(A, [0, 1], 0, 1e-3, "negative")
        assert e.delta_neg >= 0.0

    def test_stays_on_sphere(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((5, 4))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        for mode in ("positive", "negative", "full"):
            e = th.tangent_dynamics_step(A, [0, 1, 0, 1, 2], 2, 1e-3, mode)
            assert np.linalg.norm(e.a_after) == pytest.approx(1.0, abs=1e-15)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            th.tangent_dynamics_step(np.ones((2, 2)), [0, 1], 0)

    def test_rejects_bad_eta(self):
        with pytest.raises(ValueError):
            th.tangent_dynamics_step(np.eye(2), [0, 1], 0, eta=0.0)

    def test_suite(self):
        res = th.run_dynamics(200, seed=0)
        assert res.violations == 0
        assert res.details["max_delta_pos"] <= 1e-12
        assert res.details["min_delta_neg"] >= -1e-12


class TestCosineDistribution:
    def test_uniform_at_d3(self):
        np.testing.assert_allclose(th.cosine_density(np.linspace(-0.99, 0.99, 11), 3), 0.5, rtol=1e-14)

    def test_d2_at_zero(self):
        assert th.cosine_density(0.0, 2) == pytest.approx(1 / math.pi, rel=1e-14)

    @pytest.mark.parametrize("d", [2, 4, 17, 300])
    def test_symmetric(self, d):
        z = np.linspace(0, 0.999, 9)
        np.testing.assert_array_equal(th.cosine_density(z, d), th.cosine_density(-z, d))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            th.cosine_density(1.01, 5)

    @pytest.mark.parametrize("d", [2, 3, 5, 50])
    def test_integrates_to_one(self, d):
        assert abs(th.cosine_density_integral(d) - 1.0) < 1e-6

    @pytest.mark.parametrize("d", [2, 8, 64])
    def test_moments(self, d):
        mom = th.cosine_moments_mc(d, 200_000, seed=d)
        assert abs(mom.mean) < 5 * mom.mean_se
        assert abs(mom.second_moment - 1 / d) < 5 * mom.second_se
        assert -1 <= mom.minimum <= mom.maximum <= 1
        assert mom.second_moment >= mom.mean ** 2
        mean, second = mom
        assert (mean, second) == (mom.mean, mom.second_moment)

    def test_moments_deterministic(self):
        assert th.cosine_moments_mc(5, 1000, 3) == th.cosine_moments_mc(5, 1000, 3)

    @pytest.mark.parametrize("c,deg", [(0.0, 90.0), (1.0, 0.0), (0.48, 61.31)])
    def test_angle(self, c, deg):
        assert th.average_angle_from_similarity(c) == pytest.approx(deg, abs=0.01)

    def test_angle_range(self):
        with pytest.raises(ValueError):
            th.average_angle_from_similarity(1.5)


class TestKernel:
    def _unit(self, seed, d=3):
        v = np.random.default_rng(seed).standard_normal((2, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def test_order_zero(self):
        u, v = self._unit(0)
        assert th.kernel_feature_map(u, 0).tolist() == [1.0]
        assert th.kernel_check(u, v, 0) == pytest.approx(abs(1 - math.exp(u @ v)), rel=1e-14)

    def test_self_order_ten(self):
        u, _ = self._unit(1)
        h = th.kernel_feature_map(u, 10)
        assert abs(h @ h - math.e) < 1e-7

    @pytest.mark.parametrize("order", [0, 1, 4, 9])
    def test_orthogonal(self, order):
        u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.6, 0.8])
        assert th.kernel_feature_map(u, order) @ th.kernel_feature_map(v, order) == pytest.approx(1.0, abs=1e-15)

    def test_tail_bound(self):
        for seed in range(10):
            u, v = self._unit(seed)
            for order in range(8):
                assert th.kernel_check(u, v, order) <= th.kernel_tail_bound(order) + 1e-15

    def test_size_guard(self):
        with pytest.raises(ValueError):
            th.kernel_feature_map(np.ones(64), 12)

    def test_feature_dim(self):
        assert th.kernel_feature_map(np.ones(3), 4).size == th.feature_dim(3, 4) == 1 + 3 + 9 + 27 + 81

    def test_suite(self):
        res = th.run_kernel(100, seed=0)
        assert res.violations == 0 and res.worst < 1e-6


class TestSuites:
    def test_margin_suite(self):
        assert th.run_margin_bound(1000, seed=0).violations == 0

    def test_density_suite(self):
        assert th.run_density().passed

    def test_registry(self):
        assert set(th.SUITES) == {"centers", "smoothness", "margin", "dynamics", "moments", "density", "kernel"}
