import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simreg_lab import losses as L
from simreg_lab import tensorcore as tc
from simreg_lab.gradcheck import loss_gradcheck

from oracles import naive_simreg


def random_instance(seed, n=None, d=None, classes=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 13))
    d = d or int(rng.integers(1, 9))
    classes = classes or int(rng.integers(1, 5))
    return rng.standard_normal((n, d)), rng.integers(0, classes, size=n)


class TestCrossEntropy:
    def test_uniform(self):
        per, mean = L.cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
        np.testing.assert_allclose(per, math.log(7), rtol=1e-15)

    def test_two_class(self):
        per, _ = L.cross_entropy(np.array([[1.0, 0.0]]), np.array([0]))
        assert per[0] == pytest.approx(math.log1p(math.exp(-1)), rel=1e-14)
        assert per[0] == pytest.approx(0.31326, abs=1e-5)

    def test_dominant_logit(self):
        z = np.full((1, 5), -50.0)
        z[0, 2] = 50.0
        per, _ = L.cross_entropy(z, np.array([2]))
        assert 0.0 <= per[0] < 1e-20

    def test_label_range(self):
        with pytest.raises(ValueError):
            L.cross_entropy(np.zeros((1, 3)), np.array([3]))


class TestGroups:
    def test_example(self):
        g = L.build_groups([5, 5, 9])
        assert g.positives[0].tolist() == [0, 1] and g.negatives[0].tolist() == [2]
        assert g.positives[2].tolist() == [2] and g.negatives[2].tolist() == [0, 1]

    def test_single(self):
        g = L.build_groups([3])
        assert g.positives[0].tolist() == [0] and g.negatives[0].tolist() == []

    def test_all_equal(self):
        g = L.build_groups([1, 1, 1, 1])
        assert all(len(n) == 0 for n in g.negatives)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=12))
    def test_partition(self, labels):
        g = L.build_groups(labels)
        for k in range(len(labels)):
            assert k in g.positives[k]
            assert sorted(np.concatenate([g.positives[k], g.negatives[k]]).tolist()) == list(range(len(labels)))


class TestSimregToken:
    def test_orthogonal_pair(self):
        E = np.eye(2)
        assert L.simreg_token(E, 0, L.build_groups([0, 1]), 0.01) == pytest.approx(-100.0, rel=1e-12)

    def test_all_same_label(self):
        E = np.random.default_rng(0).standard_normal((4, 3))
        g = L.build_groups([2, 2, 2, 2])
        assert [L.simreg_token(E, k, g, 0.1) for k in range(4)] == [0.0] * 4

    def test_identical_embeddings(self):
        E = np.tile([0.6, 0.8], (3, 1))
        assert L.simreg_token(E, 0, L.build_groups([0, 0, 1]), 1.0) == pytest.approx(-math.log(2), rel=1e-14)

    def test_zero_norm_row(self):
        E = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        labels = [0, 1, 0]
        g = L.build_groups(labels)
        np.testing.assert_allclose([L.simreg_token(E, k, g, 0.5) for k in range(3)],
                                   naive_simreg(E, labels, 0.5), rtol=1e-14)
        # zero row: every cosine, including its own, is 0
        assert L.simreg_token(E, 0, g, 0.5) == pytest.approx(math.log(1) - math.log(2), abs=1e-15)


class TestSimregSequence:
    def test_single_token(self):
        assert L.simreg_sequence(np.ones((1, 3)), [4], 0.1)[0] == 0.0

    def test_orthogonal_pair(self):
        mean, per = L.simreg_sequence(np.eye(2), [0, 1], 0.01)
        np.testing.assert_allclose(per, [-100.0, -100.0], rtol=1e-12)
        assert mean == pytest.approx(-100.0, rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_double_loop(self, seed):
        E, labels = random_instance(seed, n=8)
        mean, per = L.simreg_sequence(E, labels, 1.0)
        np.testing.assert_allclose(per, naive_simreg(E, labels, 1.0), rtol=1e-10, atol=1e-14)

    def test_empty_negatives_count_in_mean(self):
        E = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        labels = np.array([0, 1, 1])
        mean, per = L.simreg_sequence(E, labels, 1.0)
        assert mean == pytest.approx(per.sum() / 3, rel=1e-15)

    def test_batched_rows_are_independent(self):
        rng = np.random.default_rng(4)
        E = rng.standard_normal((3, 6, 4))
        labels = rng.integers(0, 3, size=(3, 6))
        _, per = L.simreg_sequence(E, labels, 0.3)
        for b in range(3):
            np.testing.assert_array_equal(per[b], L.simreg_sequence(E[b], labels[b], 0.3)[1])

    def test_inner_product_variant(self):
        E = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
        labels = [0, 0, 1]
        _, per = L.simreg_sequence(E, labels, 1.0, similarity="inner")
        G = E @ E.T
        expected = G[0, 2] - math.log(math.exp(G[0, 0]) + math.exp(G[0, 1]))
        assert per[0] == pytest.approx(expected, rel=1e-14)


class TestInvariances:
    @pytest.mark.parametrize("seed", range(10))
    def test_positive_rescaling(self, seed):
        E, labels = random_instance(seed, n=7, d=5, classes=3)
        rng = np.random.default_rng(seed + 50)
        scaled = E * rng.uniform(0.01, 100.0, size=(7, 1))
        g = L.build_groups(labels)
        for k in range(7):
            assert L.simreg_token(scaled, k, g, 0.1) == pytest.approx(L.simreg_token(E, k, g, 0.1), abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_rotation(self, seed):
        E, labels = random_instance(seed, n=7, d=5, classes=3)
        Q, _ = np.linalg.qr(np.random.default_rng(seed + 60).standard_normal((5, 5)))
        _, a = L.simreg_sequence(E, labels, 0.1)
        _, b = L.simreg_sequence(E @ Q, labels, 0.1)
        np.testing.assert_allclose(a, b, atol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_equivariance(self, seed):
        E, labels = random_instance(seed, n=9, d=4, classes=3)
        perm = np.random.default_rng(seed + 70).permutation(9)
        _, a = L.simreg_sequence(E, labels, 0.1)
        _, b = L.simreg_sequence(E[perm], labels[perm], 0.1)
        np.testing.assert_allclose(b, a[perm], rtol=1e-13, atol=1e-13)

    def test_monotone_separation(self):
        # rotating a negative towards e_0 in a plane orthogonal to the positives
        base = np.zeros((4, 4))
        base[0] = [1, 0, 0, 0]
        base[1] = [0.6, 0.8, 0, 0]
        labels = [0, 0, 1, 1]
        base[3] = [0, 0, 0, 1]
        prev = -np.inf
        for angle in np.linspace(np.pi / 2, 0.05, 20):
            E = base.copy()
            E[2] = [math.cos(angle), 0, math.sin(angle), 0]
            val = L.simreg_token(E, 0, L.build_groups(labels), 0.1)
            assert val > prev
            prev = val


class TestChunked:
    @pytest.mark.parametrize("seed", range(10))
    def test_one_chunk_is_bitwise_sequence(self, seed):
        E, labels = random_instance(seed)
        assert L.simreg_chunked(E, labels, 0.1, 1) == L.simreg_sequence(E, labels, 0.1)[0]

    def test_degenerate_chunk_has_zero_weight(self):
        rng = np.random.default_rng(0)
        E = rng.standard_normal((8, 3))
        labels = np.array([0, 1, 0, 2, 5, 5, 5, 5])
        assert L.simreg_chunked(E, labels, 0.5, 2) == pytest.approx(
            L.simreg_sequence(E[:4], labels[:4], 0.5)[0], rel=1e-14)

    def test_weighted_by_negative_share(self):
        rng = np.random.default_rng(1)
        E = rng.standard_normal((6, 3))
        labels = np.array([0, 1, 2, 0, 0, 1])
        m1 = L.simreg_sequence(E[:3], labels[:3], 0.5)[0]
        m2 = L.simreg_sequence(E[3:], labels[3:], 0.5)[0]
        r1, r2 = 6 / 9, 4 / 9
        assert L.simreg_chunked(E, labels, 0.5, 2) == pytest.approx((r1 * m1 + r2 * m2) / (r1 + r2), rel=1e-14)

    def test_all_degenerate(self):
        E = np.random.default_rng(2).standard_normal((4, 2))
        assert L.simreg_chunked(E, [1, 1, 2, 2], 0.5, 2) == 0.0

    def test_b_greater_than_n(self):
        with pytest.raises(ValueError):
            L.simreg_chunked(np.ones((3, 2)), [0, 1, 0], 0.5, 4)

    @pytest.mark.parametrize("n,b", [(128, 1), (128, 4), (130, 4), (7, 3), (5, 5)])
    def test_pair_count(self, n, b):
        bounds = L.chunk_bounds(n, b)
        assert sum(hi - lo for lo, hi in bounds) == n
        assert L.pair_evaluations(n, b) == sum((hi - lo) ** 2 for lo, hi in bounds)
        assert L.pair_evaluations(n, b) <= n * n / b + n

    def test_terms_match_chunked(self):
        rng = np.random.default_rng(3)
        E = rng.standard_normal((2, 8, 4))
        labels = rng.integers(0, 3, size=(2, 8))
        cfg = L.SimRegConfig(tau=0.2, lam=1.0, chunks=2)
        t = L.simreg_terms(tc.constant(E), labels, cfg)
        expected = np.mean([L.simreg_chunked(E[b], labels[b], 0.2, 2) for b in range(2)])
        assert float(tc.evaluate(t.value)) == pytest.approx(expected, rel=1e-13)
        assert t.pair_evals == 2 * 2 * 16


class TestSoftplusAndCombined:
    @pytest.mark.parametrize("x,expected", [(0.0, math.log(2)), (1000.0, 1000.0), (-1000.0, 0.0),
                                            (1e4, 1e4), (-1e4, 0.0), (-100.0, math.exp(-100))])
    def test_values(self, x, expected):
        v = L.softplus(x)
        assert math.isfinite(v)
        assert v == pytest.approx(expected, rel=1e-14, abs=1e-300)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(0, 1e3))
    def test_properties(self, x, dx):
        v = L.softplus(x)
        assert v >= 0 and v >= x
        assert L.softplus(x + dx) >= v

    def test_combined(self):
        assert L.combined_loss(2.0, 5.0, 0.0) == 2.0
        assert L.combined_loss(2.0, 0.0, 3.0) == pytest.approx(2.0 + 3.0 * math.log(2))
        assert L.combined_loss(2.0, -100.0, 10.0) == pytest.approx(2.0, abs=1e-40)
        with pytest.raises(ValueError):
            L.combined_loss(1.0, 1.0, -1.0)

    def test_breakdown_decomposes(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((6, 4))
        E = rng.standard_normal((6, 3))
        labels = rng.integers(0, 4, size=6)
        br = L.loss_breakdown(logits, E, labels, L.SimRegConfig(tau=0.1, lam=2.5))
        np.testing.assert_array_equal(br.combined, br.ce + 2.5 * br.softplus_sr)
        np.testing.assert_array_equal(br.softplus_sr, L.softplus(br.sr))
        assert br.means["combined"] >= br.means["ce"]


class TestStability:
    def test_near_parallel_at_small_tau(self):
        rng = np.random.default_rng(0)
        n, d = 10, 8
        base = rng.standard_normal(d)
        E = base + 1e-6 * rng.standard_normal((n, d)) * np.linalg.norm(base) / np.sqrt(d)
        cos = (E / np.linalg.norm(E, axis=1, keepdims=True)) @ (E / np.linalg.norm(E, axis=1, keepdims=True)).T
        assert cos[~np.eye(n, dtype=bool)].min() > 1 - 1e-11
        labels = rng.integers(0, 3, size=n)
        logits = rng.standard_normal((n, 5)) * 50
        Ein, lin = tc.input("E", (n, d)), tc.input("z", (n, 5))
        terms = L.simreg_terms(Ein, labels, L.SimRegConfig(tau=0.01))
        root = tc.mean(L.cross_entropy_expr(lin, labels % 5)) + 10.0 * terms.penalty
        grads = tc.gradient(root, {"E": E, "z": logits}, ["E", "z"])
        assert np.isfinite(float(root.value))
        assert all(np.all(np.isfinite(g)) for g in grads.values())


class TestLossGradients:
    @pytest.mark.parametrize("tau", [1.0, 0.1, 0.01])
    @pytest.mark.parametrize("seed", range(4))
    def test_combined_wrt_embeddings(self, tau, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 13)), int(rng.integers(2, 17))
        res = loss_gradcheck(seed, tau, lam=1.0, n=n, d=d)
        assert res.passed, res
