import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wap_adapter import codebook as cb
from wap_adapter import gradcheck


def book(P):
    P = np.asarray(P, dtype=np.float64)
    K = len(P)
    return cb.Codebook(P.copy(), np.zeros(K, np.int64), np.zeros(K, np.int64))


def brute_quantisation(Z, P):
    total = 0.0
    for z in Z:
        best = math.inf
        for p in P:
            d = sum((zi - pi) ** 2 for zi, pi in zip(z, p))
            best = min(best, d)
        total += best
    return total


def reference_ce(Zs, labels, P, tau):
    """Softmax cross-entropy of cosine logits written with plain loops."""
    total = 0.0
    for z, y in zip(Zs, labels):
        logits = []
        for p in P:
            cos = float(np.dot(z, p)) / (math.sqrt(float(np.dot(z, z))) * math.sqrt(float(np.dot(p, p))))
            logits.append(cos / tau)
        m = max(logits)
        lse = m + math.log(sum(math.exp(l - m) for l in logits))
        total += lse - logits[y]
    return total / len(Zs)


class TestInit:
    def test_prototypes_are_samples(self):
        samples = np.random.default_rng(0).normal(size=(100, 3))
        c = cb.init_codebook(4, samples, np.random.default_rng(1))
        assert c.size == 4
        for p in c.prototypes:
            assert np.any(np.all(samples == p, axis=1))
        assert len({tuple(p) for p in c.prototypes}) == 4

    def test_same_seed_same_selection(self):
        samples = np.random.default_rng(0).normal(size=(100, 3))
        a = cb.init_codebook(8, samples, np.random.default_rng(5))
        b = cb.init_codebook(8, samples, np.random.default_rng(5))
        np.testing.assert_array_equal(a.prototypes, b.prototypes)

    def test_insufficient_warmup(self):
        with pytest.raises(cb.InsufficientWarmupError, match="insufficient warm-up"):
            cb.init_codebook(10, np.zeros((9, 2)), np.random.default_rng(0))


class TestAssign:
    def test_exact_match(self):
        P = np.random.default_rng(0).normal(size=(6, 4))
        assert cb.assign(P[3], book(P)) == 3

    def test_nearest(self):
        assert cb.assign(np.array([0.9, 0.1]), book([[0, 0], [1, 0], [0, 1]])) == 1

    def test_tie_goes_to_lowest_index(self):
        c = book([[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0]])
        assert cb.assign(np.array([0.0, 0.0]), c) == 1
        # an irrational-looking tie that expansion-based distances would break
        c = book([[0.1, 0.7], [0.1, -0.5]])
        assert cb.assign(np.array([0.1, 0.1]), c) == 0

    @settings(max_examples=100)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        Z, P = rng.normal(size=(7, 3)), rng.normal(size=(4, 3))
        for z, k in zip(Z, cb.assign_batch(Z, book(P))):
            d = [float(((z - p) ** 2).sum()) for p in P]
            assert k == d.index(min(d))


class TestUpdate:
    def test_arithmetic(self):
        c = book([[0.0, 0.0]])
        cb.update_prototype(c, np.array([1.0, 1.0]), 0, cb.DistillConfig(eta_mode="fixed", fixed_eta=0.5))
        np.testing.assert_array_equal(c.prototypes[0], [0.5, 0.5])
        assert c.counts[0] == 1

    def test_eta_one_replaces(self):
        c = book([[3.0, -2.0]])
        cb.update_prototype(c, np.array([1.0, 7.0]), 0)  # count 0 -> eta = 1
        np.testing.assert_array_equal(c.prototypes[0], [1.0, 7.0])

    @given(arrays(np.float64, 3, elements=st.floats(-100, 100)),
           arrays(np.float64, 3, elements=st.floats(-100, 100)),
           st.floats(0.01, 1.0))
    def test_contraction(self, p, z, eta):
        c = book([p])
        cb.update_prototype(c, z, 0, cb.DistillConfig(eta_mode="fixed", fixed_eta=eta))
        before, after = np.linalg.norm(p - z), np.linalg.norm(c.prototypes[0] - z)
        assert after == pytest.approx((1 - eta) * before, rel=1e-9, abs=1e-9)
        if before > 1e-6:
            assert after < before

    def test_count_rate_gives_running_mean(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(50, 2))
        c = book([[9.0, 9.0]])
        for z in pts:
            cb.update_prototype(c, z, 0)
        np.testing.assert_allclose(c.prototypes[0], pts.mean(axis=0), atol=1e-12)

    def test_batch_uses_snapshot_and_idle_counters(self):
        c = book([[0.0], [10.0], [100.0]])
        labels = cb.update_batch(c, np.array([[1.0], [9.0], [4.0]]))
        np.testing.assert_array_equal(labels, [0, 1, 0])
        np.testing.assert_allclose(c.prototypes[:, 0], [2.5, 9.0, 100.0])
        np.testing.assert_array_equal(c.idle, [0, 0, 1])


class TestReseed:
    def test_nothing_dead(self):
        c = book(np.eye(3))
        cb.update_batch(c, np.eye(3))
        assert cb.reseed_dead(c, np.eye(3), 1, np.random.default_rng(0)) == 0

    def test_starved_prototype_reseeded(self):
        rng = np.random.default_rng(0)
        c = book([[0.0, 0.0], [1.0, 1.0], [1e6, 1e6]])
        recent = None
        for step in range(50):
            recent = rng.normal(size=(8, 2))
            cb.update_batch(c, recent)
            n = cb.reseed_dead(c, recent, 50, rng)
            assert n == (1 if step == 49 else 0)
        assert np.abs(c.prototypes[2]).max() < 10
        assert c.counts[2] == 0 and c.idle[2] == 0

    def test_deterministic(self):
        def run():
            c = book([[0.0], [1e6]])
            c.idle[1] = 5
            cb.reseed_dead(c, np.arange(10.0)[:, None], 5, np.random.default_rng(3))
            return c.prototypes
        np.testing.assert_array_equal(run(), run())


class TestVqLoss:
    def test_zero_when_on_prototypes(self):
        P = np.random.default_rng(0).normal(size=(4, 2))
        assert cb.vq_loss(P[[0, 2, 2, 3]], book(P)) == 0.0

    def test_one_dimensional(self):
        assert cb.vq_loss(np.array([[0.0], [2.0]]), book([[1.0]])) == 2.0

    def test_brute_force_oracle(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            Z, P = rng.normal(size=(20, 2)), rng.normal(size=(3, 2))
            assert cb.vq_loss(Z, book(P)) == pytest.approx(brute_quantisation(Z, P), rel=1e-12)


class TestCosineLogits:
    def test_parallel_orthogonal_opposite(self):
        P = np.array([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]])
        np.testing.assert_allclose(cb.cosine_logits(np.array([5.0, 0.0]), book(P), 0.1),
                                   [10.0, 0.0, -10.0], atol=1e-12)

    def test_zero_vector_is_guarded(self):
        assert np.all(np.isfinite(cb.cosine_logits(np.zeros(2), book(np.eye(2)), 0.1)))


class TestPseudoCe:
    def test_uniform_logits(self):
        # z orthogonal to every prototype -> all logits 0
        P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        loss, _ = cb.pce_loss(np.array([[1.0, 0.0, 0.0]]), [2], book(P), 0.1)
        assert loss == pytest.approx(math.log(4), rel=1e-14)

    def test_confident_limit(self):
        P = np.eye(3)
        loss, _ = cb.pce_loss(np.array([[1.0, 0.0, 0.0]]), [0], book(P), 1e-3)
        assert loss < 1e-100

    def test_reference_oracle(self):
        rng = np.random.default_rng(0)
        Z, P = rng.normal(size=(9, 5)), rng.normal(size=(6, 5))
        y = rng.integers(0, 6, size=9)
        loss, _ = cb.pce_loss(Z, y, book(P), 0.1)
        assert abs(loss - reference_ce(Z, y, P, 0.1)) < 1e-10

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            cb.pce_loss(np.zeros((0, 3)), [], book(np.eye(3)), 0.1)

    def test_gradient(self):
        assert gradcheck.check_pce(np.random.default_rng(0)).error < 1e-4


class TestEntropy:
    def test_collapse_and_uniform(self):
        assert cb.usage_entropy([3, 3, 3], 8) == 0.0
        assert cb.usage_entropy([0, 1, 2, 3], 4) == pytest.approx(math.log(4))
