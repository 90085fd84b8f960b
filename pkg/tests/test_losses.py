import numpy as np
import pytest
from numpy.testing import assert_array_equal

from helpers import unit_rows
from modules.errors import ConfigError, InputError
from modules.losses import (
    MarginPolicy, active_triplets, itc_loss, margin_at, semantic_loss, total_loss, triplet,
)
from modules.tensor import Tensor, check_gradients, l2_normalize_rows

BATCHES = [2, 4, 8, 16]


def hinge_sum(S, positives, negatives, margin, adamine=True):
    """Explicit triple loop over anchors x positives x negatives."""
    total, active, count = 0.0, 0, 0
    for a in range(S.shape[0]):
        for p in positives(a):
            for n in negatives(a):
                value = triplet(1.0 - S[a, p], 1.0 - S[a, n], margin)
                total += value
                active += value > 0
                count += 1
    return total / max(active if adamine else count, 1), active


def itc_oracle(E_r, E_v, margin, adamine=True):
    batch = len(E_r)
    others = lambda a: [j for j in range(batch) if j != a]
    loss_r, delta_r = hinge_sum(E_r @ E_v.T, lambda a: [a], others, margin, adamine)
    loss_v, delta_v = hinge_sum(E_v @ E_r.T, lambda a: [a], others, margin, adamine)
    return loss_r + loss_v, delta_r, delta_v


def semantic_oracle(E_r, E_v, classes, margin):
    labeled = [i for i, c in enumerate(classes) if c is not None]
    if len(labeled) < 2:
        return 0.0
    Er, Ev = E_r[labeled], E_v[labeled]
    labels = [classes[i] for i in labeled]
    positives = lambda a: [j for j in range(len(labeled)) if j != a and labels[j] == labels[a]]
    negatives = lambda a: [j for j in range(len(labeled)) if labels[j] != labels[a]]
    loss_r, _ = hinge_sum(Er @ Ev.T, positives, negatives, margin)
    loss_v, _ = hinge_sum(Ev @ Er.T, positives, negatives, margin)
    return loss_r + loss_v


class TestTriplet:
    def test_boundary(self):
        assert triplet(0.0, 0.3, 0.3) == 0.0

    def test_direct_evaluation(self):
        assert abs(triplet(0.5, 0.6, 0.3) - 0.2) < 1e-12

    def test_satisfied(self):
        assert triplet(0.1, 5.0, 0.3) == 0.0


class TestMarginSchedule:
    def test_inc_values(self):
        policy = MarginPolicy(kind="inc")
        assert [margin_at(policy, e) for e in (0, 10, 50, 60)] == [0.05, 0.10, 0.30, 0.30]

    def test_inc_monotone_and_constant_after_clamp(self):
        policy = MarginPolicy(kind="inc")
        values = [margin_at(policy, e) for e in range(80)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert set(values[50:]) == {0.3}
        assert values[49] < 0.3

    @pytest.mark.parametrize("delta, expected", [(0, 0.3), (1, 0.3), (6, 0.05), (10, 0.05), (2, 0.15)])
    def test_ada_values(self, delta, expected):
        assert abs(margin_at(MarginPolicy(kind="ada"), 7, delta) - expected) < 1e-12

    def test_ada_stays_in_bounds(self):
        policy = MarginPolicy(kind="ada")
        for delta in range(0, 200):
            assert 0.05 <= margin_at(policy, 0, delta) <= 0.3

    def test_fixed(self):
        policy = MarginPolicy(kind="fixed")
        assert {margin_at(policy, e, d) for e in range(5) for d in range(5)} == {0.3}

    def test_validation(self):
        with pytest.raises(ConfigError):
            MarginPolicy(kind="cosine")
        with pytest.raises(ConfigError):
            MarginPolicy(clamp_min=0.4, clamp_max=0.3)


class TestItcLoss:
    @pytest.mark.parametrize("batch", BATCHES)
    def test_matches_brute_force(self, batch):
        rng = np.random.default_rng(batch)
        for _ in range(100):
            E_r, E_v = unit_rows(rng, batch, 5), unit_rows(rng, batch, 5)
            margin = float(rng.uniform(0.05, 0.5))
            loss, stats = itc_loss(Tensor(E_r), Tensor(E_v), margin)
            expected, delta_r, delta_v = itc_oracle(E_r, E_v, margin)
            assert abs(loss.item() - expected) < 1e-9
            assert (stats.delta_r, stats.delta_v) == (delta_r, delta_v)
            assert stats.triplets_r == stats.triplets_v == batch * (batch - 1)

    @pytest.mark.parametrize("batch", BATCHES)
    def test_without_adamine_divides_by_triplet_count(self, batch):
        rng = np.random.default_rng(100 + batch)
        E_r, E_v = unit_rows(rng, batch, 5), unit_rows(rng, batch, 5)
        loss, _ = itc_loss(Tensor(E_r), Tensor(E_v), 0.3, adamine=False)
        expected, _, _ = itc_oracle(E_r, E_v, 0.3, adamine=False)
        assert abs(loss.item() - expected) < 1e-9

    def test_per_direction_margins(self):
        rng = np.random.default_rng(7)
        E_r, E_v = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        loss, stats = itc_loss(Tensor(E_r), Tensor(E_v), (0.1, 0.4))
        loss_r, delta_r = hinge_sum(E_r @ E_v.T, lambda a: [a], lambda a: [j for j in range(6) if j != a], 0.1)
        loss_v, delta_v = hinge_sum(E_v @ E_r.T, lambda a: [a], lambda a: [j for j in range(6) if j != a], 0.4)
        assert abs(loss.item() - (loss_r + loss_v)) < 1e-9
        assert (stats.delta_r, stats.delta_v) == (delta_r, delta_v)

    def test_perfect_alignment(self):
        E = np.eye(4)
        loss, stats = itc_loss(Tensor(E), Tensor(E), 0.3)
        assert loss.item() == 0.0
        assert (stats.delta_r, stats.delta_v) == (0, 0)

    def test_zero_margin_counts_only_violations(self):
        rng = np.random.default_rng(8)
        E_r, E_v = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
        S = E_r @ E_v.T
        violations = sum(S[a, n] > S[a, a] for a in range(5) for n in range(5) if n != a)
        _, stats = itc_loss(Tensor(E_r), Tensor(E_v), 0.0)
        assert stats.delta_r == violations

    def test_batch_of_one(self):
        with pytest.raises(InputError):
            itc_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), 0.3)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        E_r, E_v = unit_rows(rng, 8, 4), unit_rows(rng, 8, 4)
        order = rng.permutation(8)
        classes = [int(c) for c in rng.integers(0, 3, 8)]
        base, _ = itc_loss(Tensor(E_r), Tensor(E_v), 0.2)
        permuted, _ = itc_loss(Tensor(E_r[order]), Tensor(E_v[order]), 0.2)
        assert abs(base.item() - permuted.item()) < 1e-12
        sem = semantic_loss(Tensor(E_r), Tensor(E_v), classes, 0.3).item()
        sem_permuted = semantic_loss(Tensor(E_r[order]), Tensor(E_v[order]), [classes[i] for i in order], 0.3).item()
        assert abs(sem - sem_permuted) < 1e-12

    def test_gradient_is_zero_on_the_hinge_boundary(self):
        E_r = Tensor(np.eye(3), requires_grad=True)
        E_v = Tensor(np.eye(3), requires_grad=True)
        # every hinge is 0 - 1 + 1 = 0 exactly
        loss, stats = itc_loss(E_r, E_v, 1.0)
        loss.backward()
        assert stats.delta_r == 0
        assert_array_equal(E_r.grad, np.zeros((3, 3)))
        assert_array_equal(E_v.grad, np.zeros((3, 3)))

    def test_active_triplets_matches_loss_stats(self):
        rng = np.random.default_rng(10)
        E_r, E_v = unit_rows(rng, 8, 4), unit_rows(rng, 8, 4)
        _, stats = itc_loss(Tensor(E_r), Tensor(E_v), 0.3)
        assert active_triplets(E_r, E_v, 0.3) == (stats.delta_r, stats.delta_v)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        raw_r = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        raw_v = Tensor(rng.normal(size=(4, 5)), requires_grad=True)

        def loss():
            return itc_loss(l2_normalize_rows(raw_r), l2_normalize_rows(raw_v), 0.3, adamine=False)[0]

        assert check_gradients(loss, [raw_r, raw_v]) < 1e-3


class TestSemanticLoss:
    @pytest.mark.parametrize("batch", BATCHES)
    def test_matches_brute_force(self, batch):
        rng = np.random.default_rng(200 + batch)
        for _ in range(100):
            E_r, E_v = unit_rows(rng, batch, 5), unit_rows(rng, batch, 5)
            classes = [int(c) if rng.random() < 0.6 else None for c in rng.integers(0, 3, batch)]
            margin = float(rng.uniform(0.05, 0.5))
            loss = semantic_loss(Tensor(E_r), Tensor(E_v), classes, margin).item()
            assert abs(loss - semantic_oracle(E_r, E_v, classes, margin)) < 1e-9

    def test_two_classes_two_samples_each(self):
        E_r = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.6, 0.8]])
        E_v = np.array([[0.6, 0.8], [1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
        classes = [0, 0, 1, 1]
        loss = semantic_loss(Tensor(E_r), Tensor(E_v), classes, 0.3).item()
        assert abs(loss - semantic_oracle(E_r, E_v, classes, 0.3)) < 1e-12
        assert loss > 0

    def test_single_class_has_no_negatives(self):
        E = unit_rows(np.random.default_rng(0), 4, 3)
        assert semantic_loss(Tensor(E), Tensor(E[::-1].copy()), [2, 2, 2, 2], 0.3).item() == 0.0

    def test_no_labels(self):
        E = unit_rows(np.random.default_rng(1), 4, 3)
        assert semantic_loss(Tensor(E), Tensor(E), [None] * 4, 0.3).item() == 0.0

    def test_unlabeled_rows_do_not_contribute(self):
        rng = np.random.default_rng(2)
        E_r, E_v = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
        classes = [0, None, 1, 0, None, 1]
        changed_r, changed_v = E_r.copy(), E_v.copy()
        changed_r[[1, 4]] = unit_rows(rng, 2, 3)
        changed_v[[1, 4]] = unit_rows(rng, 2, 3)
        assert abs(semantic_loss(Tensor(E_r), Tensor(E_v), classes, 0.3).item()
                   - semantic_loss(Tensor(changed_r), Tensor(changed_v), classes, 0.3).item()) < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(3)
        raw_r = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        raw_v = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        classes = [0, 1, 0, 1, None, 1]

        def loss():
            return semantic_loss(l2_normalize_rows(raw_r), l2_normalize_rows(raw_v), classes, 0.3, adamine=False)

        assert check_gradients(loss, [raw_r, raw_v]) < 1e-3


class TestTotalLoss:
    def test_default_weights(self):
        assert abs(total_loss(Tensor(1.0), Tensor(2.0), Tensor(0.5)).item() - 1.7) < 1e-12

    def test_itm_weight_zero(self):
        assert total_loss(Tensor(1.0), Tensor(0.0), Tensor(9.0), lambda_itm=0.0).item() == 1.0

    def test_all_zero(self):
        assert total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0)).item() == 0.0

    def test_weights_reach_components(self):
        parts = [Tensor(v, requires_grad=True) for v in (1.0, 2.0, 0.5)]
        total_loss(*parts, lambda_sem=0.1, lambda_itm=1.0).backward()
        assert [p.grad.item() for p in parts] == [1.0, 0.1, 1.0]

