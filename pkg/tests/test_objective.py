"""Task losses, BPC conversion, the combined objective, and the aspect head."""

import math

import numpy as np
import pytest

from mzu.errors import DataError, ShapeError
from mzu.numerics import CHECK_DTYPE, ParamStore, constant, gradient_check, ops
from mzu.objective import (
    LossBreakdown,
    aspect_logits,
    bpc,
    classify_aspect,
    combined_objective,
    disagreement_total,
    lm_loss,
)
from mzu.zones import zone_disagreement

RNG = np.random.default_rng(31)


class TestLmLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = constant(np.zeros((4, 27)), CHECK_DTYPE)
        loss = lm_loss(logits, np.zeros(4, dtype=int))
        np.testing.assert_allclose(loss.item(), math.log(27), rtol=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        previous = None
        for margin in (5.0, 20.0, 60.0):
            logits = np.zeros((3, 9))
            targets = np.array([1, 4, 8])
            logits[np.arange(3), targets] = margin
            loss = lm_loss(constant(logits, CHECK_DTYPE), targets).item()
            if previous is not None:
                assert loss < previous
            previous = loss
        assert previous < 1e-8

    def test_matches_log_sum_exp_oracle(self):
        logits = RNG.normal(size=(5, 7))
        targets = RNG.integers(0, 7, size=5)
        loss = lm_loss(constant(logits, CHECK_DTYPE), targets).item()
        expected = np.mean([
            math.log(np.exp(row).sum()) - row[t]
            for row, t in zip(logits, targets)
        ])
        np.testing.assert_allclose(loss, expected, rtol=1e-10)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            lm_loss(constant(np.zeros((4, 5))), np.zeros(3, dtype=int))


class TestBpc:
    def test_log27_nats(self):
        np.testing.assert_allclose(bpc(math.log(27)), math.log2(27), rtol=1e-12)

    def test_zero(self):
        assert bpc(0.0) == 0.0

    def test_ln2_is_one_bit(self):
        np.testing.assert_allclose(bpc(math.log(2)), 1.0, rtol=1e-12)

    def test_monotone_in_task_loss(self):
        values = np.linspace(0.1, 5.0, 20)
        converted = [bpc(v) for v in values]
        assert all(b2 > b1 for b1, b2 in zip(converted, converted[1:]))


class TestCombinedObjective:
    def test_lambda_zero_is_task_loss(self):
        task = constant(np.asarray(2.5), CHECK_DTYPE)
        dis = constant(np.asarray(-7.0), CHECK_DTYPE)
        out = combined_objective(task, dis, 0.0)
        assert out.item() == 2.5

    def test_identical_zones_add_term_count(self):
        # every term is exactly -1, so the sum over s tokens and m
        # transforms is -(s*m) and the minimized loss gains +s*m
        row = RNG.normal(size=4)
        zones = constant(np.tile(row, (3, 4, 1)), CHECK_DTYPE)   # batch of 3
        terms = [zone_disagreement(zones) for _ in range(2)]     # m = 2
        total = disagreement_total(terms)
        np.testing.assert_allclose(total.item(), -6.0, atol=1e-9)
        task = constant(np.asarray(1.25), CHECK_DTYPE)
        out = combined_objective(task, total, 1.0)
        np.testing.assert_allclose(out.item(), 1.25 + 6.0, atol=1e-9)

    def test_matches_hand_summed_oracle(self):
        zone_sets = [RNG.normal(size=(2, 4, 3)) for _ in range(3)]
        terms = [zone_disagreement(constant(z, CHECK_DTYPE)) for z in zone_sets]
        total = disagreement_total(terms).item()
        expected = 0.0
        for z in zone_sets:
            for b in range(2):
                cos = np.zeros((4, 4))
                for i in range(4):
                    for j in range(4):
                        ni, nj = np.linalg.norm(z[b, i]), np.linalg.norm(z[b, j])
                        cos[i, j] = z[b, i] @ z[b, j] / (ni * nj)
                expected += -cos.mean()
        np.testing.assert_allclose(total, expected, rtol=1e-8)
        lam = 0.7
        task = constant(np.asarray(3.0), CHECK_DTYPE)
        np.testing.assert_allclose(
            combined_objective(task, disagreement_total(terms), lam).item(),
            3.0 - lam * expected, rtol=1e-8)

    def test_gradient_is_linear_combination(self):
        store = ParamStore(dtype=CHECK_DTYPE)
        store.add("z", RNG.normal(size=(1, 4, 3)))
        lam = 0.5

        def f(p):
            task = ops.reduce_sum(ops.mul(p["z"], p["z"]))
            return combined_objective(task, disagreement_total(
                [zone_disagreement(p["z"])]), lam)

        report = gradient_check(f, store, eps=1e-6, tol=1e-6)
        assert report.passed, report.summary()

    def test_breakdown_combined_identity(self):
        breakdown = LossBreakdown(task_loss=2.0, disagreement_sum=-3.0, lam=1.0)
        assert breakdown.combined == 5.0


class TestClassifyAspect:
    def head(self, state_width=6, aspect_width=3):
        store = ParamStore(dtype=CHECK_DTYPE)
        w = store.add("w", RNG.normal(size=(state_width + aspect_width, 4)))
        b = store.add("b", RNG.normal(size=(4,)))
        return w, b

    def test_distribution_sums_to_one(self):
        w, b = self.head()
        states = [constant(RNG.normal(size=(1, 6)), CHECK_DTYPE) for _ in range(5)]
        aspect = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
        probs = classify_aspect(states, aspect, w, b).data
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-9)
        assert (probs > 0).all()

    def test_identical_states_pool_to_single_state(self):
        w, b = self.head()
        state = RNG.normal(size=(1, 6))
        states = [constant(state, CHECK_DTYPE) for _ in range(4)]
        aspect = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
        one = classify_aspect(states, aspect, w, b).data
        single = classify_aspect(states[:1], aspect, w, b).data
        np.testing.assert_allclose(one, single, rtol=1e-10)

    def test_matches_pool_concat_affine_oracle(self):
        w, b = self.head()
        states = [RNG.normal(size=(1, 6)) for _ in range(3)]
        aspect = RNG.normal(size=(1, 3))
        logits = aspect_logits([constant(s, CHECK_DTYPE) for s in states],
                               constant(aspect, CHECK_DTYPE), w, b).data
        pooled = np.mean(np.concatenate(states, axis=0), axis=0, keepdims=True)
        expected = np.concatenate([pooled, aspect], axis=-1) @ w.data + b.data
        np.testing.assert_allclose(logits, expected, rtol=1e-10)

    def test_invariant_to_state_permutation(self):
        w, b = self.head()
        states = [constant(RNG.normal(size=(1, 6)), CHECK_DTYPE) for _ in range(6)]
        aspect = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
        base = classify_aspect(states, aspect, w, b).data
        shuffled = classify_aspect(states[::-1], aspect, w, b).data
        np.testing.assert_allclose(base, shuffled, rtol=1e-10)

    def test_empty_sentence_rejected(self):
        w, b = self.head()
        with pytest.raises(DataError):
            classify_aspect([], constant(np.zeros((1, 3))), w, b)
