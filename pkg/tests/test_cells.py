"""MZU / transition / GRU steps, deep transition stacks, and encoders."""

import numpy as np
import pytest

from mzu.errors import ConfigError
from mzu.numerics import CHECK_DTYPE, ParamStore, constant, gradient_check, ops
from mzu.cells import (
    CellConfig,
    CellParams,
    bidirectional_encode,
    deep_transition_step,
    encode_sequence,
    functions_per_step,
    gru_step,
    mzu_step,
    tmzu_step,
)

RNG = np.random.default_rng(77)


def build(kind="mzu", composition="sat", input_width=3, state_width=8,
          transition_depth=0, seed=0, dtype=CHECK_DTYPE, **kw):
    cfg = CellConfig(kind=kind, input_width=input_width, state_width=state_width,
                     composition=composition, zone_count=4,
                     out_count=2 if composition == "cap" else None,
                     filter_width=16, transition_depth=transition_depth, **kw)
    store = ParamStore(dtype=dtype)
    params = CellParams.create(store, "cell", cfg, np.random.default_rng(seed))
    return cfg, store, params


class TestMzuStep:
    def test_gate_zero_keeps_state(self):
        cfg, _, params = build()
        h = constant(RNG.normal(size=(2, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(2, 3)), CHECK_DTYPE)
        out, _ = mzu_step(x, h, params.depths[0], cfg,
                          gate_override=constant(np.zeros((2, 8)), CHECK_DTYPE))
        np.testing.assert_allclose(out.data, h.data, rtol=1e-12)

    def test_gate_one_takes_candidate(self):
        cfg, _, params = build()
        h = constant(RNG.normal(size=(2, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(2, 3)), CHECK_DTYPE)
        injected = constant(RNG.normal(size=(2, 8)), CHECK_DTYPE)
        out, _ = mzu_step(x, h, params.depths[0], cfg,
                          gate_override=constant(np.ones((2, 8)), CHECK_DTYPE),
                          cand_override=injected)
        np.testing.assert_allclose(out.data, injected.data, rtol=1e-12)

    def test_half_gate_convex_mix(self):
        cfg, _, params = build()
        h = constant(np.ones((1, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
        out, _ = mzu_step(x, h, params.depths[0], cfg,
                          gate_override=constant(np.full((1, 8), 0.5), CHECK_DTYPE),
                          cand_override=constant(np.zeros((1, 8)), CHECK_DTYPE))
        np.testing.assert_allclose(out.data, 0.5, rtol=1e-12)

    def test_gate_strictly_inside_unit_interval(self):
        cfg, _, params = build()
        for _ in range(100):
            h = constant(RNG.normal(scale=3.0, size=(1, 8)), CHECK_DTYPE)
            x = constant(RNG.normal(scale=3.0, size=(1, 3)), CHECK_DTYPE)
            _, trace = mzu_step(x, h, params.depths[0], cfg, capture=True)
            assert (trace.gate > 0.0).all() and (trace.gate < 1.0).all()

    def test_state_bounded_by_mix_endpoints(self):
        cfg, _, params = build()
        for _ in range(100):
            h = constant(RNG.normal(scale=2.0, size=(1, 8)), CHECK_DTYPE)
            x = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
            out, trace = mzu_step(x, h, params.depths[0], cfg, capture=True)
            bound = np.maximum(np.abs(h.data), np.abs(trace.candidate))
            assert (np.abs(out.data) <= bound + 1e-12).all()

    def test_disagreement_collector_gets_two_terms(self):
        cfg, _, params = build()
        collected = []
        mzu_step(constant(RNG.normal(size=(1, 3)), CHECK_DTYPE),
                 constant(RNG.normal(size=(1, 8)), CHECK_DTYPE),
                 params.depths[0], cfg, dzone_out=collected)
        assert len(collected) == 2
        for d in collected:
            assert -1 - 1e-9 <= d.item() <= 1e-9


class TestTransitionStep:
    def test_equals_input_free_mzu_step(self):
        cfg, _, params = build(transition_depth=1)
        h = constant(RNG.normal(size=(2, 8)), CHECK_DTYPE)
        a, _ = tmzu_step(h, params.depths[1], cfg)
        b, _ = mzu_step(None, h, params.depths[1], cfg)
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_state_zero_biases_capsule_closed_form(self):
        # every linear map sends 0 to 0, routing squashes 0 to 0, so the
        # candidate path is 0 and the gate sits at sigmoid(0) = 1/2
        cfg, _, params = build(composition="cap", transition_depth=1)
        h = constant(np.zeros((1, 8)), CHECK_DTYPE)
        out, trace = tmzu_step(h, params.depths[1], cfg, capture=True)
        np.testing.assert_allclose(trace.gate, 0.5, atol=1e-12)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_gradients_through_one_transition_step(self):
        cfg, store, params = build(composition="cap", transition_depth=1)
        h = constant(RNG.normal(size=(1, 8)), CHECK_DTYPE)
        probe = constant(RNG.normal(size=(1, 8)), CHECK_DTYPE)

        def f(p):
            out, _ = tmzu_step(h, params.depths[1], cfg)
            return ops.reduce_sum(ops.mul(out, probe))

        report = gradient_check(f, store, eps=1e-5, tol=1e-4, max_coords_per_param=20)
        assert report.passed, report.summary()


class TestGruStep:
    def test_update_forced_zero_keeps_state(self):
        cfg, _, params = build(kind="gru")
        h = constant(RNG.normal(size=(2, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(2, 3)), CHECK_DTYPE)
        out, _ = gru_step(x, h, params.depths[0], cfg,
                          update_override=constant(np.zeros((2, 8)), CHECK_DTYPE))
        np.testing.assert_allclose(out.data, h.data, rtol=1e-12)

    def test_zero_weights_halve_the_state(self):
        cfg, store, params = build(kind="gru")
        for name in store.names():
            if name.endswith("/weight") or name.endswith("/bias"):
                store.set_values(name, np.zeros(store[name].shape))
        h = RNG.normal(size=(1, 8))
        out, _ = gru_step(constant(RNG.normal(size=(1, 3)), CHECK_DTYPE),
                          constant(h, CHECK_DTYPE), params.depths[0], cfg)
        np.testing.assert_allclose(out.data, 0.5 * h, rtol=1e-10)

    def test_gradients(self):
        cfg, store, params = build(kind="gru")
        h = constant(RNG.normal(size=(1, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
        probe = constant(RNG.normal(size=(1, 8)), CHECK_DTYPE)

        def f(p):
            out, _ = gru_step(x, h, params.depths[0], cfg)
            return ops.reduce_sum(ops.mul(out, probe))

        report = gradient_check(f, store, eps=1e-5, tol=1e-4, max_coords_per_param=30)
        assert report.passed, report.summary()


class TestDeepTransition:
    def test_depth_zero_is_plain_step(self):
        cfg, _, params = build(transition_depth=0)
        h = constant(RNG.normal(size=(2, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(2, 3)), CHECK_DTYPE)
        a, _ = deep_transition_step(x, h, params)
        b, _ = mzu_step(x, h, params.depths[0], cfg)
        np.testing.assert_array_equal(a.data, b.data)

    def test_unshared_depths_have_distinct_parameters(self):
        _, store, params = build(transition_depth=1, share_depth_params=False)
        names = store.names()
        assert any(n.startswith("cell/d0/") for n in names)
        assert any(n.startswith("cell/d1/") for n in names)
        assert params.depths[0] is not params.depths[1]

    def test_shared_vs_unshared_same_first_forward(self):
        _, _, shared = build(transition_depth=1, share_depth_params=True, seed=5)
        _, _, unshared = build(transition_depth=1, share_depth_params=False, seed=5)
        h = constant(RNG.normal(size=(1, 8)), CHECK_DTYPE)
        x = constant(RNG.normal(size=(1, 3)), CHECK_DTYPE)
        a, _ = deep_transition_step(x, h, shared)
        b, _ = deep_transition_step(x, h, unshared)
        np.testing.assert_array_equal(a.data, b.data)

    def test_shared_depths_reuse_one_group(self):
        _, store, params = build(transition_depth=3, share_depth_params=True)
        assert params.depths[1] is params.depths[2] is params.depths[3]

    def test_bptt_gradient_through_five_steps(self):
        cfg, store, params = build(composition="gcn", transition_depth=1, seed=2)
        # check at a generic point: zero biases sit exactly on relu kinks
        # when a saturated composition zeroes a whole row, and central
        # differences are invalid at kinks
        jitter = np.random.default_rng(9)
        for name in store.names():
            store.set_values(name, store[name].data + 0.05 * jitter.normal(
                size=store[name].shape))
        xs = [constant(RNG.normal(size=(1, 3)), CHECK_DTYPE) for _ in range(5)]
        h0 = constant(RNG.normal(size=(1, 8)) * 0.5, CHECK_DTYPE)
        probe = constant(RNG.normal(size=(1, 8)), CHECK_DTYPE)

        def f(p):
            state = h0
            for x in xs:
                state, _ = deep_transition_step(x, state, params)
            return ops.reduce_sum(ops.mul(state, probe))

        report = gradient_check(f, store, eps=1e-5, tol=1e-3, max_coords_per_param=8)
        assert report.passed, report.summary()


class TestAblations:
    def test_only_for_mzu(self):
        with pytest.raises(ConfigError):
            CellConfig(kind="gru", input_width=3, state_width=8, ablation="regular_gate")

    @pytest.mark.parametrize("ablation", ["regular_gate", "regular_trans"])
    def test_strictly_fewer_parameters_than_full(self, ablation):
        _, full_store, _ = build(composition="cap")
        _, ablated_store, _ = build(composition="cap", ablation=ablation)
        assert ablated_store.total_parameters() < full_store.total_parameters()

    def test_functions_per_step_counts(self):
        cfg_full, _, _ = build(transition_depth=1)
        assert functions_per_step(cfg_full) == 4
        cfg_gate, _, _ = build(ablation="regular_gate")
        assert functions_per_step(cfg_gate) == 1
        cfg_gru, _, _ = build(kind="gru")
        assert functions_per_step(cfg_gru) == 0

    def test_regular_gate_collects_single_disagreement(self):
        cfg, _, params = build(ablation="regular_gate")
        collected = []
        mzu_step(constant(RNG.normal(size=(1, 3)), CHECK_DTYPE),
                 constant(RNG.normal(size=(1, 8)), CHECK_DTYPE),
                 params.depths[0], cfg, dzone_out=collected)
        assert len(collected) == 1


class TestEncoders:
    def embed(self, vocab=5, width=3):
        store = ParamStore(dtype=CHECK_DTYPE)
        return store.add("embed", RNG.normal(size=(vocab, width)) * 0.1)

    def test_empty_sequence(self):
        _, _, params = build()
        states, _ = encode_sequence(np.array([], dtype=int), self.embed(), params)
        assert states == []

    def test_single_token(self):
        cfg, _, params = build()
        embed = self.embed()
        states, _ = encode_sequence(np.array([2]), embed, params)
        assert len(states) == 1
        x = ops.embedding_lookup(embed, np.array([2]))
        expected, _ = deep_transition_step(
            x, constant(np.zeros((1, 8)), CHECK_DTYPE), params)
        np.testing.assert_array_equal(states[0].data, expected.data)

    def test_backward_is_reversed_forward(self):
        _, _, params = build()
        embed = self.embed()
        ids = np.array([0, 1, 2, 3, 1])
        fwd_on_reversed, _ = encode_sequence(ids[::-1], embed, params, direction="fwd")
        bwd, _ = encode_sequence(ids, embed, params, direction="bwd")
        for a, b in zip(fwd_on_reversed[::-1], bwd):
            np.testing.assert_array_equal(a.data, b.data)

    def test_deterministic_without_dropout(self):
        _, _, params = build()
        embed = self.embed()
        ids = np.array([0, 1, 2])
        one, _ = encode_sequence(ids, embed, params)
        two, _ = encode_sequence(ids, embed, params)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.data, b.data)

    def test_bidirectional_width_and_palindrome_symmetry(self):
        _, _, params = build()
        embed = self.embed()
        ids = np.array([0, 1, 1, 0])
        states = bidirectional_encode(ids, embed, params, params)
        assert all(s.shape == (1, 16) for s in states)
        # tied parameters on a palindrome: features mirror with halves swapped
        for i in range(len(ids)):
            j = len(ids) - 1 - i
            front = states[i].data[0]
            back = states[j].data[0]
            np.testing.assert_allclose(front[:8], back[8:], rtol=1e-10)
            np.testing.assert_allclose(front[8:], back[:8], rtol=1e-10)

    def test_unknown_token_rejected(self):
        _, _, params = build()
        with pytest.raises(Exception, match="ids"):
            encode_sequence(np.array([99]), self.embed(), params)
