"""Context pipeline: dimensions, normalization, meta-nets, probes."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mglab import diffkit as dk
from mglab.agents import Rollout, make_ac_params
from mglab.context import (
    AC_FAMILIES,
    ContextBuffer,
    FeatureSpec,
    MetaNet,
    RunningNormalizer,
    ac_feature_frame,
    grad_cosine_distance,
    normalize_and_push,
    probe_inputs,
    q_feature_frame,
)


class TestDimensions:
    def test_richest_ac_context_is_660(self):
        spec = FeatureSpec(families=AC_FAMILIES, h=10, include_std=True,
                           agent_kind="ac", n_cells=25, n_meta=1)
        assert spec.dim == 660

    def test_rich_ac_dimension(self):
        spec = FeatureSpec(families=("reward", "value", "td_error"), h=10,
                           include_std=True, agent_kind="ac")
        assert spec.dim == 60  # 2x10 per family

    def test_reward_ac_dimension(self):
        spec = FeatureSpec(families=("reward",), h=10, include_std=False)
        assert spec.dim == 10

    def test_q_reward_dimension(self):
        spec = FeatureSpec(families=("reward",), h=100, agent_kind="q")
        assert spec.dim == 100

    def test_q_rich_dimension(self):
        spec = FeatureSpec(families=("reward", "value", "td_error"), h=100, agent_kind="q")
        assert spec.dim == 300

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            FeatureSpec(families=(), h=10)
        with pytest.raises(ValueError):
            FeatureSpec(families=("states",), h=10, agent_kind="q")
        with pytest.raises(ValueError):
            FeatureSpec(families=("reward",), h=0)


class TestNormalizer:
    def test_streaming_matches_two_pass(self):
        rng = np.random.default_rng(0)
        stream = rng.normal(loc=3.0, scale=2.0, size=(500, 4))
        norm = RunningNormalizer(4)
        for row in stream:
            norm.update(row)
        np.testing.assert_allclose(norm.mean, stream.mean(axis=0), rtol=1e-9)
        np.testing.assert_allclose(norm.var, stream.var(axis=0), rtol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 60))
    def test_streaming_matches_two_pass_property(self, seed, n):
        rng = np.random.default_rng(seed)
        stream = rng.normal(size=(n, 2)) * rng.uniform(0.1, 10)
        norm = RunningNormalizer(2)
        for row in stream:
            norm.update(row)
        np.testing.assert_allclose(norm.mean, stream.mean(axis=0), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(norm.var, stream.var(axis=0), rtol=1e-9, atol=1e-12)

    def test_constant_stream_converges_to_zero(self):
        spec = FeatureSpec(families=("reward",), h=3)
        buf = ContextBuffer(spec)
        norm = RunningNormalizer(1)
        outs = [normalize_and_push(buf, norm, np.array([2.5]))[0] for _ in range(10)]
        assert abs(outs[-1]) < 1e-6

    def test_normalization_values(self):
        norm = RunningNormalizer(1)
        # seed stats: mean 0, var 1 via two symmetric samples
        norm.update(np.array([-1.0]))
        norm.update(np.array([1.0]))
        spec = FeatureSpec(families=("reward",), h=2)
        buf = ContextBuffer(spec)
        y0 = normalize_and_push(ContextBuffer(spec), RunningNormalizer(1), np.array([0.0]))
        assert y0[0] == pytest.approx(np.tanh(0.0 / np.sqrt(1e-8)))
        # mean 0 var 1: raw = mean + sqrt(var) maps to tanh(1) up to the epsilon
        y = np.tanh((1.0 - norm.mean[0]) / np.sqrt(norm.var[0] + 1e-8))
        assert y == pytest.approx(np.tanh(1.0), abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(-1e6, 1e6, allow_nan=False), m=st.floats(-10, 10), v=st.floats(0, 100))
    def test_output_always_in_range(self, x, m, v):
        # mathematically tanh is open-interval; float rounding may land on
        # the bounds, which the buffer invariant [-1, 1] still admits
        y = np.tanh((x - m) / np.sqrt(v + 1e-8))
        assert -1.0 <= y <= 1.0


class TestBuffer:
    def test_newest_first_flattening(self):
        spec = FeatureSpec(families=("reward",), h=3)
        buf = ContextBuffer(spec)
        for v in (1.0, 2.0, 3.0):
            buf.push(np.array([v]))
        np.testing.assert_array_equal(buf.flatten(), [3.0, 2.0, 1.0])
        buf.push(np.array([4.0]))
        np.testing.assert_array_equal(buf.flatten(), [4.0, 3.0, 2.0])

    def test_zero_padding_before_full(self):
        spec = FeatureSpec(families=("reward",), h=4)
        buf = ContextBuffer(spec)
        buf.push(np.array([7.0]))
        np.testing.assert_array_equal(buf.flatten(), [7.0, 0.0, 0.0, 0.0])

    def test_channel_major_layout(self):
        spec = FeatureSpec(families=("reward", "value"), h=2, agent_kind="q")
        buf = ContextBuffer(spec)
        buf.push(np.array([1.0, 10.0]))
        buf.push(np.array([2.0, 20.0]))
        np.testing.assert_array_equal(buf.flatten(), [2.0, 1.0, 20.0, 10.0])


class TestRawFeatures:
    def _batch(self, rewards):
        t = len(rewards)
        return Rollout(
            obs=np.zeros((t, 6)),
            actions=np.zeros(t, dtype=int),
            rewards=np.asarray(rewards, dtype=float),
            conts=np.ones(t),
            bootstrap_obs=np.zeros(6),
            cells=np.zeros(t, dtype=int),
        )

    def test_constant_rewards_mean_and_std(self):
        spec = FeatureSpec(families=("reward",), h=5, include_std=True)
        pol, val = make_ac_params(np.random.default_rng(0), 6, 4)
        frame = ac_feature_frame(spec, self._batch([1.0] * 8), pol, val, 0.99)
        np.testing.assert_allclose(frame, [1.0, 0.0])

    def test_grad_cosine_extremes(self):
        g = np.array([1.0, 2.0, 3.0])
        assert grad_cosine_distance(g, g) == pytest.approx(0.0, abs=1e-12)
        assert grad_cosine_distance(g, -g) == pytest.approx(2.0, abs=1e-12)
        assert grad_cosine_distance(None, g) == 0.0

    def test_q_td_error_formula(self):
        spec = FeatureSpec(families=("reward", "value", "td_error"), h=4, agent_kind="q")
        frame = q_feature_frame(spec, reward=0.5, q_sa=1.0, next_q_max=1.0, gamma=0.99)
        np.testing.assert_allclose(frame, [0.5, 1.0, 0.49])

    def test_states_family_dimension(self):
        spec = FeatureSpec(families=("states",), h=2, include_std=True, n_cells=25)
        pol, val = make_ac_params(np.random.default_rng(0), 6, 4)
        frame = ac_feature_frame(spec, self._batch([0.0] * 4), pol, val, 0.99)
        assert frame.shape == (50,)


class TestMetaNet:
    def test_zero_final_layer_is_exact_middle(self):
        net = MetaNet(np.random.default_rng(0), "alpha_ent", in_dim=10, hidden=8)
        net.params[4][:] = 0.0
        net.params[5][:] = 0.0
        for _ in range(5):
            ctx = np.random.default_rng(1).uniform(-1, 1, 10)
            assert net.predict_raw(ctx) == pytest.approx(0.5)

    def test_pretraining_centers_predictions(self):
        net = MetaNet(np.random.default_rng(2), "alpha_ent", in_dim=10, hidden=8)
        net.pretrain(np.random.default_rng(3))
        rng = np.random.default_rng(4)
        preds = [net.predict_raw(rng.uniform(-1, 1, 10)) for _ in range(1000)]
        assert np.mean(np.abs(np.array(preds) - 0.5)) < 0.02
        assert all(0.4 <= p <= 0.6 for p in preds)

    def test_pretraining_deterministic(self):
        def trained():
            net = MetaNet(np.random.default_rng(5), "epsilon", in_dim=6, hidden=4)
            net.pretrain(np.random.default_rng(6))
            return net

        a, b = trained(), trained()
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa, pb)

    def test_l2_head_scale(self):
        net = MetaNet(np.random.default_rng(7), "alpha_l2", in_dim=10, hidden=8)
        net.pretrain(np.random.default_rng(8))
        rng = np.random.default_rng(9)
        preds = [net.predict_raw(rng.uniform(-1, 1, 10)) for _ in range(100)]
        assert all(p < 1e-4 for p in preds)
        assert np.mean(preds) == pytest.approx(5e-5, rel=0.1)

    def test_traced_prediction_matches_raw(self):
        net = MetaNet(np.random.default_rng(10), "epsilon", in_dim=8, hidden=4)
        ctx = np.random.default_rng(11).uniform(-1, 1, 8)
        with dk.Tape() as tape:
            params = [tape.watch(p) for p in net.params]
            out = net.predict_traced(params, ctx)
        assert out.item() == pytest.approx(net.predict_raw(ctx), abs=1e-15)

    def test_context_is_gradient_stopped(self):
        net = MetaNet(np.random.default_rng(12), "epsilon", in_dim=8, hidden=4)
        ctx = np.random.default_rng(13).uniform(-1, 1, 8)
        with dk.Tape() as tape:
            params = [tape.watch(p) for p in net.params]
            out = net.predict_traced(params, ctx)
            grads = tape.grad(out, params)
        # perturbing the context changes the prediction but the tape holds
        # no path into it: only the weights receive gradients
        assert net.predict_raw(ctx + 0.1) != net.predict_raw(ctx)
        assert any(np.abs(g.data).sum() > 0 for g in grads)

    def test_predictions_in_range_property(self):
        net = MetaNet(np.random.default_rng(14), "alpha_ent", in_dim=6, hidden=4)
        rng = np.random.default_rng(15)
        for _ in range(100):
            p = net.predict_raw(rng.uniform(-1, 1, 6))
            assert 0.0 < p < 1.0


class TestProbes:
    def test_temporal_patterns(self):
        spec = FeatureSpec(families=("reward",), h=3)
        probes = probe_inputs(spec)
        # flattened newest-first: increasing over time reads [1, 0, -1]
        np.testing.assert_allclose(probes["increasing"], [1.0, 0.0, -1.0])
        np.testing.assert_allclose(probes["decreasing"], [-1.0, 0.0, 1.0])
        np.testing.assert_allclose(probes["high"], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(probes["low"], [-1.0, -1.0, -1.0])
        np.testing.assert_allclose(probes["zero"], [0.0, 0.0, 0.0])

    def test_means(self):
        spec = FeatureSpec(families=("reward",), h=9)
        probes = probe_inputs(spec)
        assert probes["high"].mean() == 1.0
        assert probes["low"].mean() == -1.0
        for name in ("increasing", "decreasing", "zero"):
            assert probes[name].mean() == pytest.approx(0.0, abs=1e-12)

    def test_std_channels_zero(self):
        spec = FeatureSpec(families=("reward",), h=4, include_std=True)
        probes = probe_inputs(spec)
        for vec in probes.values():
            np.testing.assert_array_equal(vec[4:], np.zeros(4))

    def test_probing_is_pure(self):
        spec = FeatureSpec(families=("reward",), h=5)
        net = MetaNet(np.random.default_rng(16), "epsilon", in_dim=spec.dim, hidden=4)
        before = [p.copy() for p in net.params]
        for vec in probe_inputs(spec).values():
            net.predict_raw(vec)
        for p, q in zip(net.params, before):
            np.testing.assert_array_equal(p, q)

    def test_rich_layout_rejected(self):
        spec = FeatureSpec(families=("reward", "value"), h=4, agent_kind="q")
        with pytest.raises(ValueError):
            probe_inputs(spec)
