"""Mask sampling strategies and the channel gate pair."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskcodec import tensor as T
from maskcodec.errors import ConfigError, ShapeError
from maskcodec.masking import (ChannelGate, MaskSpec, apply_mask, cube_mask,
                               exact_count, lccm_complete, lcmm_select,
                               spatial_merge, structured_mask)


def _feature(shape=(4, 4, 4), seed=0):
    return np.random.default_rng(seed).normal(size=shape) + 1.0


class TestMaskSpec:
    def test_ratio_bounds(self):
        with pytest.raises(ConfigError):
            MaskSpec("cube", 1.5, 0)
        with pytest.raises(ConfigError):
            MaskSpec("cube", -0.1, 0)

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            MaskSpec("diagonal", 0.5, 0)

    def test_strategy_function_guards(self):
        f = _feature()
        with pytest.raises(ConfigError):
            cube_mask(f, MaskSpec("spatial", 0.5, 0))
        with pytest.raises(ConfigError):
            structured_mask(f, MaskSpec("cube", 0.5, 0))
        with pytest.raises(ConfigError):
            spatial_merge(f, MaskSpec("channel", 0.5, 0))


class TestCubeMask:
    def test_ratio_zero_is_identity(self):
        f = _feature()
        out = cube_mask(f, MaskSpec("cube", 0.0, 3))
        np.testing.assert_array_equal(out.data, f)

    def test_ratio_one_zeroes_everything(self):
        out = cube_mask(_feature(), MaskSpec("cube", 1.0, 3))
        assert np.all(out.data == 0.0)

    def test_exact_count_4x4x4_half(self):
        out = cube_mask(_feature(), MaskSpec("cube", 0.5, 9))
        assert int((out.data == 0.0).sum()) == 32

    def test_deterministic_per_spec_and_shape(self):
        spec = MaskSpec("cube", 0.3, 77)
        a = cube_mask(_feature(seed=1), spec).data == 0.0
        b = cube_mask(_feature(seed=2), spec).data == 0.0
        np.testing.assert_array_equal(a, b)

    def test_batch_gets_distinct_masks(self):
        f = np.ones((2, 4, 4, 4))
        out = cube_mask(f, MaskSpec("cube", 0.5, 5)).data
        assert (out[0] == 0).sum() == 32 and (out[1] == 0).sum() == 32
        assert not np.array_equal(out[0], out[1])

    def test_unmasked_elements_unchanged(self):
        f = _feature()
        out = cube_mask(f, MaskSpec("cube", 0.5, 11)).data
        keep = out != 0.0
        np.testing.assert_array_equal(out[keep], f[keep])

    def test_monte_carlo_uniformity(self):
        # 10k seeded draws on 4x4x4 at rho=0.5: per-position frequency within
        # the binomial 3-sigma band [0.485, 0.515]; the acceptance band is looser.
        counts = np.zeros(64)
        f = np.ones((4, 4, 4))
        for s in range(10_000):
            out = cube_mask(f, MaskSpec("cube", 0.5, s)).data
            counts += (out == 0.0).reshape(-1)
        freq = counts / 10_000
        assert freq.min() >= 0.47 and freq.max() <= 0.53
        assert abs(freq.mean() - 0.5) < 1e-9  # exact-count: mean is exactly 0.5


class TestStructuredMasks:
    def test_spatial_count(self):
        out = structured_mask(_feature(), MaskSpec("spatial", 0.25, 4)).data
        zero_cols = np.all(out == 0.0, axis=2)
        assert int(zero_cols.sum()) == 4  # 4 of 16 positions, every channel

    def test_channel_count(self):
        f = _feature(shape=(3, 3, 8))
        out = structured_mask(f, MaskSpec("channel", 0.5, 4)).data
        zero_ch = np.all(out == 0.0, axis=(0, 1))
        assert int(zero_ch.sum()) == 4

    def test_ratio_zero_identity_both(self):
        f = _feature()
        for strat in ("spatial", "channel"):
            out = structured_mask(f, MaskSpec(strat, 0.0, 1))
            np.testing.assert_array_equal(out.data, f)


class TestSpatialMerge:
    def test_single_block_mean(self):
        f = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(2, 2, 1)
        out = spatial_merge(f, MaskSpec("spatial_merge", 1.0, 0)).data
        np.testing.assert_array_equal(out.reshape(2, 2), [[4.0, 4.0], [4.0, 4.0]])

    def test_ratio_zero_identity(self):
        f = _feature()
        out = spatial_merge(f, MaskSpec("spatial_merge", 0.0, 0))
        np.testing.assert_array_equal(out.data, f)

    def test_merged_blocks_preserve_channel_sums(self):
        f = _feature(shape=(6, 6, 3), seed=5)
        out = spatial_merge(f, MaskSpec("spatial_merge", 0.7, 8)).data
        sums_in = f.reshape(3, 2, 3, 2, 3).sum(axis=(1, 3))
        sums_out = out.reshape(3, 2, 3, 2, 3).sum(axis=(1, 3))
        np.testing.assert_allclose(sums_out, sums_in, rtol=1e-12)

    def test_non_divisible_dims_error_names_padding(self):
        with pytest.raises(ShapeError, match="divisible by 2"):
            spatial_merge(_feature(shape=(5, 4, 2)), MaskSpec("spatial_merge", 0.5, 0))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 8),
       st.floats(0.0, 1.0), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=80, deadline=None)
def test_exact_zero_counts_all_strategies(h, w, c, ratio, seed):
    f = np.abs(np.random.default_rng(seed).normal(size=(h, w, c))) + 0.1
    cube = cube_mask(f, MaskSpec("cube", ratio, seed)).data
    assert int((cube == 0.0).sum()) == exact_count(ratio, h * w * c)
    spatial = structured_mask(f, MaskSpec("spatial", ratio, seed)).data
    assert int(np.all(spatial == 0.0, axis=2).sum()) == exact_count(ratio, h * w)
    channel = structured_mask(f, MaskSpec("channel", ratio, seed)).data
    assert int(np.all(channel == 0.0, axis=(0, 1)).sum()) == exact_count(ratio, c)


@pytest.mark.parametrize("strategy", ["cube", "spatial", "channel", "spatial_merge"])
def test_masking_commutes_with_scaling(strategy):
    f = _feature(shape=(4, 6, 4), seed=13)
    spec = MaskSpec(strategy, 0.5, 21)
    scaled_then_masked = apply_mask(2.5 * f, spec).data
    masked_then_scaled = 2.5 * apply_mask(f, spec).data
    np.testing.assert_allclose(scaled_then_masked, masked_then_scaled, rtol=1e-12)


def _gate(scores, keep, tokens=None, learnable=True):
    scores = np.asarray(scores, dtype=np.float64)
    tokens = np.zeros_like(scores) if tokens is None else np.asarray(tokens, dtype=np.float64)
    return ChannelGate(scores=T.Tensor(scores, requires_grad=True),
                       tokens=T.Tensor(tokens, requires_grad=True),
                       keep=keep, learnable=learnable)


class TestChannelGate:
    def test_top2_by_value(self):
        gate = _gate([0.9, 0.1, 0.5, 0.7], keep=2)
        np.testing.assert_array_equal(gate.kept_channels(), [0, 3])

    def test_tie_break_lower_index(self):
        gate = _gate([0.5, 0.5], keep=1)
        np.testing.assert_array_equal(gate.kept_channels(), [0])

    def test_keep_all(self):
        gate = _gate([0.3, 0.1, 0.2], keep=3)
        np.testing.assert_array_equal(gate.kept_channels(), [0, 1, 2])

    def test_keep_bounds(self):
        with pytest.raises(ConfigError):
            _gate([0.1, 0.2], keep=3)
        with pytest.raises(ConfigError):
            _gate([0.1, 0.2], keep=0)

    def test_select_orders_kept_ascending(self):
        f = _feature(shape=(2, 2, 4), seed=3)
        gate = _gate([0.1, 0.9, 0.2, 0.8], keep=2)
        y, kept = lcmm_select(f, gate)
        np.testing.assert_array_equal(kept, [1, 3])
        np.testing.assert_array_equal(y.data, f[..., [1, 3]])

    def test_select_channel_count_mismatch(self):
        gate = _gate([0.1, 0.9, 0.2], keep=2)
        with pytest.raises(ShapeError):
            lcmm_select(_feature(shape=(2, 2, 4)), gate)

    @given(st.lists(st.integers(-32, 32), min_size=2, max_size=16),
           st.integers(-32, 32), st.integers(1, 16))
    @settings(max_examples=100, deadline=None)
    def test_argmax_set_shift_invariance(self, eighths, shift_eighths, keep):
        scores = np.array(eighths, dtype=np.float64) / 8.0
        keep = min(keep, scores.size)
        base = _gate(scores, keep).kept_channels()
        shifted = _gate(scores + shift_eighths / 8.0, keep).kept_channels()
        np.testing.assert_array_equal(base, shifted)


class TestGateComposition:
    def test_roundtrip_exact_on_kept_with_token_fill(self):
        f = _feature(shape=(3, 3, 6), seed=9)
        gate = _gate([0.4, 0.9, 0.8, 0.1, 0.6, 0.2], keep=3, tokens=[9, 8, 7, 0.25, 6, -1.5])
        y, kept = lcmm_select(f, gate)
        full = lccm_complete(y, kept, gate).data
        np.testing.assert_array_equal(kept, [1, 2, 4])
        # kept channels identical bit-for-bit
        np.testing.assert_array_equal(full[..., kept], f[..., kept])
        # dropped channels are constant token planes
        for ch in (0, 3, 5):
            assert np.all(full[..., ch] == gate.tokens.data[ch])

    def test_keep_all_is_identity(self):
        f = _feature(shape=(2, 2, 4), seed=10)
        gate = _gate([0.4, 0.3, 0.2, 0.1], keep=4, tokens=[5, 5, 5, 5])
        y, kept = lcmm_select(f, gate)
        full = lccm_complete(y, kept, gate)
        np.testing.assert_array_equal(full.data, f)

    def test_single_channel_token_fill(self):
        f = _feature(shape=(2, 2, 2), seed=12)
        gate = _gate([0.9, 0.1], keep=1, tokens=[0.0, 0.25])
        y, kept = lcmm_select(f, gate)
        full = lccm_complete(y, kept, gate).data
        assert np.all(full[..., 1] == 0.25)

    def test_complete_validates_kept(self):
        gate = _gate([0.9, 0.1, 0.2], keep=2)
        y = np.zeros((2, 2, 2))
        with pytest.raises(ShapeError, match="out of range"):
            lccm_complete(y, np.array([0, 5]), gate)
        with pytest.raises(ShapeError, match="duplicate"):
            lccm_complete(y, np.array([1, 1]), gate)
        with pytest.raises(ShapeError):
            lccm_complete(np.zeros((2, 2, 3)), np.array([0, 1, 2]), gate)

    def test_gradients_flow_to_scores_and_tokens(self):
        f = _feature(shape=(3, 3, 5), seed=4)
        gate = _gate([0.5, 0.2, 0.8, 0.1, 0.4], keep=3, tokens=[0.1] * 5)
        target = np.random.default_rng(8).normal(size=(3, 3, 5))
        with T.Graph() as g:
            y, kept = lcmm_select(T.Tensor(f), gate)
            full = lccm_complete(y, kept, gate)
            loss = T.tmean(T.square(T.sub(full, T.Tensor(target))))
        grads = T.backward(g, loss)
        assert np.linalg.norm(grads[gate.scores]) > 0
        assert np.linalg.norm(grads[gate.tokens]) > 0

    def test_restores_shape_batched(self):
        f = np.random.default_rng(3).normal(size=(2, 4, 4, 6))
        gate = _gate(np.linspace(1, 0, 6), keep=4)
        y, kept = lcmm_select(f, gate)
        assert y.shape == (2, 4, 4, 4)
        full = lccm_complete(y, kept, gate)
        assert full.shape == (2, 4, 4, 6)
        np.testing.assert_array_equal(full.data[..., kept], f[..., kept])
