import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import sigmoid
from vmseg.attention import (
    CbamParams,
    SeParams,
    cbam_forward,
    channel_attention_weights,
    effective_reduction,
    se_forward,
    spatial_attention_map,
)
from vmseg.errors import ConfigError, DimensionError
from vmseg.tensor import Parameter, Tensor, broadcast_mul, precision

seeds = st.integers(0, 2**32 - 1)


def zero_se(c, r=1):
    return SeParams(c, r, Parameter(np.zeros((c // r, c)), "w1"), Parameter(np.zeros((c, c // r)), "w2"))


def zero_cbam(c, r=1, k=3):
    return CbamParams(c, r, k, Parameter(np.zeros((c // r, c)), "w1"), Parameter(np.zeros((c, c // r)), "w2"),
                      Parameter(np.zeros((1, 2, k, k)), "sw"), Parameter(np.zeros(1), "sb"))


def unit_cbam():
    """C=1, W1=W2=[1], zero spatial part."""
    return CbamParams(1, 1, 1, Parameter([[1.0]], "w1"), Parameter([[1.0]], "w2"),
                      Parameter(np.zeros((1, 2, 1, 1)), "sw"), Parameter([0.0], "sb"))


class TestReduction:
    def test_clamped_to_channels(self):
        assert effective_reduction(8, 16) == 8
        assert effective_reduction(32, 16) == 16

    def test_must_divide(self):
        with pytest.raises(ConfigError):
            effective_reduction(12, 8)

    def test_even_spatial_kernel_rejected(self):
        with pytest.raises(ConfigError):
            CbamParams.create(4, 2, 4)


class TestSe:
    def test_zero_weights_halve(self):
        f = np.random.default_rng(0).standard_normal((4, 5, 5)).astype(np.float32)
        out = se_forward(Tensor(f), zero_se(4))
        assert np.array_equal(out.data, f * np.float32(0.5))

    def test_hand_composed_constant_input(self):
        # z = 2, s = sigmoid(1 * relu(1 * 2)) = sigmoid(2), output = 2 * sigmoid(2) ~= 1.7616
        with precision(np.float64):
            p = SeParams(1, 1, Parameter([[1.0]], "w1"), Parameter([[1.0]], "w2"))
            out = se_forward(Tensor(np.full((1, 3, 3), 2.0)), p)
        np.testing.assert_allclose(out.data, 2 * sigmoid(2.0), rtol=1e-15)
        assert out.data[0, 0, 0] == pytest.approx(1.7616, abs=1e-4)

    def test_zero_features(self):
        p = SeParams.create(4, 2, rng=np.random.default_rng(1))
        assert not np.any(se_forward(Tensor(np.zeros((4, 3, 3))), p).data)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            se_forward(Tensor(np.zeros((3, 2, 2))), zero_se(4))

    def test_batched(self):
        rng = np.random.default_rng(2)
        p = SeParams.create(4, 2, rng=rng)
        x = rng.standard_normal((3, 4, 5, 5))
        out = se_forward(Tensor(x), p).data
        for n in range(3):
            np.testing.assert_allclose(out[n], se_forward(Tensor(x[n]), p).data, rtol=1e-6)


class TestCbamChannel:
    def test_zero_weights(self):
        s = channel_attention_weights(Tensor(np.random.default_rng(3).standard_normal((4, 3, 3))), zero_cbam(4))
        assert np.all(s.data == 0.5)

    def test_hand_composed_constant_channel(self):
        # avg = max = 1, s = sigmoid(relu(1) + relu(1)) = sigmoid(2) ~= 0.8808
        with precision(np.float64):
            s = channel_attention_weights(Tensor(np.ones((1, 4, 4))), unit_cbam())
        assert s.data[0] == pytest.approx(sigmoid(2.0), abs=1e-15)
        assert s.data[0] == pytest.approx(0.8808, abs=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(seed=seeds, value=st.floats(-3, 3))
    def test_constant_channel_paths_agree(self, seed, value):
        rng = np.random.default_rng(seed)
        w1, w2 = rng.standard_normal((1, 1)), rng.standard_normal((1, 1))
        with precision(np.float64):
            p = CbamParams(1, 1, 1, Parameter(w1, "w1"), Parameter(w2, "w2"),
                           Parameter(np.zeros((1, 2, 1, 1)), "sw"), Parameter([0.0], "sb"))
            s = channel_attention_weights(Tensor(np.full((1, 3, 3), value)), p).data[0]
        expected = sigmoid(2 * w2[0, 0] * max(0.0, w1[0, 0] * value))
        assert s == pytest.approx(expected, rel=1e-14)


class TestCbamSpatial:
    def test_zero_kernel(self):
        m = spatial_attention_map(Tensor(np.random.default_rng(4).standard_normal((3, 4, 4))), zero_cbam(3))
        assert m.shape == (1, 4, 4) and np.all(m.data == 0.5)

    def test_hand_composed_pixel(self):
        # channels (0, 4, 2): avg 2, max 4; 1*2 + 0.5*4 = 4 -> sigmoid(4) ~= 0.9820
        with precision(np.float64):
            p = zero_cbam(3, 3, 1)
            p.spatial_weight.data[:] = np.array([1.0, 0.5]).reshape(1, 2, 1, 1)
            m = spatial_attention_map(Tensor(np.array([0.0, 4.0, 2.0]).reshape(3, 1, 1)), p)
        assert m.data.item() == pytest.approx(sigmoid(4.0), abs=1e-15)
        assert m.data.item() == pytest.approx(0.9820, abs=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(seed=seeds)
    def test_channel_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        p = CbamParams.create(4, 2, 3, rng=rng)
        f = rng.standard_normal((4, 5, 5)).astype(np.float32)
        a = spatial_attention_map(Tensor(f), p).data
        b = spatial_attention_map(Tensor(f[rng.permutation(4)]), p).data
        np.testing.assert_allclose(a, b, rtol=1e-6)


class TestCbam:
    def test_zero_parameters_quarter(self):
        f = np.random.default_rng(5).standard_normal((4, 5, 5)).astype(np.float32)
        assert np.array_equal(cbam_forward(Tensor(f), zero_cbam(4)).data, f * np.float32(0.25))

    @settings(max_examples=25, deadline=None)
    @given(seed=seeds)
    def test_composition_oracle(self, seed):
        rng = np.random.default_rng(seed)
        with precision(np.float64):
            p = CbamParams.create(3, 1, 3, rng=rng)
            p.spatial_bias.data[:] = rng.standard_normal(1)
            f = Tensor(rng.standard_normal((3, 4, 4)))
            refined = broadcast_mul(f, channel_attention_weights(f, p))
            expected = broadcast_mul(refined, spatial_attention_map(refined, p)).data
            assert np.array_equal(cbam_forward(f, p).data, expected)

    def test_zero_features(self):
        p = CbamParams.create(4, 2, 3, rng=np.random.default_rng(6))
        assert not np.any(cbam_forward(Tensor(np.zeros((4, 3, 3))), p).data)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            cbam_forward(Tensor(np.zeros((2, 3, 3))), zero_cbam(4))


class TestBlockProperties:
    @settings(max_examples=40, deadline=None)
    @given(seed=seeds, c=st.sampled_from([1, 2, 4, 8]), h=st.integers(1, 6), w=st.integers(1, 6),
           k=st.sampled_from([1, 3, 7]), scale=st.floats(0.1, 50))
    def test_shape_and_gate_range(self, seed, c, h, w, k, scale):
        rng = np.random.default_rng(seed)
        f = Tensor(rng.standard_normal((c, h, w)) * scale)
        se = SeParams.create(c, 2, rng=rng)
        cb = CbamParams.create(c, 2, k, rng=rng)
        assert se_forward(f, se).shape == cbam_forward(f, cb).shape == (c, h, w)
        gates = np.concatenate([channel_attention_weights(f, cb).data.ravel(),
                                spatial_attention_map(f, cb).data.ravel()])
        assert np.all((gates > 0) & (gates < 1))

    @settings(max_examples=40, deadline=None)
    @given(seed=seeds)
    def test_attenuation(self, seed):
        # gates in (0,1) can only shrink magnitudes
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((4, 5, 5))
        with precision(np.float64):
            se = se_forward(Tensor(f), SeParams.create(4, 2, rng=rng)).data
            cb = cbam_forward(Tensor(f), CbamParams.create(4, 2, 3, rng=rng)).data
        assert np.all(np.abs(se) <= np.abs(f)) and np.all(np.abs(cb) <= np.abs(f))
