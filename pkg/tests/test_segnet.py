import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vmseg.segnet as segnet
from vmseg.datapipe import binarize_mask
from vmseg.errors import ConfigError, DimensionError
from vmseg.segnet import NetConfig, _attend, _relu_conv, build_network, forward, param_summary, predict_mask
from vmseg.tensor import Tensor, no_grad


def closed_form_count(cfg: NetConfig) -> int:
    """Parameter count written out from the topology description, independent of the builder."""
    def conv(c_out, c_in, k):
        return c_out * c_in * k * k + c_out

    ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    total, prev = 0, cfg.in_channels
    for c in ch[:-1]:
        total += conv(c, prev, 3) + conv(c, c, 3)
        if cfg.downsample == "conv":
            total += conv(c, c, 3)
        prev = c
    total += conv(ch[-1], prev, 3) + conv(ch[-1], ch[-1], 3)
    for i in reversed(range(cfg.depth)):
        c = ch[i]
        total += ch[i + 1] * c * 4 + c  # 2x2 transposed conv
        total += conv(c, 2 * c if cfg.skip_mode == "concat" else c, 3) + conv(c, c, 3)
    total += conv(1, ch[0], 1)
    if cfg.variant != "baseline":
        for c in ch[:-1]:
            hidden = c // min(cfg.reduction, c)
            block = 2 * c * hidden
            if cfg.variant == "cbam":
                block += 2 * cfg.spatial_kernel ** 2 + 1
            total += block * (int(cfg.attend_encoder) + int(cfg.attend_decoder))
    return total


class TestBuild:
    def test_baseline_has_no_attention(self):
        assert build_network(NetConfig(variant="baseline", depth=2, base_channels=8)).attention_parameter_count() == 0

    def test_se_adds_sixteen_per_stage(self):
        se = build_network(NetConfig(variant="se", depth=1, base_channels=8, reduction=8))
        base = build_network(NetConfig(variant="baseline", depth=1, base_channels=8, reduction=8))
        assert se.params["enc0.se.w1"].shape == (1, 8) and se.params["enc0.se.w2"].shape == (8, 1)
        # attended stages: enc0 and dec0
        assert se.attention_parameter_count() == 32
        assert param_summary(se).total == param_summary(base).total + 32

    def test_baseline_depth1_base4_count(self):
        # hand count: 40 + 148 + 148 + 296 + 584 + 132 + 292 + 148 + 5
        net = build_network(NetConfig(variant="baseline", depth=1, base_channels=4))
        assert param_summary(net).total == 1793

    @settings(max_examples=40, deadline=None)
    @given(variant=st.sampled_from(["baseline", "se", "cbam"]), depth=st.integers(1, 3),
           base=st.sampled_from([1, 2, 4, 8]), r=st.sampled_from([1, 2, 4, 16]), k=st.sampled_from([1, 3, 7]),
           skip=st.sampled_from(["concat", "add"]), down=st.sampled_from(["conv", "maxpool"]))
    def test_count_matches_closed_form(self, variant, depth, base, r, k, skip, down):
        cfg = NetConfig(variant=variant, depth=depth, base_channels=base, reduction=r, spatial_kernel=k,
                        skip_mode=skip, downsample=down)
        summary = param_summary(build_network(cfg))
        assert summary.total == closed_form_count(cfg)
        assert summary.total == sum(count for _, _, count in summary.rows)
        assert all(name for name, _, _ in summary.rows)

    @pytest.mark.parametrize("variant", ["baseline", "se", "cbam"])
    def test_doubling_width_increases_count(self, variant):
        small = param_summary(build_network(NetConfig(variant=variant, base_channels=4))).total
        large = param_summary(build_network(NetConfig(variant=variant, base_channels=8))).total
        assert large > small

    def test_seeded_determinism(self):
        a = build_network(NetConfig(variant="cbam", seed=3)).state_dict()
        b = build_network(NetConfig(variant="cbam", seed=3)).state_dict()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = build_network(NetConfig(variant="cbam", seed=4)).state_dict()
        assert not np.array_equal(a["enc0.conv1.weight"], c["enc0.conv1.weight"])

    @pytest.mark.parametrize("field,value", [("depth", 0), ("base_channels", 0), ("variant", "unet"),
                                             ("skip_mode", "sum"), ("downsample", "stride")])
    def test_invalid_config(self, field, value):
        with pytest.raises(ConfigError):
            build_network(NetConfig(**{field: value}))

    def test_parameter_names_unique(self):
        net = build_network(NetConfig(variant="cbam", depth=3))
        names = [p.name for p in net.parameters()]
        assert len(names) == len(set(names)) and names == list(net.params)


class TestForward:
    @pytest.mark.parametrize("variant", ["baseline", "se", "cbam"])
    def test_shape_and_range(self, variant):
        net = build_network(NetConfig(variant=variant, depth=2, base_channels=4))
        x = np.random.default_rng(0).standard_normal((1, 64, 64))
        with no_grad():
            out = forward(net, x)
        assert out.shape == (1, 64, 64)
        assert out.data.min() > 0 and out.data.max() < 1

    def test_non_divisible_input(self):
        net = build_network(NetConfig(depth=2, base_channels=4))
        with pytest.raises(DimensionError):
            forward(net, np.zeros((1, 65, 64)))

    def test_wrong_channel_count(self):
        with pytest.raises(DimensionError):
            forward(build_network(NetConfig(depth=1, base_channels=2)), np.zeros((3, 8, 8)))

    def test_repeat_is_bitwise_equal(self):
        net = build_network(NetConfig(variant="cbam", depth=2, base_channels=4))
        x = np.random.default_rng(1).standard_normal((1, 16, 16))
        assert np.array_equal(forward(net, x).data, forward(net, x).data)

    @pytest.mark.parametrize("skip", ["concat", "add"])
    @pytest.mark.parametrize("down", ["conv", "maxpool"])
    def test_skip_and_downsample_modes(self, skip, down):
        net = build_network(NetConfig(variant="se", depth=2, base_channels=4, skip_mode=skip, downsample=down))
        out = forward(net, np.random.default_rng(2).standard_normal((2, 1, 16, 16)))
        assert out.shape == (2, 1, 16, 16)

    def test_batch_matches_single(self):
        net = build_network(NetConfig(variant="cbam", depth=1, base_channels=4))
        x = np.random.default_rng(3).standard_normal((3, 1, 8, 8))
        batched = forward(net, x).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], forward(net, x[n]).data, rtol=1e-5, atol=1e-7)

    def test_zero_attention_stage_is_half_of_unattended(self):
        # with zero SE weights every attended stage output is exactly 0.5x the plain stage output
        net = build_network(NetConfig(variant="se", depth=1, base_channels=4))
        for p in net.attention["enc0"].parameters:
            p.data[:] = 0
        x = Tensor(np.random.default_rng(4).standard_normal((1, 8, 8)))
        plain = _relu_conv(net, "enc0.conv2", _relu_conv(net, "enc0.conv1", x))
        assert np.array_equal(_attend(net, "enc0", plain).data, plain.data * np.float32(0.5))


class TestPredictMask:
    def test_threshold_is_inclusive(self, monkeypatch):
        monkeypatch.setattr(segnet, "forward", lambda net, x: Tensor(np.array([[[0.4, 0.5, 0.6]]])))
        assert predict_mask(None, None, 0.5).data.tolist() == [[[0, 1, 1]]]

    def test_zero_threshold_gives_all_ones(self):
        net = build_network(NetConfig(depth=1, base_channels=2))
        mask = predict_mask(net, np.random.default_rng(5).standard_normal((1, 8, 8)), 0.0)
        assert np.all(mask.data == 1)

    def test_idempotent(self):
        net = build_network(NetConfig(depth=1, base_channels=2))
        once = predict_mask(net, np.random.default_rng(6).standard_normal((1, 8, 8)), 0.5).data
        assert np.array_equal(binarize_mask(once, 0.5), once)
        assert set(np.unique(once)) <= {0.0, 1.0}
