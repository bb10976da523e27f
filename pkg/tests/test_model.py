import numpy as np
import pytest

from lingseg.errors import ConfigError, DimensionError, ParameterError
from lingseg.model import (
    ForwardTrace,
    NetConfig,
    build_location_features,
    backbone_encode,
    forward,
    forward_single,
    init_params,
    predict_mask,
)
from lingseg.tensor import Tensor


def tiny_config(**over):
    base = dict(image_hw=(32, 32), depth=2, channels=8, backbone_blocks=1,
                backbone_channels=8, embed_dim=4, hidden_dim=8)
    base.update(over)
    return NetConfig(**base)


def run_forward(config, seed=0, batch=2, training=False, rng=None):
    prng = np.random.default_rng(seed)
    params = init_params(config, vocab_size=10, rng=prng)
    h, w = config.image_hw
    images = prng.random((batch, 3, h, w))
    ids = prng.integers(2, 10, size=(batch, 5))
    lengths = np.array([5] * batch)
    out = forward(images, ids, lengths, params, config, training=training, rng=rng)
    return out, params


class TestNetConfig:
    def test_paper_scale_geometry(self):
        cfg = NetConfig(image_hw=(512, 512), depth=4, channels=72,
                        backbone_blocks=3, backbone_channels=1024, hidden_dim=256)
        assert cfg.grid_hw() == (64, 64)
        assert cfg.feature_channels == 1032

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            NetConfig(image_hw=(48, 48), depth=3, backbone_blocks=2, hidden_dim=96)

    def test_hidden_divisible_by_depth(self):
        with pytest.raises(ConfigError):
            tiny_config(hidden_dim=9)

    def test_kernel_plan_modes(self):
        plan = tiny_config().kernel_plan()
        assert plan.down is not None and len(plan.down) == 2
        assert plan.down[0].cin == tiny_config().feature_channels
        assert plan.down[1].cin == 8
        plan = tiny_config(modulation="expanding_only").kernel_plan()
        assert plan.down is None and len(plan.up) == 2


class TestLocationFeatures:
    def test_eight_channels(self):
        assert build_location_features(4, 6).shape == (8, 4, 6)

    def test_two_by_two_grid_values(self):
        loc = build_location_features(2, 2)
        # cell (0,0): x_min=-1, x_center=-0.5, x_max=0
        assert loc[0, 0, 0] == -1.0
        assert loc[1, 0, 0] == -0.5
        assert loc[2, 0, 0] == 0.0
        assert loc[3, 0, 0] == -1.0
        assert loc[4, 0, 0] == -0.5
        assert loc[5, 0, 0] == 0.0

    def test_constant_size_channels(self):
        loc = build_location_features(4, 8)
        assert (loc[6] == 1.0 / 8).all()
        assert (loc[7] == 1.0 / 4).all()

    def test_x_varies_along_width_only(self):
        loc = build_location_features(3, 5)
        assert (np.diff(loc[1], axis=0) == 0).all()
        assert (np.diff(loc[4], axis=1) == 0).all()

    def test_invalid_extent(self):
        with pytest.raises(ParameterError):
            build_location_features(0, 4)


class TestBackbone:
    def test_desk_shape(self):
        cfg = NetConfig()  # 64x64, 2 blocks, 64 channels
        params = init_params(cfg, vocab_size=10, rng=np.random.default_rng(0))
        images = Tensor(np.random.default_rng(1).random((2, 3, 64, 64)))
        i0 = backbone_encode(images, params, cfg, training=False)
        assert i0.shape == (2, 72, 16, 16)

    def test_zero_image_zero_params_leaves_location(self):
        cfg = tiny_config()
        params = init_params(cfg, vocab_size=10, rng=np.random.default_rng(2))
        for name, t in params.named_tensors():
            if name.startswith("backbone") and "gamma" not in name:
                t.data[...] = 0.0
        images = Tensor(np.zeros((1, 3, 32, 32)))
        i0 = backbone_encode(images, params, cfg, training=False)
        gh, gw = cfg.grid_hw()
        np.testing.assert_array_equal(i0.data[:, :cfg.backbone_channels], 0.0)
        np.testing.assert_allclose(i0.data[0, cfg.backbone_channels:],
                                   build_location_features(gh, gw))

    def test_bad_input_shape(self):
        cfg = tiny_config()
        params = init_params(cfg, vocab_size=10, rng=np.random.default_rng(3))
        with pytest.raises(DimensionError):
            backbone_encode(Tensor(np.zeros((1, 1, 32, 32))), params, cfg, False)


class TestForward:
    def test_output_shape_and_range(self):
        out, _ = run_forward(tiny_config())
        assert out.p.shape == (2, 1, 32, 32)
        assert (out.p.data > 0).all() and (out.p.data < 1).all()

    def test_aux_count_equals_depth(self):
        out, _ = run_forward(tiny_config())
        assert len(out.aux) == 2
        for a in out.aux:
            assert (a.data > 0).all() and (a.data < 1).all()

    def test_aux_resolutions_double_each_level(self):
        # depth 2, backbone 1 block on 32x32: Up_2 at 8 -> aux 16? deepest head
        # doubles its level's resolution; list is deepest first
        out, _ = run_forward(tiny_config())
        sizes = [a.shape[-1] for a in out.aux]
        assert sizes == sorted(sizes)
        assert all(32 % s == 0 for s in sizes)

    def test_deterministic(self):
        out1, _ = run_forward(tiny_config(), seed=5)
        out2, _ = run_forward(tiny_config(), seed=5)
        np.testing.assert_array_equal(out1.p.data, out2.p.data)

    def test_language_dependence(self):
        cfg = tiny_config()
        prng = np.random.default_rng(6)
        params = init_params(cfg, vocab_size=10, rng=prng)
        images = prng.random((1, 3, 32, 32))
        ids_a = np.array([[2, 3, 4]])
        ids_b = np.array([[2, 9, 4]])
        lengths = np.array([3])
        pa = forward(images, ids_a, lengths, params, cfg).p.data
        pb = forward(images, ids_b, lengths, params, cfg).p.data
        assert np.abs(pa - pb).max() > 0

    def test_ablation_containment(self):
        out, _ = run_forward(tiny_config(modulation="expanding_only",
                                         text_kernel_spatial=1))
        assert out.trace.down_modulations == 0
        assert out.trace.up_modulations == 2
        assert out.trace.kernel_spatials == {1}

    def test_full_model_trace(self):
        out, _ = run_forward(tiny_config())
        assert out.trace.down_modulations == 2
        assert out.trace.up_modulations == 2
        assert out.trace.kernel_spatials == {3}

    def test_shape_roundtrip_random_configs(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            depth = int(rng.integers(1, 4))
            blocks = int(rng.integers(1, 3))
            factor = 2 ** (depth + blocks)
            h = factor * int(rng.integers(1, 3))
            w = factor * int(rng.integers(1, 3))
            cfg = NetConfig(image_hw=(h, w), depth=depth, channels=4,
                            backbone_blocks=blocks, backbone_channels=4,
                            embed_dim=3, hidden_dim=2 * depth)
            out, _ = run_forward(cfg, seed=int(rng.integers(1 << 30)), batch=1)
            assert out.p.shape == (1, 1, h, w)
            assert len(out.aux) == depth

    def test_depthwise_mode_runs(self):
        out, _ = run_forward(tiny_config(text_kernel_mode="depthwise"))
        assert out.p.shape == (2, 1, 32, 32)

    def test_training_mode_with_dropout(self):
        out, _ = run_forward(tiny_config(), training=True,
                             rng=np.random.default_rng(8))
        assert np.isfinite(out.p.data).all()


class TestPredictMask:
    def test_constant_maps(self):
        p = np.full((1, 1, 4, 4), 0.7)
        assert predict_mask(p, 0.5).all()
        assert not predict_mask(p, 0.9).any()

    def test_elementwise_against_loop(self):
        rng = np.random.default_rng(9)
        p = rng.random((2, 1, 5, 5))
        mask = predict_mask(p, 0.5)
        for idx in np.ndindex(p.shape):
            assert mask[idx] == (1 if p[idx] >= 0.5 else 0)

    def test_threshold_range(self):
        with pytest.raises(ParameterError):
            predict_mask(np.zeros((1, 1, 2, 2)), 1.0)

    def test_monotone_thresholding(self):
        rng = np.random.default_rng(10)
        p = rng.random((1, 1, 8, 8))
        strict = predict_mask(p, 0.9)
        loose = predict_mask(p, 0.5)
        assert (strict <= loose).all()


class TestForwardSingle:
    def test_single_inference(self):
        cfg = tiny_config()
        params = init_params(cfg, vocab_size=10, rng=np.random.default_rng(11))
        image = np.random.default_rng(12).random((3, 32, 32))
        out = forward_single(image, [2, 5], params, cfg)
        assert out.p.shape == (1, 1, 32, 32)
