import numpy as np
import pytest

from chunkstream.tensor import ShapeError
from chunkstream.videoldm import UNetConfig, VideoUNet, init_unet_weights, unet_epsilon, widen_first_conv


@pytest.fixture(scope="module")
def setup(small_cfg, schedule):
    w = init_unet_weights(small_cfg, 3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(small_cfg.F, small_cfg.h, small_cfg.w, small_cfg.c))
    ctx = rng.normal(size=(77, small_cfg.d_text))
    return w, x, ctx


def test_output_shape(small_cfg, schedule, setup):
    w, x, ctx = setup
    assert unet_epsilon(x, 500, ctx, w, small_cfg, schedule).shape == x.shape


def test_default_config_shape(schedule):
    cfg = UNetConfig()
    x = np.zeros((cfg.F, cfg.h, cfg.w, cfg.c))
    out = VideoUNet(cfg, init_unet_weights(cfg), schedule)(x, 10, np.zeros((77, cfg.d_text)))
    assert out.shape == x.shape and np.isfinite(out).all()


def test_zero_output_projection_gives_zero(small_cfg, schedule, setup):
    w, x, ctx = setup
    w0 = dict(w, **{"out.conv_w": np.zeros_like(w["out.conv_w"]), "out.conv_b": np.zeros_like(w["out.conv_b"]),
                    "out.eps_skip": np.zeros(1)})
    assert not unet_epsilon(x, 500, ctx, w0, small_cfg, schedule).any()


def test_deterministic(small_cfg, schedule, setup):
    w, x, ctx = setup
    assert np.array_equal(unet_epsilon(x, 321, ctx, w, small_cfg, schedule),
                          unet_epsilon(x, 321, ctx, w, small_cfg, schedule))


def test_weights_regenerate_bitwise(small_cfg):
    a, b = init_unet_weights(small_cfg, 9), init_unet_weights(small_cfg, 9)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.isfinite(v).all() for v in a.values())
    assert not np.array_equal(a["conv_in.w"], init_unet_weights(small_cfg, 10)["conv_in.w"])


def test_context_changes_output(small_cfg, schedule, setup):
    w, x, ctx = setup
    assert not np.array_equal(unet_epsilon(x, 500, ctx, w, small_cfg, schedule),
                              unet_epsilon(x, 500, ctx + 1.0, w, small_cfg, schedule))


def test_shape_errors(small_cfg, schedule, setup):
    w, x, ctx = setup
    with pytest.raises(ShapeError):
        unet_epsilon(x[..., :1], 500, ctx, w, small_cfg, schedule)
    with pytest.raises(ShapeError):
        unet_epsilon(x, 500, ctx[:, :3], w, small_cfg, schedule)
    with pytest.raises(ShapeError):
        unet_epsilon(x, 500, [ctx] * 2, w, small_cfg, schedule)


@pytest.mark.parametrize("kwargs", [dict(level_channels=(8,)), dict(h=5), dict(F=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        UNetConfig(**kwargs)


def test_swapping_pooled_blocks_is_equivariant_without_spatial_mixing(small_cfg, schedule, setup):
    # keep only the centre tap of every 3x3 kernel: all remaining spatial
    # coupling is the 2x2 pooling, so swapping aligned 2x2 blocks must commute
    w, x, ctx = setup
    w1 = {}
    for k, v in w.items():
        if v.ndim == 4 and v.shape[:2] == (3, 3):
            v = v.copy()
            mask = np.zeros((3, 3, 1, 1))
            mask[1, 1] = 1.0
            v = v * mask
        w1[k] = v

    def swap(a):
        a = a.copy()
        a[:, 0:2, 0:2], a[:, 2:4, 2:4] = a[:, 2:4, 2:4].copy(), a[:, 0:2, 0:2].copy()
        return a

    out = unet_epsilon(x, 500, ctx, w1, small_cfg, schedule)
    out_swapped = unet_epsilon(swap(x), 500, ctx, w1, small_cfg, schedule)
    assert np.allclose(out_swapped, swap(out), atol=1e-12)


def test_widen_first_conv_zero_slice_is_transparent(small_cfg, schedule, setup):
    w, x, ctx = setup
    w2, cfg2 = widen_first_conv(w, small_cfg, 3)
    extra = np.random.default_rng(1).normal(size=x.shape[:-1] + (3,))
    assert cfg2.input_channels == small_cfg.c + 3
    assert np.array_equal(unet_epsilon(np.concatenate([x, extra], -1), 500, ctx, w2, cfg2, schedule),
                          unet_epsilon(x, 500, ctx, w, small_cfg, schedule))
