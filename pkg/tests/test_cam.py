from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkstream.cam import (
    CamConfig, add_cond_inject, check_mask, conc_cond_inject, conc_cond_unet, condition_mask, encode_condition,
    frame_encoder, init_add_cond_weights, init_cam_weights, inject_skip,
)
from chunkstream.rng import RngStream
from chunkstream.tensor import ShapeError, group_norm_st
from chunkstream.videoldm import _layer_contexts, encode, init_unet_weights, time_embedding, unet_epsilon


@pytest.fixture(scope="module")
def parts(small_cfg):
    w = init_unet_weights(small_cfg, 1)
    cam_cfg = CamConfig(F=small_cfg.F, F_cond=2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(small_cfg.F, small_cfg.h, small_cfg.w, small_cfg.c))
    cond = rng.normal(size=(2, small_cfg.h, small_cfg.w, small_cfg.c))
    ctx = rng.normal(size=(77, small_cfg.d_text))
    return w, init_cam_weights(w, small_cfg, 2), cam_cfg, x, cond, ctx


def _proj(C, rng, zero_out=False):
    p = {k: rng.normal(size=(C, C)) for k in ("P_in", "P_Q", "P_K", "P_V", "P_out")}
    if zero_out:
        p["P_out"] = np.zeros((C, C))
    return p


def test_cam_config_bounds():
    with pytest.raises(ValueError):
        CamConfig(F=4, F_cond=5)
    with pytest.raises(ValueError):
        CamConfig(F=4, F_cond=0)


def test_fresh_frame_encoder_contributes_zero(small_cfg, parts):
    _, cw, _, _, cond, _ = parts
    assert not frame_encoder(cond, cw).any()


def test_feature_shapes_match_skips(small_cfg, schedule, parts):
    w, cw, cam_cfg, x, cond, ctx = parts
    feats = encode_condition(cond, cw, small_cfg, cam_cfg, ctx)
    skips, _ = encode(x, time_embedding(5, w, small_cfg), _layer_contexts(ctx, small_cfg), w, small_cfg)
    assert len(feats.features) == len(skips) == small_cfg.levels
    for f, s in zip(feats.features, skips):
        assert f.shape[0] == cam_cfg.F_cond and f.shape[1:] == s.shape[1:]


def test_wrong_condition_frame_count(small_cfg, parts):
    _, cw, cam_cfg, x, _, ctx = parts
    with pytest.raises(ShapeError):
        encode_condition(x, cw, small_cfg, cam_cfg, ctx)


def test_trunk_reproduces_unet_encoder_trace(small_cfg, parts):
    w, cw, cam_cfg, _, cond, ctx = parts
    ref, got = [], []
    c2 = replace(small_cfg, F=cam_cfg.F_cond)
    encode(cond, time_embedding(0, w, c2), _layer_contexts(ctx, c2), w, c2, trace=ref)
    encode_condition(cond, cw, small_cfg, cam_cfg, ctx, trace=got)
    assert len(ref) == len(got) > 0
    assert all(np.array_equal(a, b) for a, b in zip(ref, got))


def test_zero_p_out_is_bitwise_transparent():
    rng = np.random.default_rng(1)
    x_sc = rng.normal(size=(4, 2, 2, 4))
    x_cam = rng.normal(size=(3, 2, 2, 4))
    assert np.array_equal(inject_skip(x_sc, x_cam, _proj(4, rng, zero_out=True), 2, 2), x_sc)


def test_hand_attention_single_key():
    # one key: softmax weight 1, so the added term is P_out(P_V x_cam)
    x_sc = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    x_cam = np.array([2.0]).reshape(1, 1, 1, 1)
    proj = {"P_in": np.eye(1), "P_Q": np.eye(1) * 0.7, "P_K": np.eye(1) * 1.3, "P_V": np.eye(1) * 5.0,
            "P_out": np.eye(1) * 0.5}
    out = inject_skip(x_sc, x_cam, proj, 1, 1)
    assert np.allclose(out.ravel(), [1.0 + 0.5 * 5.0 * 2.0, 3.0 + 0.5 * 5.0 * 2.0], atol=1e-15)


def test_hand_attention_two_keys():
    x_sc = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    x_cam = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
    eye = np.eye(1)
    out = inject_skip(x_sc, x_cam, {"P_in": eye, "P_Q": eye, "P_K": eye, "P_V": eye, "P_out": eye}, 1, 1)
    q = group_norm_st(x_sc, 1).ravel()  # [-1, 1] up to eps
    for f in range(2):
        s = q[f] * np.array([1.0, -1.0])
        p = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        assert out.ravel()[f] == pytest.approx(x_sc.ravel()[f] + p @ np.array([1.0, -1.0]), abs=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    _, weights = inject_skip(rng.normal(size=(1, 4, 2, 2, 4)), rng.normal(size=(1, 3, 2, 2, 4)), _proj(4, rng),
                             2, 2, return_weights=True)
    assert np.abs(weights.sum(-1) - 1).max() < 1e-12


def test_output_depends_on_cam_only_through_keys_and_values():
    rng = np.random.default_rng(3)
    x_sc, x_cam = rng.normal(size=(4, 2, 2, 4)), rng.normal(size=(3, 2, 2, 4))
    proj = _proj(4, rng)
    # a rank-deficient K/V pair: any x_cam component in their common null space is invisible
    null = np.array([1.0, -1.0, 0.5, 0.0])
    basis = np.linalg.qr(np.c_[null, rng.normal(size=(4, 3))])[0][:, 1:]
    projector = basis @ basis.T
    proj["P_K"], proj["P_V"] = projector @ proj["P_K"], projector @ proj["P_V"]
    shifted = x_cam + 3.0 * (null / np.linalg.norm(null))
    assert np.allclose(inject_skip(x_sc, x_cam, proj, 2, 2), inject_skip(x_sc, shifted, proj, 2, 2), atol=1e-12)


def test_identical_key_frames_make_order_irrelevant():
    rng = np.random.default_rng(4)
    x_sc = rng.normal(size=(4, 2, 2, 4))
    frame = rng.normal(size=(1, 2, 2, 4))
    proj = _proj(4, rng)
    a = inject_skip(x_sc, np.repeat(frame, 3, 0), proj, 2, 2)
    b = inject_skip(x_sc, frame, proj, 2, 2)
    assert np.allclose(a, b, atol=1e-12)


def test_inject_shape_mismatch():
    with pytest.raises(ShapeError):
        inject_skip(np.zeros((4, 2, 2, 4)), np.zeros((3, 2, 3, 4)), _proj(4, np.random.default_rng(0)), 2, 2)


def test_fresh_cam_leaves_unet_bitwise_unchanged(small_cfg, schedule, parts):
    w, cw, cam_cfg, x, cond, ctx = parts
    feats = encode_condition(cond, cw, small_cfg, cam_cfg, ctx)
    assert np.array_equal(unet_epsilon(x, 400, ctx, w, small_cfg, schedule, cam=feats),
                          unet_epsilon(x, 400, ctx, w, small_cfg, schedule))


def test_trained_cam_changes_output(small_cfg, schedule, parts):
    w, cw, cam_cfg, x, cond, ctx = parts
    cw2 = dict(cw, **{f"inject{l}.P_out": np.full_like(cw[f"inject{l}.P_out"], 0.3) for l in range(2)})
    feats = encode_condition(cond, cw2, small_cfg, cam_cfg, ctx)
    assert not np.allclose(unet_epsilon(x, 400, ctx, w, small_cfg, schedule, cam=feats),
                           unet_epsilon(x, 400, ctx, w, small_cfg, schedule))


def test_inference_mask_zeroes_first_frames():
    M = condition_mask(CamConfig(), (2, 2, 3))
    assert M.shape == (16, 2, 2, 3)
    assert not M[:8].any() and M[8:].all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**63))
def test_training_mask_sum_constraint(F, seed):
    cfg = CamConfig(F=F, F_cond=1 + seed % F)
    M = condition_mask(cfg, (1, 1, 2), "train", RngStream(seed))
    check_mask(M, cfg)
    assert np.all(M.sum(axis=0) == cfg.F - cfg.F_cond)


def test_training_mask_needs_rng_and_mode():
    with pytest.raises(ValueError):
        condition_mask(CamConfig(), (1, 1, 1), "train")
    with pytest.raises(ValueError):
        condition_mask(CamConfig(), (1, 1, 1), "sometimes")


@pytest.mark.parametrize("bad", ["count", "binary", "constant"])
def test_check_mask_rejects(bad):
    cfg = CamConfig()
    M = condition_mask(cfg, (2, 2, 1))
    if bad == "count":
        M[0] = 1.0
    elif bad == "binary":
        M[9] = 0.5
    else:
        M[9, 0, 0, 0] = 0.0
    with pytest.raises(ValueError):
        check_mask(M, cfg)


def test_add_cond_fresh_residuals_are_zero(small_cfg, schedule, parts):
    w, _, _, x, _, ctx = parts
    cfg = CamConfig(F=small_cfg.F, F_cond=2)
    M = condition_mask(cfg, x.shape[1:])
    acw = init_add_cond_weights(w, small_cfg)
    res = add_cond_inject(np.concatenate([x * M, M], -1), x, 300, ctx, acw, small_cfg, cfg)
    assert all(not r.any() for r in res)
    assert np.array_equal(unet_epsilon(x, 300, ctx, w, small_cfg, schedule, skip_residuals=res),
                          unet_epsilon(x, 300, ctx, w, small_cfg, schedule))


def test_add_cond_rejects_bad_mask(small_cfg, parts):
    w, _, _, x, _, ctx = parts
    cfg = CamConfig(F=small_cfg.F, F_cond=2)
    M = np.ones_like(x)
    with pytest.raises(ValueError):
        add_cond_inject(np.concatenate([x, M], -1), x, 300, ctx, init_add_cond_weights(w, small_cfg), small_cfg, cfg)


def test_conc_cond_channels_and_mask_identity():
    rng = np.random.default_rng(5)
    z, v = rng.normal(size=(16, 2, 2, 3)), rng.normal(size=(16, 2, 2, 3))
    M = condition_mask(CamConfig(), (2, 2, 3))
    out = conc_cond_inject(z, v, M)
    assert out.shape[-1] == 9
    assert np.array_equal(out[8:, ..., 3:6], v[8:])
    assert not out[:8, ..., 3:6].any()
    with pytest.raises(ShapeError):
        conc_cond_inject(z, v[:-1], M)


def test_conc_cond_zero_extra_weights_match_base(small_cfg, schedule, parts):
    w, _, _, x, _, ctx = parts
    w2, cfg2 = conc_cond_unet(w, small_cfg)
    M = condition_mask(CamConfig(F=small_cfg.F, F_cond=2), x.shape[1:])
    video = np.random.default_rng(6).normal(size=x.shape)
    assert np.array_equal(unet_epsilon(conc_cond_inject(x, video, M), 300, ctx, w2, cfg2, schedule),
                          unet_epsilon(x, 300, ctx, w, small_cfg, schedule))
