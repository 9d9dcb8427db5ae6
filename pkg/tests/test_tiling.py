"""Tiled inference: padding, planning, blending, full round trips."""

import numpy as np
import pytest

from microdenoise.errors import ConfigError, InternalError, ShapeMismatchError
from microdenoise.tiling import (
    TileConfig,
    blend,
    blend_weight,
    denoise_image,
    pad_reflect,
    tile_plan,
)


def identity_op(batch):
    return np.asarray(batch, dtype=np.float32)


def test_tile_config_validation():
    with pytest.raises(ConfigError):
        TileConfig(tile=0)
    with pytest.raises(ConfigError):
        TileConfig(tile=64, overlap=64)
    with pytest.raises(ConfigError):
        TileConfig(pad=-1)


def test_pad_reflect_examples():
    assert np.array_equal(pad_reflect(np.array([1.0, 2.0, 3.0]), 1),
                          [2.0, 1.0, 2.0, 3.0, 2.0])
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = pad_reflect(img, 1)
    assert np.array_equal(out, [[4.0, 3.0, 4.0, 3.0],
                                [2.0, 1.0, 2.0, 1.0],
                                [4.0, 3.0, 4.0, 3.0],
                                [2.0, 1.0, 2.0, 1.0]])
    assert np.array_equal(pad_reflect(img, 0), img)
    with pytest.raises(ConfigError):
        pad_reflect(img, 2)  # mirror without edge repeat needs pad < dims
    with pytest.raises(ShapeMismatchError):
        pad_reflect(np.zeros((2, 2, 2)), 1)


def test_tile_plan_spec_example():
    cfg = TileConfig(tile=512, overlap=64)
    plan = tile_plan(1024, 1024, cfg)
    origins = sorted({r for r, _ in plan})
    assert origins == [0, 448, 512]  # stride 448, last snapped flush
    assert len(plan) == 9


def test_tile_plan_covers_every_pixel():
    cfg = TileConfig(tile=96, overlap=16)
    for h, w in ((96, 96), (100, 333), (500, 97)):
        plan = tile_plan(h, w, cfg)
        covered = np.zeros((h, w), dtype=bool)
        for r, c in plan:
            assert 0 <= r <= h - 96 and 0 <= c <= w - 96
            covered[r:r + 96, c:c + 96] = True
        assert covered.all(), (h, w)
    with pytest.raises(ShapeMismatchError):
        tile_plan(95, 200, cfg)


def test_blend_weight_shape_and_profile():
    cfg = TileConfig(tile=8, overlap=3)
    w = blend_weight(cfg)
    ramp = [1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]  # saturates at overlap+1
    assert np.array_equal(w[0], ramp)
    assert np.array_equal(w, np.outer(ramp, ramp))
    assert w.min() >= 1.0  # never zero, so every covered pixel has weight


def test_blend_normalized_weights_sum_to_one():
    cfg = TileConfig(tile=96, overlap=16)
    h, w = 200, 150
    plan = tile_plan(h, w, cfg)
    ones = [np.ones((96, 96)) for _ in plan]
    out = blend(ones, plan, (h, w), cfg)
    # blending all-ones tiles returns exactly one everywhere iff the
    # per-pixel normalized weights sum to 1
    assert np.abs(out - 1.0).max() < 3e-16


def test_blend_rejects_inconsistencies():
    cfg = TileConfig(tile=8, overlap=2)
    plan = tile_plan(16, 16, cfg)
    tiles = [np.zeros((8, 8))] * len(plan)
    with pytest.raises(ShapeMismatchError):
        blend(tiles[:-1], plan, (16, 16), cfg)
    with pytest.raises(ShapeMismatchError):
        blend([np.zeros((4, 4))] * len(plan), plan, (16, 16), cfg)
    # a plan that misses pixels is a bug, not bad input
    with pytest.raises(InternalError):
        blend([np.zeros((8, 8))], [(0, 0)], (16, 16), cfg)


def test_identity_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    cfg = TileConfig(tile=64, overlap=8, pad=4, clip_output=False)
    for shape in ((300, 700), (64, 64), (512, 512), (40, 70)):
        img = rng.random(shape)
        out = denoise_image(identity_op, img, cfg)
        assert out.shape == shape
        # f32 tile quantization is the only loss; integer ramp weights make
        # the blend itself exact
        assert np.array_equal(out, img.astype(np.float32).astype(np.float64)), shape


def test_equivariant_operator_commutes_with_tiling():
    # an affine pixelwise map commutes with cutting and blending, so the
    # tiled result must equal the global result wherever padding is absent
    def affine_op(batch):
        return (np.asarray(batch, dtype=np.float32) * 0.5 + 0.1).astype(np.float32)

    rng = np.random.default_rng(1)
    img = rng.random((150, 130))
    cfg = TileConfig(tile=64, overlap=8, pad=0, clip_output=False)
    out = denoise_image(affine_op, img, cfg)
    want = img.astype(np.float32) * np.float32(0.5) + np.float32(0.1)
    assert np.allclose(out, want.astype(np.float64), atol=1e-7)


def test_operator_called_once_per_planned_tile():
    calls = []

    def counting_op(batch):
        calls.append(batch.shape)
        return batch

    cfg = TileConfig(tile=64, overlap=8, pad=4)
    img = np.random.default_rng(2).random((100, 200))
    denoise_image(counting_op, img, cfg)
    planned = tile_plan(108, 208, cfg)  # padded size
    assert len(calls) == len(planned)
    assert all(s == (1, 1, 64, 64) for s in calls)


def test_small_images_grow_to_one_tile():
    cfg = TileConfig(tile=64, overlap=8, pad=4)
    img = np.random.default_rng(3).random((20, 30))
    out = denoise_image(identity_op, img, cfg)
    assert out.shape == (20, 30)
    assert np.array_equal(out, img.astype(np.float32).astype(np.float64))


def test_clip_output():
    def amplifier(batch):
        return np.asarray(batch, dtype=np.float32) * np.float32(3.0)

    img = np.full((70, 70), 0.5)
    cfg = TileConfig(tile=64, overlap=8, pad=4, clip_output=True)
    out = denoise_image(amplifier, img, cfg)
    assert out.max() == 1.0
    unclipped = denoise_image(
        amplifier, img, TileConfig(tile=64, overlap=8, pad=4, clip_output=False))
    assert unclipped.max() > 1.0


def test_denoise_image_validation():
    cfg = TileConfig(tile=32, overlap=4, pad=2)
    with pytest.raises(ShapeMismatchError):
        denoise_image(identity_op, np.zeros(16), cfg)
    with pytest.raises(ShapeMismatchError):
        bad = np.full((40, 40), np.nan)
        denoise_image(identity_op, bad, cfg)

    def wrong_shape_op(batch):
        return batch[:, :, :16, :16]

    with pytest.raises(ShapeMismatchError, match="operator returned"):
        denoise_image(wrong_shape_op, np.zeros((40, 40)), cfg)


def test_network_tile_size_must_match():
    from microdenoise.network import NetworkConfig, build_network
    net = build_network(NetworkConfig(input_size=16, width_multiplier=0.0625,
                                      middle_repeats=1), seed=0)
    with pytest.raises(ConfigError, match="cfg.tile"):
        denoise_image(net, np.zeros((64, 64)),
                      TileConfig(tile=32, overlap=4, pad=2))
    # matching tile size runs the network per tile
    out = denoise_image(net, np.random.default_rng(4).random((24, 24)),
                        TileConfig(tile=16, overlap=2, pad=2))
    assert out.shape == (24, 24)
    assert np.isfinite(out).all()
