"""Denoising images of arbitrary size by reflection-padded, overlapping
tiling with blended recomposition.

Tile weights follow a raised ramp per axis: integer weight min(i+1, T-i,
overlap+1) at offset i, so the profile climbs linearly from the tile edge,
saturates ``overlap`` pixels inward, and never reaches zero. Integer weights
keep the weighted sums exact in float64, which makes the identity operator
round-trip bit-exact; the per-pixel weight total renormalizes everything
else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InternalError, ShapeMismatchError


@dataclass(frozen=True)
class TileConfig:
    tile: int = 512
    overlap: int = 32
    pad: int = 16
    clip_output: bool = True

    def __post_init__(self):
        if self.tile < 1:
            raise ConfigError(f"tile must be positive, got {self.tile}")
        if not 0 <= self.overlap < self.tile:
            raise ConfigError(
                f"overlap must satisfy 0 <= overlap < tile, got {self.overlap}")
        if self.pad < 0:
            raise ConfigError(f"pad must be non-negative, got {self.pad}")


def pad_reflect(img: np.ndarray, pad: int) -> np.ndarray:
    """Mirror-pad without repeating the edge pixel: [1,2,3] pad 1 -> [2,1,2,3,2].

    Accepts a row or a 2-D image; every axis is padded by ``pad``.
    """
    img = np.asarray(img)
    if img.ndim not in (1, 2):
        raise ShapeMismatchError(f"expected a row or 2-D image, got shape {img.shape}")
    if pad < 0:
        raise ConfigError(f"pad must be non-negative, got {pad}")
    if pad == 0:
        return img.copy()
    if pad >= min(img.shape):
        raise ConfigError(
            f"pad {pad} too large for image {img.shape}; needs pad < every dim")
    return np.pad(img, pad, mode="reflect")


def _axis_origins(length: int, tile: int, stride: int) -> list:
    xs = list(range(0, length - tile + 1, stride))
    if xs[-1] != length - tile:
        xs.append(length - tile)
    return xs


def tile_plan(h: int, w: int, cfg: TileConfig = TileConfig()) -> list:
    """Origins (row, col) of overlapping cfg.tile squares covering h x w,
    stride tile - overlap, the last tile per axis snapped flush to the edge."""
    if h < cfg.tile or w < cfg.tile:
        raise ShapeMismatchError(
            f"{h}x{w} is smaller than the {cfg.tile} tile; pad up before planning")
    stride = cfg.tile - cfg.overlap
    return [(r, c) for r in _axis_origins(h, cfg.tile, stride)
            for c in _axis_origins(w, cfg.tile, stride)]


def _ramp(tile: int, overlap: int) -> np.ndarray:
    i = np.arange(tile)
    return np.minimum(np.minimum(i + 1, tile - i), overlap + 1).astype(np.float64)


def blend_weight(cfg: TileConfig = TileConfig()) -> np.ndarray:
    """Unnormalized per-tile weight surface (outer product of axis ramps)."""
    ramp = _ramp(cfg.tile, cfg.overlap)
    return np.outer(ramp, ramp)


def blend(tiles, plan, out_shape, cfg: TileConfig = TileConfig()) -> np.ndarray:
    """Recompose processed tiles into an out_shape image by per-pixel
    weighted averaging."""
    if len(tiles) != len(plan):
        raise ShapeMismatchError(f"{len(tiles)} tiles for {len(plan)} origins")
    weight = blend_weight(cfg)
    acc = np.zeros(out_shape, dtype=np.float64)
    total = np.zeros(out_shape, dtype=np.float64)
    for tile, (r, c) in zip(tiles, plan):
        tile = np.asarray(tile, dtype=np.float64)
        if tile.shape != (cfg.tile, cfg.tile):
            raise ShapeMismatchError(
                f"tile at ({r}, {c}) has shape {tile.shape}, expected "
                f"({cfg.tile}, {cfg.tile})")
        acc[r:r + cfg.tile, c:c + cfg.tile] += weight * tile
        total[r:r + cfg.tile, c:c + cfg.tile] += weight
    if not total.all():
        raise InternalError("uncovered pixels in tile plan")
    return acc / total


def _as_operator(net):
    if callable(net) and not hasattr(net, "forward"):
        return net, None
    size = net.cfg.input_size

    def operator(batch):
        return net.forward(batch, mode="inference").data

    return operator, size


def denoise_image(net, img: np.ndarray, cfg: TileConfig = TileConfig()) -> np.ndarray:
    """Denoise a 2-D image of any size: reflect-pad, tile, per-tile forward
    in inference mode, blended recomposition, crop, optional clip.

    ``net`` is either the network or any callable mapping a float32 batch
    N x 1 x T x T to the processed batch.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ShapeMismatchError(f"expected a non-empty 2-D image, got {img.shape}")
    if not np.isfinite(img).all():
        raise ShapeMismatchError("image contains non-finite values")
    operator, net_size = _as_operator(net)
    if net_size is not None and net_size != cfg.tile:
        raise ConfigError(
            f"network takes {net_size}x{net_size} tiles but cfg.tile={cfg.tile}")

    h, w = img.shape
    padded = pad_reflect(img, cfg.pad) if cfg.pad else img
    # images narrower than one tile grow by extra reflection on the far edges
    grow_r = max(cfg.tile - padded.shape[0], 0)
    grow_c = max(cfg.tile - padded.shape[1], 0)
    if grow_r or grow_c:
        padded = np.pad(padded, ((0, grow_r), (0, grow_c)), mode="reflect")

    plan = tile_plan(padded.shape[0], padded.shape[1], cfg)
    tiles = []
    for r, c in plan:
        patch = padded[r:r + cfg.tile, c:c + cfg.tile].astype(np.float32)
        out = operator(patch[None, None, :, :])
        out = np.asarray(out)
        if out.shape != (1, 1, cfg.tile, cfg.tile):
            raise ShapeMismatchError(
                f"operator returned shape {out.shape} for one {cfg.tile} tile")
        tiles.append(out[0, 0])
    merged = blend(tiles, plan, padded.shape, cfg)
    result = merged[cfg.pad:cfg.pad + h, cfg.pad:cfg.pad + w]
    if cfg.clip_output:
        result = np.clip(result, 0.0, 1.0)
    return result
