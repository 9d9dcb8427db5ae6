"""What blended tiling guarantees, and what it deliberately does not.

Any image is denoised by cutting overlapping tiles from a reflect-padded
copy, pushing each tile through the operator, and recomposing with ramped
weights. Two properties fall out, and this script measures both:

* Pixelwise operators survive the round trip exactly. The blend weights are
  integers and every pixel's weights cancel, so the identity operator
  returns the input bit for bit (after the documented float32 cast).

* Neighborhood operators see mirrored context at tile edges instead of the
  true pixels across the seam. Those edge rings are still blended in (the
  ramp never reaches zero), but at weight 1 against up to overlap+1, so the
  seam error of a radius-r filter shrinks by about (overlap+1)x and is
  confined to the seam grid lines. Image borders stay exact whenever
  pad >= r, because the crop discards the only ring that lacked real
  context there.

Run:  python3 demos/tiled_inference.py
"""

import numpy as np

from microdenoise.classical import gaussian3
from microdenoise.tiling import TileConfig, denoise_image, tile_plan


def smooth_field(h, w, seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(h // 10, w // 10))
    img = np.kron(base, np.ones((10, 10)))
    img = gaussian3(gaussian3(img))
    return (img - img.min()) / (img.max() - img.min())


def batch_gaussian(batch):
    out = np.stack([gaussian3(t[0].astype(np.float64)) for t in batch])
    return out[:, None, :, :].astype(np.float32)


def seam_mask(h, w, cfg):
    """True on every image pixel that is the outermost row or column of
    some planned tile (the only pixels a radius-1 filter can contaminate)."""
    plan = tile_plan(h + 2 * cfg.pad, w + 2 * cfg.pad, cfg)
    mask = np.zeros((h, w), dtype=bool)
    for r, c in plan:
        for rr in (r - cfg.pad, r - cfg.pad + cfg.tile - 1):
            if 0 <= rr < h:
                mask[rr, :] = True
        for cc in (c - cfg.pad, c - cfg.pad + cfg.tile - 1):
            if 0 <= cc < w:
                mask[:, cc] = True
    return mask


def main():
    img = smooth_field(300, 420, seed=3)

    # pixelwise operator: exact recomposition, awkward size on purpose
    cfg = TileConfig(tile=128, overlap=32, pad=8, clip_output=False)
    identity = denoise_image(lambda batch: batch, img, cfg)
    exact = np.array_equal(identity, img.astype(np.float32).astype(np.float64))
    print(f"identity round trip bit-exact: {exact}")
    assert exact

    # neighborhood operator: compare against filtering the whole image at once
    direct = np.clip(gaussian3(img.astype(np.float32).astype(np.float64)), 0, 1)
    print("\ngaussian3 through tiles vs direct filter (tile=128, pad=8):")
    print("  overlap   max seam error   suppression   off-seam error")
    base_err = None
    for overlap in (0, 8, 32):
        cfg = TileConfig(tile=128, overlap=overlap, pad=8)
        tiled = denoise_image(batch_gaussian, img, cfg)
        diff = np.abs(tiled - direct)
        mask = seam_mask(*img.shape, cfg)
        on_seam = diff[mask].max()
        off_seam = diff[~mask].max()
        if base_err is None:
            base_err = on_seam
        print(f"  {overlap:7d}   {on_seam:14.3e}   {base_err / on_seam:10.1f}x"
              f"   {off_seam:.3e}")
        assert off_seam < 1e-6, "contamination escaped the seam lines"

    print("\nEdge rings carry mirrored context, so seams differ from the")
    print("direct filter; the ramp buys a factor of about overlap+1, and")
    print("everything off the seam grid matches to float32 precision.")


if __name__ == "__main__":
    main()
