"""Train a toy-width model until it visibly beats the unfiltered input.

Uses a 1/16-width 32x32 network and four fixed synthetic pairs so the run
finishes in about a minute on a laptop CPU. The point is to watch the loop
machinery end to end: loss curve, checkpointing, resuming a checkpoint into
a fresh network, and finally applying it through the tiling layer.
"""

import os

import numpy as np

from microdenoise.data import Fixed, make_pair, pair_rng
from microdenoise.metrics import mse
from microdenoise.network import NetworkConfig, build_network
from microdenoise.tiling import TileConfig, denoise_image
from microdenoise.train import (LossConfig, OptimizerConfig, load_operator,
                                train)

OUT = os.path.join(os.path.dirname(__file__), "out", "train_toy_model")
BATCHES = 400


def blob_micrograph(seed: int, size: int = 32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size))
    for _ in range(3):
        cy, cx = rng.uniform(5, size - 5, 2)
        s = rng.uniform(3, 8)
        img += rng.uniform(0.4, 1.0) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return (img / img.max() * 0.8 + 0.1) * 800.0


def main():
    os.makedirs(OUT, exist_ok=True)
    pairs = [make_pair(blob_micrograph(20 + i), Fixed(80.0), pair_rng(5, i),
                       crop_size=32, downsample=False) for i in range(4)]
    cfg = NetworkConfig(input_size=32, width_multiplier=0.0625,
                        middle_repeats=2)
    net = build_network(cfg, seed=0)
    print(f"network: {net.param_count()} parameters at width 1/16")

    rows, best_val = train(
        net, pairs, pairs[:2],
        LossConfig(l2_rate=0.0),
        OptimizerConfig(kind="adam", beta1=0.5, schedule=((None, 1e-3),)),
        batches=BATCHES, batch_size=4,
        checkpoint_dir=os.path.join(OUT, "checkpoints"),
        checkpoint_interval=100,
        log_path=os.path.join(OUT, "curve.csv"))
    for done, train_loss, val_loss, lr, mode in rows:
        if done % 50 == 0 or done == 1:
            val = "" if val_loss is None else f"  val {val_loss:8.4f}"
            print(f"step {done:4d}  loss {train_loss:8.4f}{val}")
    print(f"best validation loss {best_val:.4f}; curve in {OUT}/curve.csv")

    # resume the final checkpoint as a denoising operator
    ckpt = os.path.join(OUT, "checkpoints", f"ckpt_{BATCHES:08d}.mdtc")
    operator, size = load_operator(ckpt)
    tile_cfg = TileConfig(tile=size, overlap=8, pad=4)
    held_out = make_pair(blob_micrograph(99, size=64), Fixed(80.0),
                         pair_rng(5, 99), crop_size=64, downsample=False)
    restored = denoise_image(operator, held_out.noisy, tile_cfg)
    print(f"held-out 64x64 image, tiled through the {size}x{size} model:")
    print(f"  unfiltered mse {mse(held_out.noisy, held_out.ground_truth):.2e}")
    print(f"  denoised   mse {mse(restored, held_out.ground_truth):.2e}")


if __name__ == "__main__":
    main()
