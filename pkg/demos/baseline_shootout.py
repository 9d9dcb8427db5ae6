"""Score all nine classical baselines on a synthetic corpus.

Builds 12 smooth specimen images, corrupts them at a fixed 50 counts/pixel,
and lets run_benchmark do the bookkeeping: every method sees the identical
noisy realization within a trial. Writes records.csv / summary.csv plus a
kernel-density CSV of the MSE distribution per method, the same artifacts
the `microdenoise benchmark` verb produces.
"""

import os

import numpy as np

from microdenoise.classical import METHODS
from microdenoise.data import Fixed, Micrograph, PairSynthesizer
from microdenoise.metrics import (kde_pdf, run_benchmark, write_kde_csv,
                                  write_records_csv, write_summary_csv)

OUT = os.path.join(os.path.dirname(__file__), "out", "baseline_shootout")
TRIALS = 24


def blob_micrograph(seed: int, size: int = 96) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size))
    for _ in range(5):
        cy, cx = rng.uniform(10, size - 10, 2)
        s = rng.uniform(5, 16)
        img += rng.uniform(0.3, 1.0) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return (img / img.max() * 0.8 + 0.1) * 1000.0


def main():
    os.makedirs(OUT, exist_ok=True)
    images = [Micrograph(blob_micrograph(300 + i), source=f"blob{i}")
              for i in range(12)]
    synth = PairSynthesizer(images, Fixed(50.0), seed=1, crop_size=96,
                            downsample=False)
    methods = list(METHODS)
    records, summary = run_benchmark(synth, methods, TRIALS, threads=1)

    print(f"{TRIALS} trials at Fixed(50), {len(images)} source images")
    print(f"{'method':<14} {'mse mean':>10} {'mse std':>10} {'ssim mean':>10}")
    for row in sorted(summary, key=lambda s: s.mse_mean):
        print(f"{row.method:<14} {row.mse_mean:>10.2e} {row.mse_std:>10.2e} "
              f"{row.ssim_mean:>10.4f}")

    write_records_csv(os.path.join(OUT, "records.csv"), records)
    write_summary_csv(os.path.join(OUT, "summary.csv"), summary)
    for method in methods:
        values = [r.mse for r in records if r.method == method]
        grid, density, normalized = kde_pdf(values, metric="mse")
        write_kde_csv(os.path.join(OUT, f"kde_mse_{method}.csv"),
                      grid, density, normalized)
    print(f"CSV artifacts written to {OUT}")


if __name__ == "__main__":
    main()
