"""Walk through the dose models and the Poisson corruption they drive.

Prints sampled-dose statistics for the low-dose and ordinary regimes, then
verifies the two first moments of the shot-noise stage: the noisy image is
unbiased, with per-pixel variance value/dose.
"""

import numpy as np

from microdenoise.data import (Fixed, LowDoseExponential, OrdinaryUniform,
                               apply_poisson, sample_dose)


def main():
    rng = np.random.default_rng(7)
    n = 20_000
    for label, model in (("low-dose", LowDoseExponential()),
                         ("ordinary", OrdinaryUniform())):
        doses = np.array([sample_dose(model, rng) for _ in range(n)])
        print(f"{label}: mean {doses.mean():7.1f}  min {doses.min():7.1f}  "
              f"max {doses.max():7.1f}  (counts per pixel, {n} draws)")

    # shot noise on a mid-gray image: mean preserved, variance ~ value/dose
    flat = np.full((200, 200), 0.5)
    print(f"\n{'dose':>6} {'mean':>8} {'variance':>10} {'value/dose':>11}")
    for dose in (10.0, 50.0, 300.0):
        noisy = apply_poisson(flat, dose, rng)
        print(f"{dose:>6.0f} {noisy.mean():>8.4f} {noisy.var():>10.6f} "
              f"{0.5 / dose:>11.6f}")

    # a Fixed model always returns its dose; handy for reproducible benchmarks
    fixed = Fixed(75.0)
    assert sample_dose(fixed, rng) == 75.0
    print("\nFixed(75) draws 75.0 every time, as benchmarks expect")


if __name__ == "__main__":
    main()
