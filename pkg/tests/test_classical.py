"""The nine baseline denoisers against closed forms and reference libraries."""

import numpy as np
import pytest
from scipy import ndimage
from scipy.signal import wiener as scipy_wiener
from skimage.restoration import denoise_tv_chambolle

from microdenoise.classical import (
    METHODS,
    _gaussian3_kernel,
    bilateral,
    bregman_tv,
    chambolle_tv,
    denoise,
    estimate_noise_sigma,
    gaussian3,
    haar_dwt2,
    haar_idwt2,
    median3,
    nl_means,
    tv_anisotropic,
    tv_isotropic,
    unfiltered,
    wavelet_bayes_shrink,
    wiener,
)
from microdenoise.errors import ConfigError, ShapeMismatchError


def blob_image(seed=42, size=40, noise=0.08):
    """A smooth multi-blob field plus Gaussian noise; returns (truth, noisy)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    truth = np.zeros((size, size))
    for cy, cx, r in ((10, 12, 6), (28, 30, 8), (20, 8, 4)):
        truth += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    truth = truth / truth.max() * 0.8 + 0.1
    noisy = np.clip(truth + rng.normal(0, noise, truth.shape), 0, 1)
    return truth, noisy


def test_method_registry_is_the_published_nine():
    assert set(METHODS) == {"unfiltered", "gaussian", "bilateral", "median",
                            "wiener", "wavelet", "chambolle_tv", "bregman_tv",
                            "nl_means"}
    _, noisy = blob_image()
    assert np.array_equal(denoise(noisy, "median"), median3(noisy))
    with pytest.raises(ConfigError, match="unknown method"):
        denoise(noisy, "fourier")


def test_every_method_preserves_constants():
    for value in (0.4375, 0.3):
        img = np.full((16, 16), value)
        for name, fn in METHODS.items():
            out = fn(img)
            assert np.abs(out - img).max() < 1e-6, name


def test_methods_reject_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        unfiltered(np.zeros(5))
    with pytest.raises(ShapeMismatchError):
        median3(np.zeros((0, 3)))
    with pytest.raises(ConfigError):
        bilateral(np.zeros((8, 8)), d=4)
    with pytest.raises(ConfigError):
        wiener(np.zeros((8, 8)), window=2)
    with pytest.raises(ConfigError):
        nl_means(np.zeros((8, 8)), patch=6)
    with pytest.raises(ShapeMismatchError):
        wavelet_bayes_shrink(np.zeros((4, 4)))


def test_unfiltered_copies():
    _, noisy = blob_image()
    out = unfiltered(noisy)
    assert np.array_equal(out, noisy) and out is not noisy


def test_gaussian_matches_scipy_mirror_convolution():
    _, noisy = blob_image()
    ref = ndimage.correlate(noisy, _gaussian3_kernel(), mode="mirror")
    assert np.array_equal(gaussian3(noisy), ref)
    assert abs(_gaussian3_kernel().sum() - 1.0) < 1e-15


def test_median_matches_scipy_mirror():
    _, noisy = blob_image()
    ref = ndimage.median_filter(noisy, size=3, mode="mirror")
    assert np.array_equal(median3(noisy), ref)


def test_bilateral_matches_per_pixel_definition():
    _, noisy = blob_image()

    def at(img, i, j, d=9, sc=75.0 / 255.0, ss=75.0):
        r = d // 2
        xp = np.pad(img, r, mode="reflect")
        num = den = 0.0
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                v = xp[r + i + di, r + j + dj]
                w = (np.exp(-(di * di + dj * dj) / (2 * ss * ss))
                     * np.exp(-(v - img[i, j]) ** 2 / (2 * sc * sc)))
                num += w * v
                den += w
        return num / den

    out = bilateral(noisy)
    for i, j in ((17, 23), (0, 5), (39, 39)):
        assert out[i, j] == at(noisy, i, j)


def test_wiener_interior_matches_scipy_given_noise_power():
    _, noisy = blob_image()
    nu = 0.003
    mine = wiener(noisy, window=3, noise_power=nu)
    theirs = scipy_wiener(noisy, mysize=3, noise=nu)
    # scipy zero-pads its borders; interiors share the formula
    assert np.abs(mine[1:-1, 1:-1] - theirs[1:-1, 1:-1]).max() < 1e-10


def test_wiener_gain_limits():
    _, noisy = blob_image()
    # infinite noise estimate collapses to the local mean
    flat = wiener(noisy, noise_power=1e12)
    from microdenoise.classical import _box_mean
    assert np.allclose(flat, _box_mean(noisy, 3), atol=1e-10)
    # zero noise estimate passes the image through
    assert np.allclose(wiener(noisy, noise_power=0.0), noisy, atol=1e-12)


def test_haar_round_trip_and_energy():
    rng = np.random.default_rng(1)
    for shape in ((8, 10), (9, 13), (16, 16), (7, 7)):
        x = rng.standard_normal(shape)
        a, det = haar_dwt2(x, 2)
        assert np.abs(haar_idwt2(a, det) - x).max() < 1e-12
    x = rng.standard_normal((16, 16))
    a, det = haar_dwt2(x, 3)
    e = (a ** 2).sum() + sum((d[b] ** 2).sum()
                             for d in det for b in ("lh", "hl", "hh"))
    # orthonormal transform conserves energy (even dims: no replication)
    assert abs(e - (x ** 2).sum()) < 1e-10 * (x ** 2).sum()


def test_haar_constant_has_zero_details():
    a, det = haar_dwt2(np.full((8, 8), 0.25), 2)
    for d in det:
        for b in ("lh", "hl", "hh"):
            assert np.array_equal(d[b], np.zeros_like(d[b]))
    assert np.allclose(a, 0.25 * 4)  # each level scales lo by sqrt(2)^2


def test_noise_sigma_estimate_tracks_truth():
    rng = np.random.default_rng(3)
    for sigma in (0.02, 0.07):
        n = rng.normal(0, sigma, (256, 256))
        assert abs(estimate_noise_sigma(n) - sigma) < 0.05 * sigma


def test_wavelet_soft_threshold_semantics():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((16, 16))
    # a huge override zeroes every detail: result is the blockwise-mean image
    out = wavelet_bayes_shrink(x, threshold_override=1e9)
    a, det = haar_dwt2(x, 2)
    for d in det:
        for b in ("lh", "hl", "hh"):
            d[b] = np.zeros_like(d[b])
    assert np.allclose(out, haar_idwt2(a, det), atol=1e-12)
    # a zero override reconstructs the input unharmed
    assert np.allclose(wavelet_bayes_shrink(x, threshold_override=0.0), x,
                       atol=1e-12)


def test_wavelet_denoises_smooth_signal():
    truth, noisy = blob_image()
    out = wavelet_bayes_shrink(noisy)
    assert ((out - truth) ** 2).mean() < ((noisy - truth) ** 2).mean()


def test_tv_functionals():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert tv_anisotropic(img) == 2.0       # two horizontal unit jumps
    assert tv_isotropic(img) == 2.0         # vertical diffs are zero
    assert tv_isotropic(np.full((5, 5), 0.3)) == 0.0
    ramp = np.tile(np.arange(4.0), (4, 1))
    assert tv_anisotropic(ramp) == 12.0     # 3 jumps of 1 in each of 4 rows


def test_chambolle_matches_skimage_iteration_for_iteration():
    _, noisy = blob_image()
    # our loop counts accepted updates; the reference counts loop entries,
    # placing its K-th iterate at our K-1
    for k in (5, 20, 60):
        mine = chambolle_tv(noisy, weight=0.1, tol=0.0, max_iter=k - 1)
        theirs = denoise_tv_chambolle(noisy, weight=0.1, eps=0.0,
                                      max_num_iter=k)
        assert np.array_equal(mine, theirs), k


def test_chambolle_cost_trace_is_non_increasing():
    _, noisy = blob_image()
    _, costs = chambolle_tv(noisy, weight=0.1, tol=2e-4, max_iter=200,
                            return_costs=True)
    assert len(costs) >= 2
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_tv_solvers_reduce_cost_and_error():
    truth, noisy = blob_image()
    u, costs = bregman_tv(noisy, weight=0.1, tol=2e-4, max_iter=200,
                          return_costs=True)
    assert costs[-1] < costs[0]
    mse = lambda a: ((a - truth) ** 2).mean()
    assert mse(u) < mse(noisy)
    assert mse(chambolle_tv(noisy)) < mse(noisy)
    with pytest.raises(ConfigError):
        chambolle_tv(noisy, weight=0.0)
    with pytest.raises(ConfigError):
        bregman_tv(noisy, weight=-1.0)


def test_nl_means_matches_per_pixel_definition():
    rng = np.random.default_rng(42)
    noisy = rng.random((24, 26))

    def at(img, i, j, patch=7, search=11, h=0.1, sigma=0.05):
        pr, sr = patch // 2, search // 2
        xp = np.pad(img, sr + pr, mode="reflect")
        ci, cj = i + sr + pr, j + sr + pr
        ref = xp[ci - pr:ci + pr + 1, cj - pr:cj + pr + 1]
        num = den = 0.0
        for di in range(-sr, sr + 1):
            for dj in range(-sr, sr + 1):
                cand = xp[ci + di - pr:ci + di + pr + 1,
                          cj + dj - pr:cj + dj + pr + 1]
                d2 = float(((ref - cand) ** 2).mean())
                w = np.exp(-max(d2 - 2 * sigma * sigma, 0.0) / (h * h))
                num += w * xp[ci + di, cj + dj]
                den += w
        return num / den

    out = nl_means(noisy, patch=7, search=11, h=0.1, sigma=0.05)
    for i, j in ((12, 13), (0, 0), (23, 25), (3, 20)):
        assert out[i, j] == at(noisy, i, j)


def test_nl_means_denoises_smooth_signal():
    truth, noisy = blob_image()
    out = nl_means(noisy, sigma=0.05)
    assert ((out - truth) ** 2).mean() < ((noisy - truth) ** 2).mean()


def test_smoothers_beat_unfiltered_on_smooth_corpus():
    truth, noisy = blob_image(seed=7, size=48)
    mse = lambda a: ((a - truth) ** 2).mean()
    base = mse(noisy)
    for name in ("gaussian", "median", "wavelet", "bilateral"):
        assert mse(METHODS[name](noisy)) < base, name
