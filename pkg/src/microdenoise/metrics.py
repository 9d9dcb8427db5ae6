"""Evaluation machinery: MSE, SSIM, KDE distributions, error maps, CLAHE,
and the multi-method benchmark driver.

SSIM uses the canonical 11x11 Gaussian window (sigma 1.5, K1 0.01,
K2 0.03, unit dynamic range) and averages the local map over the interior
only, five pixels in from each border, where the window never touches
padding; the reported value is therefore independent of border handling.
``tensor_ssim`` computes the identical quantity through the autodiff tape
(interior selection done with a constant mask) so it can serve as a loss
term.

The KDE follows a two-stage procedure: values are histogrammed into
equispaced bins, then a Gaussian kernel with Scott's-rule bandwidth
(sigma_hat * n^(-1/5), from the raw values) is summed over the bin
centers. Values falling outside the grid contribute no density.

Benchmark trials are pure functions of (synthesizer, trial index), so a
thread pool reproduces the single-threaded records exactly; summaries use
streaming Welford accumulators with sample (n-1) standard deviations.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .classical import METHODS, denoise
from .errors import ConfigError, DegenerateInputError, ShapeMismatchError
from .layers import depthwise_conv2d

_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5
_K1, _K2 = 0.01, 0.03


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


def _ssim_window() -> np.ndarray:
    d = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    g = np.exp(-(d * d) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return g


def _gauss_filter(x: np.ndarray) -> np.ndarray:
    g = _ssim_window()
    r = _SSIM_RADIUS
    xp = np.pad(x, ((r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(x)
    for i in range(2 * r + 1):
        out += g[i] * xp[i:i + x.shape[0], :]
    xp = np.pad(out, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(x)
    for i in range(2 * r + 1):
        out += g[i] * xp[:, i:i + x.shape[1]]
    return out


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local structural similarity over the border-independent interior."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeMismatchError(f"ssim expects 2-D images, got shape {a.shape}")
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    ua, ub = _gauss_filter(a), _gauss_filter(b)
    va = _gauss_filter(a * a) - ua * ua
    vb = _gauss_filter(b * b) - ub * ub
    cab = _gauss_filter(a * b) - ua * ub
    s = ((2 * ua * ub + c1) * (2 * cab + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2))
    r = _SSIM_RADIUS
    interior = s[r:-r, r:-r] if min(a.shape) > 2 * r else s
    return float(interior.mean())


def tensor_ssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """SSIM through the tape; numerically matches :func:`ssim` because the
    interior pixels of a zero-padded window equal the unpadded ones."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    n, c, h, w = a.data.shape
    g = _ssim_window()
    win = Tensor(np.broadcast_to(np.outer(g, g), (c, 11, 11)).astype(np.float32))
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2

    def f(t):
        return depthwise_conv2d(t, win)

    ua, ub = f(a), f(b)
    va = f(a * a) - ua * ua
    vb = f(b * b) - ub * ub
    cab = f(a * b) - ua * ub
    s = ((ua * ub * 2.0 + c1) * (cab * 2.0 + c2)) / (
        (ua * ua + ub * ub + c1) * (va + vb + c2))
    r = _SSIM_RADIUS
    mask = np.zeros((n, c, h, w), dtype=np.float32)
    if min(h, w) > 2 * r:
        mask[:, :, r:h - r, r:w - r] = 1.0
    else:
        mask[:] = 1.0
    return (s * Tensor(mask)).sum() / float(mask.sum())


@dataclass(frozen=True)
class KdeConfig:
    bins: int = 200
    mse_range: tuple = (0.0, 1.2e-3)
    ssim_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError(f"need at least 2 bins, got {self.bins}")
        for lo, hi in (self.mse_range, self.ssim_range):
            if not lo < hi:
                raise ConfigError(f"degenerate range ({lo}, {hi})")


def kde_pdf(values, cfg: KdeConfig = KdeConfig(), metric: str = "mse"):
    """Binned Gaussian KDE; returns (grid, density, max-normalized density)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise DegenerateInputError("kde needs at least 2 values")
    if metric == "mse":
        lo, hi = cfg.mse_range
    elif metric == "ssim":
        lo, hi = cfg.ssim_range
    else:
        raise ConfigError(f"metric must be mse or ssim, got {metric!r}")
    counts, edges = np.histogram(values, bins=cfg.bins, range=(lo, hi))
    grid = 0.5 * (edges[:-1] + edges[1:])
    n = values.size
    sigma = float(values.std())
    if sigma == 0.0:
        # all values identical: the density is the bare histogram spike
        density = counts / (n * (edges[1] - edges[0]))
    else:
        h = sigma * n ** (-0.2)
        z = (grid[:, None] - grid[None, :]) / h
        kernel = np.exp(-0.5 * z * z) / (h * math.sqrt(2.0 * math.pi))
        density = kernel @ counts / n
    peak = density.max()
    normalized = density / peak if peak > 0 else density.copy()
    return grid, density, normalized


def mae_map(error_images):
    """Pixelwise mean over |denoised - truth| images; returns (map, scalar)."""
    stack = [np.asarray(e, dtype=np.float64) for e in error_images]
    if not stack:
        raise DegenerateInputError("mae_map needs at least one image")
    shape = stack[0].shape
    for e in stack:
        if e.shape != shape:
            raise ShapeMismatchError(f"shape mismatch {e.shape} vs {shape}")
    mean_map = np.mean(stack, axis=0)
    return mean_map, float(mean_map.mean())


def clahe(img, tiles: int = 8, clip: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is quantized to 256 levels over [0,1] and split into a
    tiles x tiles grid; each tile's clipped histogram (excess mass spread
    evenly) yields a CDF mapping, and pixels blend the four nearest tile
    mappings bilinearly. Visualization aid only.
    """
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    t = min(tiles, h, w)  # degenerate small images get fewer tiles
    q = np.minimum((img * 256).astype(np.int64), 255)
    row_edges = np.linspace(0, h, t + 1).astype(np.int64)
    col_edges = np.linspace(0, w, t + 1).astype(np.int64)
    maps = np.zeros((t, t, 256))
    for i in range(t):
        for j in range(t):
            tile = q[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            npix = tile.size
            limit = clip * npix / 256.0
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / 256.0
            maps[i, j] = np.cumsum(hist) / npix

    def blend_coords(edges, coords, count):
        centers = 0.5 * (edges[:-1] + edges[1:] - 1)
        upper = np.clip(np.searchsorted(centers, coords), 1, count - 1)
        lower = upper - 1
        span = centers[upper] - centers[lower]
        frac = np.clip((coords - centers[lower]) / span, 0.0, 1.0)
        return lower, upper, frac

    i0, i1, fy = blend_coords(row_edges, np.arange(h), t)
    j0, j1, fx = blend_coords(col_edges, np.arange(w), t)
    out = ((1 - fy)[:, None] * (1 - fx)[None, :] * maps[i0[:, None], j0[None, :], q]
           + (1 - fy)[:, None] * fx[None, :] * maps[i0[:, None], j1[None, :], q]
           + fy[:, None] * (1 - fx)[None, :] * maps[i1[:, None], j0[None, :], q]
           + fy[:, None] * fx[None, :] * maps[i1[:, None], j1[None, :], q])
    return out


@dataclass(frozen=True)
class BenchmarkRecord:
    method: str
    trial: int
    dose: float
    mse: float
    ssim: float
    noise_crc: int


@dataclass(frozen=True)
class SummaryRow:
    method: str
    count: int
    mse_mean: float
    mse_std: float
    ssim_mean: float
    ssim_std: float


class _Welford:
    """Streaming mean/variance; sample (n-1) standard deviation."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / (self.n - 1)) if self.n > 1 else 0.0


def _run_trial(synth, methods, trial: int):
    pair = synth.pair(trial)
    noisy = pair.noisy.astype(np.float64)
    truth = pair.ground_truth.astype(np.float64)
    crc = zlib.crc32(pair.noisy.tobytes())
    out = []
    for name in methods:
        result = denoise(noisy, name)
        out.append(BenchmarkRecord(name, trial, pair.dose,
                                   mse(result, truth), ssim(result, truth), crc))
    return out


def run_benchmark(synth, methods, trials: int, threads: int = 1):
    """Denoise ``trials`` synthesized pairs with every method and score them.

    Every method sees the identical noisy realization within a trial.
    Returns (records in trial order, per-method summary rows in the order
    the methods were given). Output is independent of ``threads``.
    """
    methods = list(methods)
    if not methods:
        raise ConfigError("no methods selected")
    for name in methods:
        if name not in METHODS:
            raise ConfigError(f"unknown method {name!r}")
    if trials < 1:
        raise ConfigError(f"need at least one trial, got {trials}")
    if threads <= 1:
        per_trial = [_run_trial(synth, methods, t) for t in range(trials)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_trial = list(pool.map(lambda t: _run_trial(synth, methods, t),
                                      range(trials)))
    records = [rec for chunk in per_trial for rec in chunk]
    acc = {name: (_Welford(), _Welford()) for name in methods}
    for rec in records:
        acc[rec.method][0].add(rec.mse)
        acc[rec.method][1].add(rec.ssim)
    summary = [SummaryRow(name, acc[name][0].n,
                          acc[name][0].mean, acc[name][0].std,
                          acc[name][1].mean, acc[name][1].std)
               for name in methods]
    return records, summary


def _fmt(x) -> str:
    return repr(float(x))


def write_records_csv(path, records) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("method,trial,dose,mse,ssim\n")
        for r in records:
            f.write(f"{r.method},{r.trial},{_fmt(r.dose)},{_fmt(r.mse)},{_fmt(r.ssim)}\n")


def write_summary_csv(path, summary) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("method,count,mse_mean,mse_std,ssim_mean,ssim_std\n")
        for s in summary:
            f.write(f"{s.method},{s.count},{_fmt(s.mse_mean)},{_fmt(s.mse_std)},"
                    f"{_fmt(s.ssim_mean)},{_fmt(s.ssim_std)}\n")


def write_kde_csv(path, grid, density, normalized) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("grid,density,normalized\n")
        for g, d, n in zip(grid, density, normalized):
            f.write(f"{_fmt(g)},{_fmt(d)},{_fmt(n)}\n")
