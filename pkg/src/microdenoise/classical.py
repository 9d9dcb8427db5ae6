"""The nine classical baseline denoisers.

unfiltered, gaussian (3x3, sigma 0.8), bilateral (9x9, radiometric scale
75/255, spatial scale 75), median (3x3), wiener (local statistics, 3x3),
wavelet (Haar BayesShrink soft thresholding), chambolle_tv (dual-projection
isotropic TV), bregman_tv (split-Bregman anisotropic TV), and nl_means
(patch 7, search 11). All operate on 2-D arrays in float64, use reflect
borders so constant images pass through exactly, and are pure functions:
window sums run in a fixed order, so results never depend on scheduling.

The two TV solvers stop when the fractional cost change |C_k - C_{k-1}|
relative to the initial cost drops below ``tol``, or at ``max_iter``.
chambolle_tv additionally halves its dual step whenever a step would raise
the cost, which makes its cost trace non-increasing by construction.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeMismatchError


def _as_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ShapeMismatchError(f"expected a non-empty 2-D image, got shape {a.shape}")
    return a


def _box_sum_valid(x: np.ndarray, size: int) -> np.ndarray:
    """Sum over every size x size window (valid placement) via an integral image."""
    h, w = x.shape
    c = np.zeros((h + 1, w + 1))
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=c[1:, 1:])
    return (c[size:, size:] - c[:-size, size:]
            - c[size:, :-size] + c[:-size, :-size])


def _box_mean(x: np.ndarray, size: int) -> np.ndarray:
    """Reflect-padded size x size window mean, same shape as input."""
    r = size // 2
    xp = np.pad(x, r, mode="reflect")
    return _box_sum_valid(xp, size) / (size * size)


def unfiltered(img) -> np.ndarray:
    return _as_image(img).copy()


def _gaussian3_kernel(sigma: float = 0.8) -> np.ndarray:
    g = np.exp(-np.arange(-1.0, 2.0) ** 2 / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian3(img, sigma: float = 0.8) -> np.ndarray:
    """3x3 normalized Gaussian blur."""
    img = _as_image(img)
    k = _gaussian3_kernel(sigma)
    xp = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    out = np.zeros_like(img)
    for u in range(3):
        for v in range(3):
            out += k[u, v] * xp[u:u + h, v:v + w]
    return out


def bilateral(img, d: int = 9, sigma_color: float = 75.0 / 255.0,
              sigma_space: float = 75.0) -> np.ndarray:
    """Range-and-space weighted average over the d x d neighborhood."""
    img = _as_image(img)
    if d % 2 == 0 or d < 1:
        raise ConfigError(f"neighborhood size must be odd, got {d}")
    r = d // 2
    xp = np.pad(img, r, mode="reflect")
    h, w = img.shape
    acc = np.zeros_like(img)
    wsum = np.zeros_like(img)
    inv_c = 1.0 / (2.0 * sigma_color * sigma_color)
    inv_s = 1.0 / (2.0 * sigma_space * sigma_space)
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            vals = xp[r + di:r + di + h, r + dj:r + dj + w]
            wgt = math.exp(-(di * di + dj * dj) * inv_s) * np.exp(
                -(vals - img) ** 2 * inv_c)
            acc += wgt * vals
            wsum += wgt
    return acc / wsum


def median3(img) -> np.ndarray:
    """Per-pixel median of the 3x3 neighborhood."""
    img = _as_image(img)
    xp = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    stack = np.empty((9, h, w))
    for u in range(3):
        for v in range(3):
            stack[3 * u + v] = xp[u:u + h, v:v + w]
    return np.median(stack, axis=0)


def wiener(img, window: int = 3, noise_power=None) -> np.ndarray:
    """Local-statistics Wiener filter.

    y = mu + max(var - nu, 0) / max(var, nu) * (x - mu) with window-local
    mean and variance; the noise power nu defaults to the mean of the
    local variances.
    """
    img = _as_image(img)
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"window must be odd, got {window}")
    mu = _box_mean(img, window)
    var = np.maximum(_box_mean(img * img, window) - mu * mu, 0.0)
    nu = float(var.mean()) if noise_power is None else float(noise_power)
    denom = np.maximum(np.maximum(var, nu), 1e-300)
    gain = np.maximum(var - nu, 0.0) / denom
    return mu + gain * (img - mu)


def _haar_fwd_axis(x: np.ndarray, axis: int):
    """One Haar level along ``axis``; odd lengths replicate the last sample
    (its detail is then exactly zero). Returns (lo, hi, original length)."""
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    if n % 2:
        x = np.concatenate([x, x[..., -1:]], axis=-1)
    s = math.sqrt(0.5)
    lo = (x[..., 0::2] + x[..., 1::2]) * s
    hi = (x[..., 0::2] - x[..., 1::2]) * s
    return np.moveaxis(lo, -1, axis), np.moveaxis(hi, -1, axis), n


def _haar_inv_axis(lo: np.ndarray, hi: np.ndarray, n: int, axis: int) -> np.ndarray:
    lo = np.moveaxis(lo, axis, -1)
    hi = np.moveaxis(hi, axis, -1)
    s = math.sqrt(0.5)
    out = np.empty(lo.shape[:-1] + (2 * lo.shape[-1],))
    out[..., 0::2] = (lo + hi) * s
    out[..., 1::2] = (lo - hi) * s
    return np.moveaxis(out[..., :n], -1, axis)


def haar_dwt2(img: np.ndarray, levels: int):
    """Multi-level 2-D orthonormal Haar transform.

    Returns (approximation, [finest..coarsest detail dicts]); each detail
    dict holds lh/hl/hh plus the pre-level shape for exact inversion.
    """
    a = np.asarray(img, dtype=np.float64)
    details = []
    for _ in range(levels):
        lo0, hi0, n0 = _haar_fwd_axis(a, 0)
        ll, lh, n1 = _haar_fwd_axis(lo0, 1)
        hl, hh, _ = _haar_fwd_axis(hi0, 1)
        details.append({"lh": lh, "hl": hl, "hh": hh, "shape": (n0, n1)})
        a = ll
    return a, details


def haar_idwt2(approx: np.ndarray, details) -> np.ndarray:
    a = approx
    for d in reversed(details):
        n0, n1 = d["shape"]
        lo0 = _haar_inv_axis(a, d["lh"], n1, 1)
        hi0 = _haar_inv_axis(d["hl"], d["hh"], n1, 1)
        a = _haar_inv_axis(lo0, hi0, n0, 0)
    return a


def estimate_noise_sigma(img) -> float:
    """Robust noise estimate: median absolute finest diagonal Haar
    coefficient divided by 0.6745."""
    img = _as_image(img)
    _, details = haar_dwt2(img, 1)
    return float(np.median(np.abs(details[0]["hh"])) / 0.6745)


def _soft(c: np.ndarray, t: float) -> np.ndarray:
    return np.sign(c) * np.maximum(np.abs(c) - t, 0.0)


def wavelet_bayes_shrink(img, threshold_override=None) -> np.ndarray:
    """Per-subband adaptive soft thresholding on an orthonormal Haar
    decomposition; thresholds t = sigma^2 / sigma_x per subband, with the
    subband zeroed when its signal estimate vanishes."""
    img = _as_image(img)
    h, w = img.shape
    if min(h, w) < 8:
        raise ShapeMismatchError(f"image must be at least 8x8, got {h}x{w}")
    levels = min(4, int(math.log2(min(h, w))) - 2)
    approx, details = haar_dwt2(img, levels)
    sigma = float(np.median(np.abs(details[0]["hh"])) / 0.6745)
    s2 = sigma * sigma
    for d in details:
        for band in ("lh", "hl", "hh"):
            c = d[band]
            if threshold_override is not None:
                d[band] = _soft(c, float(threshold_override))
                continue
            sx = math.sqrt(max(float(c.var()) - s2, 0.0))
            d[band] = np.zeros_like(c) if sx == 0.0 else _soft(c, s2 / sx)
    return haar_idwt2(approx, details)


def tv_isotropic(img) -> float:
    """Sum of gradient magnitudes (forward differences)."""
    img = _as_image(img)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:-1, :] = np.diff(img, axis=0)
    gy[:, :-1] = np.diff(img, axis=1)
    return float(np.sqrt(gx * gx + gy * gy).sum())


def tv_anisotropic(img) -> float:
    """Sum of absolute forward differences along both axes."""
    img = _as_image(img)
    return float(np.abs(np.diff(img, axis=0)).sum()
                 + np.abs(np.diff(img, axis=1)).sum())


def chambolle_tv(img, weight: float = 0.1, tol: float = 2e-4,
                 max_iter: int = 200, return_costs: bool = False):
    """Isotropic TV denoising by dual projection.

    Minimizes ||u - img||^2 / 2 + weight * TV(u). The dual step starts at
    1/4 and halves whenever a step would increase the cost, so the
    returned cost trace is non-increasing. Stops once the cost change per
    iteration falls below ``tol`` relative to the initial cost.
    """
    f = _as_image(img)
    if weight <= 0:
        raise ConfigError(f"weight must be positive, got {weight}")
    p = np.zeros((2,) + f.shape)
    u = f.copy()
    tau = 0.25

    def grad(a):
        g = np.zeros((2,) + a.shape)
        g[0, :-1, :] = np.diff(a, axis=0)
        g[1, :, :-1] = np.diff(a, axis=1)
        return g

    def cost_of(uu, dd):
        g = grad(uu)
        return (0.5 * (dd * dd).sum()
                + weight * np.sqrt(g[0] ** 2 + g[1] ** 2).sum()) / f.size

    costs = [cost_of(u, np.zeros_like(f))]
    it = 0
    while it < max_iter:
        it += 1
        g = grad(u)
        norm = np.sqrt(g[0] ** 2 + g[1] ** 2)[None]
        p_new = (p - tau * g) / (1.0 + (tau / weight) * norm)
        d = -p_new.sum(0)
        d[1:, :] += p_new[0, :-1, :]
        d[:, 1:] += p_new[1, :, :-1]
        u_new = f + d
        c = cost_of(u_new, d)
        if c > costs[-1]:
            if tau <= 1e-8:  # cannot shrink further; accept convergence
                break
            tau *= 0.5
            continue
        p, u = p_new, u_new
        costs.append(c)
        if abs(costs[-1] - costs[-2]) < tol * costs[0]:
            break
    return (u, costs) if return_costs else u


def bregman_tv(img, weight: float = 0.1, tol: float = 2e-4,
               max_iter: int = 200, inner_sweeps: int = 2,
               return_costs: bool = False):
    """Anisotropic TV denoising by split Bregman.

    Minimizes ||u - img||^2 / 2 + weight * (|du/dx|_1 + |du/dy|_1) with
    auxiliary gradient fields solved by shrinkage and the u subproblem by
    red-black Gauss-Seidel sweeps under mirror boundaries. Stopping matches
    chambolle_tv.
    """
    f = _as_image(img)
    if weight <= 0:
        raise ConfigError(f"weight must be positive, got {weight}")
    h, w = f.shape
    lam = 2.0 * weight  # quadratic penalty on the gradient splits
    u = f.copy()
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    bx = np.zeros_like(f)
    by = np.zeros_like(f)

    # neighbor count per pixel under mirror boundaries
    deg = np.full(f.shape, 4.0)
    deg[0, :] -= 1; deg[-1, :] -= 1
    deg[:, 0] -= 1; deg[:, -1] -= 1

    red = (np.add.outer(np.arange(h), np.arange(w)) % 2) == 0
    black = ~red

    def fwd_x(a):
        g = np.zeros_like(a)
        g[:-1, :] = np.diff(a, axis=0)
        return g

    def fwd_y(a):
        g = np.zeros_like(a)
        g[:, :-1] = np.diff(a, axis=1)
        return g

    def adj_x(v):
        # adjoint of fwd_x: backward difference with zero inflow at borders
        out = np.zeros_like(v)
        out[1:, :] = v[:-1, :]
        out -= v
        out[-1, :] += v[-1, :]  # last row of v is structurally zero
        return out

    def adj_y(v):
        out = np.zeros_like(v)
        out[:, 1:] = v[:, :-1]
        out -= v
        out[:, -1] += v[:, -1]
        return out

    def cost_of(uu):
        return (0.5 * ((uu - f) ** 2).sum()
                + weight * (np.abs(fwd_x(uu)).sum()
                            + np.abs(fwd_y(uu)).sum())) / f.size

    def neighbor_sum(a):
        s = np.zeros_like(a)
        s[1:, :] += a[:-1, :]
        s[:-1, :] += a[1:, :]
        s[:, 1:] += a[:, :-1]
        s[:, :-1] += a[:, 1:]
        return s

    costs = [cost_of(u)]
    it = 0
    while it < max_iter:
        it += 1
        rhs = f + lam * (adj_x(dx - bx) + adj_y(dy - by))
        for _ in range(inner_sweeps):
            for mask in (red, black):
                ns = neighbor_sum(u)
                u[mask] = (rhs[mask] + lam * ns[mask]) / (1.0 + lam * deg[mask])
        gx = fwd_x(u)
        gy = fwd_y(u)
        dx = _soft(gx + bx, weight / lam)
        dy = _soft(gy + by, weight / lam)
        bx += gx - dx
        by += gy - dy
        costs.append(cost_of(u))
        if abs(costs[-1] - costs[-2]) < tol * costs[0]:
            break
    return (u, costs) if return_costs else u


def nl_means(img, patch: int = 7, search: int = 11, h: float = 0.1,
             sigma: float = 0.0) -> np.ndarray:
    """Non-local means: each pixel becomes a weighted average of all pixels
    in its search window, weighted by patch similarity
    exp(-max(d^2 - 2*sigma^2, 0) / h^2) with d^2 the mean squared patch
    difference."""
    img = _as_image(img)
    if patch % 2 == 0 or search % 2 == 0 or patch < 1 or search < 1:
        raise ConfigError(f"patch and search sizes must be odd, got {patch}, {search}")
    if h <= 0:
        raise ConfigError(f"filtering strength h must be positive, got {h}")
    hh, ww = img.shape
    pr = patch // 2
    sr = search // 2
    xp = np.pad(img, sr + pr, mode="reflect")
    # patch supports for the centered copy, reused for every offset
    a = xp[sr:sr + hh + 2 * pr, sr:sr + ww + 2 * pr]
    acc = np.zeros_like(img)
    wsum = np.zeros_like(img)
    inv_h2 = 1.0 / (h * h)
    floor = 2.0 * sigma * sigma
    n_patch = patch * patch
    for di in range(-sr, sr + 1):
        for dj in range(-sr, sr + 1):
            b = xp[sr + di:sr + di + hh + 2 * pr, sr + dj:sr + dj + ww + 2 * pr]
            d2 = _box_sum_valid((a - b) ** 2, patch) / n_patch
            wgt = np.exp(-np.maximum(d2 - floor, 0.0) * inv_h2)
            vals = xp[sr + pr + di:sr + pr + di + hh, sr + pr + dj:sr + pr + dj + ww]
            acc += wgt * vals
            wsum += wgt
    return acc / wsum


METHODS = {
    "unfiltered": unfiltered,
    "gaussian": gaussian3,
    "bilateral": bilateral,
    "median": median3,
    "wiener": wiener,
    "wavelet": wavelet_bayes_shrink,
    "chambolle_tv": chambolle_tv,
    "bregman_tv": bregman_tv,
    "nl_means": nl_means,
}


def denoise(img, method: str, **params) -> np.ndarray:
    """Dispatch to one of the nine methods by id."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of "
                          f"{', '.join(sorted(METHODS))}")
    return METHODS[method](img, **params)
