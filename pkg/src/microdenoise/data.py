"""Synthesis of noisy/clean training pairs from high-count micrographs.

The pipeline mirrors how a low-dose acquisition degrades a well-exposed
one: the micrograph is downsampled 2x by block averaging (conserves total
counts), cropped at a random position, flipped/rotated, linearly mapped to
[0,1], scaled by a sampled dose in counts per pixel, and Poisson-corrupted
pixelwise. The clean crop is then rescaled to the noisy crop's mean so the
regression target carries no global brightness cue.

Count-domain arithmetic stays in float64, where integer counts are exact;
finished pairs are float32. Every pair is a pure function of (sources,
dose model, seed, pair index): each index gets its own counter-based
generator keyed by seed xor index, so streams are reproducible regardless
of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeMismatchError
from .formats import load_image

SPLIT_WEIGHTS = (11350, 2431, 3486)  # train/val/test proportions


@dataclass
class Micrograph:
    """An ingested source image in electron counts."""
    pixels: np.ndarray
    source: str = ""
    mean_counts: float = field(init=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ShapeMismatchError(
                f"micrograph must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.size == 0:
            raise ShapeMismatchError("micrograph is empty")
        if self.pixels.min() < 0:
            raise ShapeMismatchError(f"negative counts in {self.source or 'micrograph'}")
        self.mean_counts = float(self.pixels.mean())


def ingest_micrograph(path) -> Micrograph:
    pixels, _ = load_image(path)
    return Micrograph(pixels, source=str(path))


def area_downsample_2x(img: np.ndarray) -> np.ndarray:
    """Halve both dimensions; each output pixel is the mean of a 2x2 block."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"dimensions must be even to downsample, got {h}x{w}")
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def random_crop(img: np.ndarray, size: int, rng) -> tuple:
    """Crop size x size at a uniformly random origin; returns (crop, (row, col))."""
    h, w = img.shape
    if h < size or w < size:
        raise ShapeMismatchError(f"image {h}x{w} smaller than crop size {size}")
    row = int(rng.integers(0, h - size + 1))
    col = int(rng.integers(0, w - size + 1))
    return img[row:row + size, col:col + size].copy(), (row, col)


def augment8(crop: np.ndarray, k: int) -> np.ndarray:
    """Apply element k of the square's symmetry group; k=0 is the identity,
    1..3 are quarter turns, 4..7 mirror first and then turn."""
    if not 0 <= k <= 7:
        raise ShapeMismatchError(f"augment index must be 0..7, got {k}")
    if crop.ndim != 2 or crop.shape[0] != crop.shape[1]:
        raise ShapeMismatchError(f"augmentation needs a square crop, got {crop.shape}")
    out = np.fliplr(crop) if k >= 4 else crop
    return np.ascontiguousarray(np.rot90(out, k % 4))


def normalize01(crop: np.ndarray) -> np.ndarray:
    """Affinely map min to 0.0 and max to 1.0."""
    crop = np.asarray(crop, dtype=np.float64)
    lo, hi = crop.min(), crop.max()
    if hi <= lo:
        raise DegenerateInputError("constant crop cannot be normalized")
    return (crop - lo) / (hi - lo)


class DoseModel:
    """Base for dose-sampling variants; use a concrete subclass."""


@dataclass(frozen=True)
class LowDoseExponential(DoseModel):
    """Exponential with mean ``beta`` counts, shifted up by ``offset``."""
    beta: float = 75.0
    offset: float = 25.0

    def __post_init__(self):
        if self.beta <= 0 or self.offset < 0:
            raise ConfigError(f"need beta > 0 and offset >= 0, got {self}")


@dataclass(frozen=True)
class OrdinaryUniform(DoseModel):
    lo: float = 200.0
    hi: float = 2500.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"need lo < hi, got {self}")


@dataclass(frozen=True)
class Fixed(DoseModel):
    dose: float

    def __post_init__(self):
        if self.dose <= 0:
            raise ConfigError(f"need dose > 0, got {self}")


def sample_dose(model: DoseModel, rng) -> float:
    if isinstance(model, LowDoseExponential):
        return model.offset + float(rng.exponential(model.beta))
    if isinstance(model, OrdinaryUniform):
        return float(rng.uniform(model.lo, model.hi))
    if isinstance(model, Fixed):
        return model.dose
    raise ConfigError(f"unknown dose model {model!r}")


def apply_poisson(img01: np.ndarray, dose: float, rng) -> np.ndarray:
    """Simulate counting noise: draw Poisson(dose * value) per pixel and
    rescale back to the [0,1] value domain."""
    img01 = np.asarray(img01, dtype=np.float64)
    if dose <= 0:
        raise ConfigError(f"dose must be positive, got {dose}")
    if img01.min() < 0 or img01.max() > 1:
        raise ShapeMismatchError("pixel values must lie in [0,1] before dosing")
    return rng.poisson(img01 * dose).astype(np.float64) / dose


@dataclass(frozen=True)
class ImagePair:
    noisy: np.ndarray
    ground_truth: np.ndarray
    dose: float
    origin: tuple
    augment_k: int


_MAX_CROP_ATTEMPTS = 32


def make_pair(img, model: DoseModel, rng, crop_size: int = 512,
              downsample: bool = True) -> ImagePair:
    """Run the full synthesis chain on one micrograph.

    Constant crops cannot be normalized and all-dark crops leave nothing
    to mean-match; both are resampled at a fresh origin. ``model=None``
    skips the corruption stage entirely (noisy equals the target), which
    gives error maps an exact noiseless reference.
    """
    pixels = img.pixels if isinstance(img, Micrograph) else np.asarray(img, dtype=np.float64)
    if downsample:
        pixels = area_downsample_2x(pixels)
    for _ in range(_MAX_CROP_ATTEMPTS):
        crop, origin = random_crop(pixels, crop_size, rng)
        k = int(rng.integers(8))
        dose = float("inf") if model is None else sample_dose(model, rng)
        if crop.min() >= crop.max():
            continue
        clean = normalize01(augment8(crop, k))
        noisy = clean.copy() if model is None else apply_poisson(clean, dose, rng)
        noisy_mean = noisy.mean()
        clean_mean = clean.mean()
        if clean_mean < 1e-8 or noisy_mean <= 0:
            continue
        target = clean * (noisy_mean / clean_mean)
        return ImagePair(noisy.astype(np.float32), target.astype(np.float32),
                         dose, origin, k)
    raise DegenerateInputError(
        f"no usable crop found in {_MAX_CROP_ATTEMPTS} attempts")


def pair_rng(seed: int, index: int):
    """Independent per-pair stream: counter-based generator keyed by
    seed xor index, so any pair can be produced without its predecessors."""
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(index)
    return np.random.Generator(np.random.Philox(key=key))


class PairSynthesizer:
    """Indexable stream of training pairs over a set of source images.

    Downsampling is deterministic per source, so it happens once here;
    pair ``i`` then picks its source, crop, augmentation, and dose from
    its own generator.
    """

    def __init__(self, images, model: DoseModel, seed: int = 0,
                 crop_size: int = 512, downsample: bool = True):
        arrays = []
        for m in images:
            a = m.pixels if isinstance(m, Micrograph) else np.asarray(m, dtype=np.float64)
            arrays.append(area_downsample_2x(a) if downsample else a)
        if not arrays:
            raise ConfigError("synthesizer needs at least one source image")
        self.sources = arrays
        self.model = model
        self.seed = seed
        self.crop_size = crop_size

    def pair(self, index: int) -> ImagePair:
        rng = pair_rng(self.seed, index)
        src = self.sources[int(rng.integers(len(self.sources)))]
        return make_pair(src, self.model, rng, crop_size=self.crop_size,
                         downsample=False)

    def batch(self, start: int, count: int) -> list:
        return [self.pair(i) for i in range(start, start + count)]

    def __iter__(self):
        i = 0
        while True:
            yield self.pair(i)
            i += 1


def split_dataset(paths, seed: int = 0) -> tuple:
    """Deterministic shuffled train/val/test split in 11350:2431:3486
    proportions; returns three lists."""
    items = list(paths)
    order = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[i] for i in order]
    n = len(items)
    total = sum(SPLIT_WEIGHTS)
    n_test = round(n * SPLIT_WEIGHTS[2] / total)
    n_val = round(n * SPLIT_WEIGHTS[1] / total)
    n_train = n - n_val - n_test
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])
