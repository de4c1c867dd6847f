"""Fréchet distance between feature statistics of generated and reference images.

The features come from a fixed, untrained extractor: raw pixels, or a seeded
random orthonormal projection of the pixels when the image has more than
``max_dim`` pixels.  Absolute values are therefore not comparable to
Inception-based FID; orderings between models are.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import NoiseSchedule, ddpm_sample
from .errors import NumericError

DEFAULT_MAX_DIM = 256
DEFAULT_SAMPLES = 512
DEFAULT_REGULARIZATION = 1e-6


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"need at least 2 samples, got {self.count}")
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"mean {self.mean.shape} and covariance {self.cov.shape} are inconsistent")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    kind: str
    projection: np.ndarray | None = None  # (d, pixels) with orthonormal rows

    def __call__(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        if self.kind == "raw_pixels":
            return flat
        if flat.shape[1] != self.projection.shape[1]:
            raise ValueError(f"extractor expects {self.projection.shape[1]} pixels, got {flat.shape[1]}")
        return flat @ self.projection.T

    @classmethod
    def raw_pixels(cls) -> "FeatureExtractor":
        return cls("raw_pixels")

    @classmethod
    def random_projection(cls, pixels: int, dim: int = DEFAULT_MAX_DIM, seed: int = 0) -> "FeatureExtractor":
        if not 1 <= dim <= pixels:
            raise ValueError(f"projection dimension must be in [1, {pixels}], got {dim}")
        g = np.random.default_rng(seed).standard_normal((pixels, dim))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # unique QR
        return cls("random_projection", q.T.copy())

    @classmethod
    def default(cls, pixels: int, max_dim: int = DEFAULT_MAX_DIM, seed: int = 0) -> "FeatureExtractor":
        if pixels <= max_dim:
            return cls.raw_pixels()
        return cls.random_projection(pixels, max_dim, seed)


def fit_stats(images: np.ndarray, fx: FeatureExtractor | None = None) -> FeatureStats:
    """Sample mean and unbiased covariance of the extracted features."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise ValueError(f"need at least 2 images, got {len(images)}")
    feats = (fx or FeatureExtractor.raw_pixels())(images)
    cov = np.atleast_2d(np.cov(feats, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(feats.mean(axis=0), cov, len(feats))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, regularization: float = 0.0) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of the square-root term is taken from the eigenvalues of
    S_a^{1/2} S_b S_a^{1/2}, clamped at zero.  ``regularization`` adds a
    multiple of the identity to both covariances first.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    eye = regularization * np.eye(a.dim)
    sa, sb = a.cov + eye, b.cov + eye
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if not np.all(np.isfinite(eig)):
        raise NumericError("non-finite eigenvalues in the covariance square root")
    diff = a.mean - b.mean
    d2 = diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.sum(np.sqrt(np.clip(eig, 0.0, None)))
    return float(max(d2, 0.0))


@dataclass
class ClientScores:
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))

    @property
    def spread(self) -> float:
        return float(np.max(self.scores) - np.min(self.scores))


def score_model(models, reference: np.ndarray | FeatureStats, n: int, fx: FeatureExtractor,
                sched: NoiseSchedule, seed: int = 0, regularization: float = DEFAULT_REGULARIZATION):
    """Sample ``n`` images per model and score them against the reference set.

    A single denoiser gives a float.  A sequence (per-client composed models)
    gives :class:`ClientScores`; every model is sampled from the same seed.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    scores, _ = score_and_sample(models, reference, n, fx, sched, seed, regularization)
    return scores


def score_and_sample(models, reference, n, fx, sched, seed=0, regularization=DEFAULT_REGULARIZATION):
    """Like :func:`score_model`, also returning the generated images (one array per model)."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    ref = reference if isinstance(reference, FeatureStats) else fit_stats(reference, fx)
    single = not isinstance(models, Sequence)
    scores, images = [], []
    for m in ([models] if single else models):
        samples = ddpm_sample(m, sched, n, m.config.image_shape, np.random.default_rng(seed), clip=True)
        scores.append(frechet_distance(fit_stats(samples, fx), ref, regularization))
        images.append(samples)
    return (scores[0] if single else ClientScores(scores)), images


# ---------------------------------------------------------------------------
# image output


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] pixels back to [0, 255]."""
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def image_grid(images: np.ndarray, cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile (n, 1, h, w) images in [-1, 1] into one uint8 grid."""
    imgs = to_uint8(np.asarray(images)[:, 0])
    n, h, w = imgs.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return grid


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) PGM with maxval 255."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())
    tmp.replace(path)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", data)
    if not m:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
