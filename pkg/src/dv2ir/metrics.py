"""PSNR, SSIM and a toy Frechet distance over fixed random conv features.

Aggregations are order-invariant: per-pair scores are summed with
``math.fsum`` and feature rows are sorted before moments are taken.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .errors import ContractError, FormatError, NumericError, ShapeError
from .tensor import Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FID_SHRINKAGE = 1e-6


def psnr(a, b, peak: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    i = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[half:x.shape[0] - half, half:x.shape[1] - half]


def ssim_map(a, b, peak: float = 255.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 255.0) -> float:
    """Mean SSIM over every fully contained 11x11 Gaussian window."""
    return float(np.mean(ssim_map(a, b, peak)))


class FeatureExtractor:
    """Fixed random conv net: 1 -> 8 -> 16 channels, stride 2 each, SiLU, global average pool."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng([seed, 0xF1D])
        self.w1 = rng.standard_normal((8, 1, 3, 3)) / 3.0
        self.b1 = rng.standard_normal(8) * 0.1
        self.w2 = rng.standard_normal((16, 8, 3, 3)) / math.sqrt(72.0)
        self.b2 = rng.standard_normal(16) * 0.1
        self.dim = 16

    def __call__(self, image) -> np.ndarray:
        """Feature vector of one 8-bit image."""
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError("feature extractor expects a single 2-D image")
        x = Tensor(x[None, None] / 255.0)
        with T.no_grad():
            h = T.silu(T.conv2d(x, Tensor(self.w1), Tensor(self.b1), stride=2, pad=1))
            h = T.silu(T.conv2d(h, Tensor(self.w2), Tensor(self.b2), stride=2, pad=1))
        return h.data.mean(axis=(2, 3))[0]

    def features(self, images: Sequence) -> np.ndarray:
        # one image at a time keeps each row independent of batch composition
        return np.stack([self(im) for im in images])


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("matrix_sqrt_psd needs a square matrix")
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-8:
        raise ContractError("matrix is not symmetric within 1e-8")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    if w.size and w.min() < -1e-8 * max(1.0, float(np.abs(w).max())):
        raise ContractError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2)."""
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, dtype=np.float64)), np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, dtype=np.float64)), np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise NumericError("covariance is not finite")
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != (mu_a.size, mu_a.size):
        raise ShapeError("inconsistent moment shapes")
    sa = matrix_sqrt_psd(cov_a)
    inner = sa @ cov_b @ sa
    tr_sqrt = float(np.trace(matrix_sqrt_psd((inner + inner.T) / 2.0)))
    diff = mu_a - mu_b
    d = float(diff @ diff) + float(np.trace(cov_a)) + float(np.trace(cov_b)) - 2.0 * tr_sqrt
    if d < -1e-6:
        raise NumericError(f"Frechet distance residue {d:.3g} below tolerance")
    return max(d, 0.0)


def feature_moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and shrunk covariance of feature rows, independent of row order."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ShapeError("need at least two feature rows")
    feats = feats[np.lexsort(feats.T[::-1])]
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
    return mu, cov + FID_SHRINKAGE * np.eye(feats.shape[1])


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    return frechet_distance(*feature_moments(fa), *feature_moments(fb))


def toy_fid(set_a: Sequence, set_b: Sequence, fx: FeatureExtractor | None = None) -> float:
    fx = fx or FeatureExtractor()
    return fid_from_features(fx.features(set_a), fx.features(set_b))


@dataclass
class MetricsReport:
    fid: float
    psnr: float
    ssim: float
    n_samples: int
    config_hash: str = ""

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ContractError(f"ssim {self.ssim} outside [-1, 1]")
        if self.fid < 0:
            raise ContractError("fid must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        try:
            d = json.loads(text)
            return cls(float(d["fid"]), float(d["psnr"]), float(d["ssim"]), int(d["n_samples"]),
                       str(d.get("config_hash", "")))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed metrics report: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> MetricsReport:
        return cls.from_json(Path(path).read_text())


def mean_psnr(translated: Sequence, reference: Sequence) -> float:
    return math.fsum(psnr(a, b) for a, b in zip(translated, reference)) / len(translated)


def mean_ssim(translated: Sequence, reference: Sequence) -> float:
    return math.fsum(ssim(a, b) for a, b in zip(translated, reference)) / len(translated)


def evaluate(translated: Sequence, reference: Sequence, fx: FeatureExtractor | None = None,
             config_hash: str = "") -> MetricsReport:
    """Pairwise PSNR/SSIM averages and toy FID between the two sets."""
    if len(translated) != len(reference):
        raise ShapeError(f"{len(translated)} translated vs {len(reference)} reference images")
    if not translated:
        raise ShapeError("nothing to evaluate")
    return MetricsReport(toy_fid(translated, reference, fx), mean_psnr(translated, reference),
                         mean_ssim(translated, reference), len(translated), config_hash)
