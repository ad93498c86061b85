"""Evaluation distances: speaker-embedding distance, Frechet and kernel
distances over surrogate content features, and generative strength."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import pdist, squareform

from .embedders import SPEAKER_STEPS, Surrogates, SurrogateError
from .validation import check_mel_array

EIGEN_FLOOR = 1e-10
FDSD_MIN_SAMPLES = 32
KDSD_SCALE = 1e3


@dataclass
class FeatureSet:
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError(f"feature set must be (N, d), got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("feature set contains non-finite values")
        self.embeddings = emb

    def __len__(self):
        return self.embeddings.shape[0]


def extract_features(surrogates: Surrogates, mels) -> FeatureSet:
    """Mean-pooled content-encoder features, one row per mel."""
    if surrogates is None:
        raise SurrogateError("feature extractor not loaded")
    rows = []
    for mel in mels:
        x = torch.as_tensor(check_mel_array(mel))[None]
        rows.append(surrogates.content_features(x)[0].mean(dim=0).numpy())
    return FeatureSet(np.stack(rows))


def sed(surrogates: Surrogates, generated, reference) -> float:
    """L1 distance between speaker embeddings of the first second of each mel."""
    if surrogates is None:
        raise SurrogateError("speaker embedder not loaded")
    a = check_mel_array(generated)[:SPEAKER_STEPS]
    b = check_mel_array(reference)[:SPEAKER_STEPS]
    with torch.no_grad():
        emb = surrogates.speaker_features(torch.as_tensor(np.stack([a, b]))).numpy().astype(np.float64)
    return float(np.abs(emb[0] - emb[1]).sum())


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.maximum(vals, EIGEN_FLOOR))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2))`` via symmetric square roots."""
    if not (np.all(np.isfinite(cov1)) and np.all(np.isfinite(cov2))):
        raise ValueError("degenerate covariance")
    root1 = _sqrtm_psd(cov1)
    middle = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    # round-off in the null space would otherwise add sqrt(1e-18) per dimension
    trace_sqrt = np.sqrt(vals[vals > EIGEN_FLOOR]).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * trace_sqrt)


def fdsd(gen: FeatureSet, ref: FeatureSet) -> float:
    for name, fs in (("generated", gen), ("reference", ref)):
        if len(fs) < 2:
            raise ValueError(f"{name} feature set needs at least 2 rows, got {len(fs)}")
        if len(fs) < FDSD_MIN_SAMPLES:
            warnings.warn(f"{name} feature set has {len(fs)} rows; FDSD is unreliable below {FDSD_MIN_SAMPLES}",
                          stacklevel=2)
    x, y = gen.embeddings, ref.embeddings
    return frechet_distance(x.mean(0), np.cov(x, rowvar=False), y.mean(0), np.cov(y, rowvar=False))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD.

    Equal-size sets are treated as paired and use the U-statistic, which also
    drops the ``k(x_i, y_i)`` cross terms; it is exactly 0 for identical sets.
    Unequal sizes use the two-sample estimator with the full cross mean.
    """
    m, n = x.shape[0], y.shape[0]
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        cross = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        cross = kxy.mean()
    return float(term_x + term_y - 2.0 * cross)


def kdsd(gen: FeatureSet, ref: FeatureSet) -> float:
    """Unbiased squared MMD with a cubic polynomial kernel, reported x1000."""
    if len(gen) < 2 or len(ref) < 2:
        raise ValueError("KDSD needs at least 2 rows in each feature set")
    return KDSD_SCALE * mmd2_unbiased(gen.embeddings, ref.embeddings)


def unique_percentage(samples, delta: float = 0.5) -> float:
    """Percentage of samples whose L2 distance to every other sample is at least ``delta``."""
    flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if flat.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    dist = squareform(pdist(flat))
    np.fill_diagonal(dist, np.inf)
    return 100.0 * float(np.mean(dist.min(axis=1) >= delta))
