# stats.py
"""PCA reduction, k-NN divergence estimation and per-altitude profile statistics."""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from data import WindProfile

logger = logging.getLogger(__name__)

KNN_JITTER = 1e-12


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PcaModel:
    components: np.ndarray
    column_means: np.ndarray
    explained_variance_ratio: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.components.shape[1])

    def to_dict(self) -> Dict:
        return {
            "components": self.components.tolist(),
            "column_means": self.column_means.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "PcaModel":
        return cls(**{k: np.asarray(raw[k], dtype=float) for k in
                      ("components", "column_means", "explained_variance_ratio", "explained_variance")})


@dataclass(frozen=True, eq=False)
class ProfileStats:
    mean: np.ndarray
    std: np.ndarray


def pca_fit(X, n_components: int) -> PcaModel:
    """Top eigenvectors of the population covariance, by descending eigenvalue."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientSamplesError(f"PCA needs an N x d matrix with N >= 2, got shape {X.shape}")
    n, d = X.shape
    if not 1 <= n_components <= min(n, d):
        raise ValueError(f"component count {n_components} outside [1, {min(n, d)}]")
    if not np.isfinite(X).all():
        raise ValueError("PCA input contains non-finite values")

    means = X.mean(axis=0)
    centered = X - means
    gram = centered.T @ centered / n
    eigvals, eigvecs = linalg.eigh(gram)
    order = np.argsort(-eigvals, kind="stable")
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order].T

    # Deterministic sign: largest-magnitude loading of each component is positive.
    pivots = np.argmax(np.abs(eigvecs), axis=1)
    signs = np.sign(eigvecs[np.arange(d), pivots])
    eigvecs = eigvecs * np.where(signs == 0, 1.0, signs)[:, None]

    total = eigvals.sum()
    ratio = eigvals / total if total > 0 else np.zeros_like(eigvals)
    model = PcaModel(
        components=eigvecs[:n_components].copy(),
        column_means=means,
        explained_variance_ratio=ratio[:n_components].copy(),
        explained_variance=eigvals[:n_components].copy(),
    )
    logger.info("[pca_fit] %d components explain %.4f of the variance (d=%d, N=%d)",
                n_components, float(model.explained_variance_ratio.sum()), d, n)
    return model


def pca_variance_curve(X) -> np.ndarray:
    """Cumulative explained-variance ratio for every component count."""
    X = np.asarray(X, dtype=float)
    full = pca_fit(X, min(X.shape))
    return np.cumsum(full.explained_variance_ratio)


def pca_project(model: PcaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {x.shape[-1]}")
    return (x - model.column_means) @ model.components.T


def pca_reconstruct(model: PcaModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != model.n_components:
        raise ValueError(f"expected {model.n_components} components, got {y.shape[-1]}")
    return y @ model.components + model.column_means


def _knn_distances(tree: cKDTree, points: np.ndarray, k: int, workers: int) -> np.ndarray:
    dist, _ = tree.query(points, k=[k], workers=workers)
    return dist[:, 0] + KNN_JITTER


def knn_kl(P, Q, k: int = 1, workers: int = 1) -> float:
    """One-sided k-NN divergence estimate KL(P || Q), unclamped."""
    n, dim = P.shape
    M = Q.shape[0]
    # The k-th neighbour of a point within its own sample is index k+1 (itself first).
    rho = _knn_distances(cKDTree(P), P, k + 1, workers)
    nu = _knn_distances(cKDTree(Q), P, k, workers)
    return float(dim * np.mean(np.log(nu / rho)) + np.log(M / (n - 1)))


def symmetrized_kl(P, Q, k: int = 1, workers: int = 1) -> float:
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if Q.ndim == 1:
        Q = Q[:, None]
    if k < 1:
        raise ValueError(f"neighbour count must be >= 1, got {k}")
    if P.shape[0] <= k or Q.shape[0] <= k:
        raise InsufficientSamplesError(f"need more than k={k} samples on each side, got {P.shape[0]} and {Q.shape[0]}")
    if P.shape[1] != Q.shape[1]:
        raise ValueError(f"sample dimensions differ: {P.shape[1]} vs {Q.shape[1]}")
    if not (np.isfinite(P).all() and np.isfinite(Q).all()):
        raise ValueError("samples must be finite")
    total = knn_kl(P, Q, k, workers) + knn_kl(Q, P, k, workers)
    return max(total, 0.0)


def profile_stats(samples: Sequence[WindProfile]) -> ProfileStats:
    if len(samples) == 0:
        raise InsufficientSamplesError("profile statistics need at least one profile")
    speed = np.stack([p.speed for p in samples])
    return speed_stats(speed)


def speed_stats(speed: np.ndarray) -> ProfileStats:
    """Per-altitude mean and population std of an (N, A) speed array."""
    return ProfileStats(mean=speed.mean(axis=0), std=speed.std(axis=0))
