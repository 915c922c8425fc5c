"""Latent-space analysis: PCA projections, cluster separation, prior coverage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .errors import ShapeError


@dataclass
class PCAResult:
    projections: np.ndarray
    explained_variance: np.ndarray  # share of total variance per kept component
    components: np.ndarray          # (k, d), rows are unit eigenvectors
    mean: np.ndarray

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.components.T

    def inverse(self, proj) -> np.ndarray:
        return np.asarray(proj) @ self.components + self.mean


def pca_project(latents, k: int) -> PCAResult:
    """Project onto the top-``k`` eigenvectors of the sample covariance."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < k + 1:
        raise ShapeError(f"need at least k+1={k + 1} latents of shape (n, d)")
    if k < 1 or k > x.shape[1]:
        raise ShapeError(f"k must lie in [1, {x.shape[1]}]")
    mean = x.mean(0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    total = np.trace(cov)
    if total <= 0:
        raise ShapeError("all latents are identical; there is no variance to project")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    return PCAResult(xc @ comps.T, np.clip(vals[order], 0, None) / total, comps, mean)


def kmeans_silhouette(x, k: int = 3, seed: int = 0) -> tuple[float, np.ndarray]:
    """Silhouette of a k-means partition and its labels."""
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(np.asarray(x))
    return float(silhouette_score(x, km.labels_)), km.labels_


def mode_silhouette(latents, k: int = 3, dims: int = 2, seed: int = 0) -> float:
    """k-means silhouette in the ``dims``-D PCA projection of ``latents``."""
    return kmeans_silhouette(pca_project(latents, dims).projections, k, seed)[0]


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a ** 2).sum(1)[:, None] + (b ** 2).sum(1)[None] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def support_radius(data, q: float = 95.0) -> float:
    """``q``-th percentile of leave-one-out nearest-neighbour distances in ``data``."""
    data = np.asarray(data, dtype=np.float64)
    d = _pairwise(data, data)
    np.fill_diagonal(d, np.inf)
    return float(np.percentile(d.min(1), q))


def in_support_fraction(data, samples, radius: float | None = None) -> float:
    data = np.asarray(data, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    r = support_radius(data) if radius is None else radius
    return float((_pairwise(samples, data).min(1) <= r).mean())


@dataclass
class CoverageRow:
    prior: str
    in_support: float
    cluster_mass: list[float]

    def as_dict(self) -> dict:
        return {"prior": self.prior, "in_support": self.in_support,
                **{f"cluster_{i}": m for i, m in enumerate(self.cluster_mass)}}


def mode_coverage_report(dataset_latents, sampled: dict, k: int = 3,
                         seed: int = 0) -> list[CoverageRow]:
    """In-support fraction and per-cluster mass for each named sample set.

    Clusters come from k-means on the dataset latents; the support radius is
    the 95th percentile of their nearest-neighbour distances.
    """
    data = np.asarray(dataset_latents, dtype=np.float64)
    if len(data) == 0 or not sampled:
        raise ShapeError("need dataset latents and at least one sample set")
    r = support_radius(data)
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(data)
    rows = []
    for name, s in sampled.items():
        s = np.asarray(s, dtype=np.float64)
        if len(s) == 0:
            raise ShapeError(f"sample set {name!r} is empty")
        labels = km.predict(s)
        mass = np.bincount(labels, minlength=k) / len(s)
        rows.append(CoverageRow(name, in_support_fraction(data, s, r), mass.tolist()))
    return rows
