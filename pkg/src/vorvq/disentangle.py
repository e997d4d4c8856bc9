"""Spectral clustering of pooled enhanced/noisy embeddings and its scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import ArpackError, eigsh

from .quantizer import QuantizationTrace, kmeans_pp_init

ENHANCED, NOISY = 0, 1

# dense eigh below this size, ARPACK above
_DENSE_LIMIT = 600


@dataclass
class LabeledEmbeddings:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or len(self.points) != len(self.labels):
            raise ValueError("points must be M x D with one label per row")


def extract_embeddings(trace: QuantizationTrace) -> LabeledEmbeddings:
    """One point per frame for the enhanced-stage sum and for the noise-stage sum."""
    if trace.n_enhanced in (0, trace.n_stages):
        raise ValueError("need both enhanced and noise stages to extract embeddings")
    enhanced = trace.enhanced_sum()
    noisy = trace.noise_sum()
    labels = np.r_[np.full(len(enhanced), ENHANCED), np.full(len(noisy), NOISY)]
    return LabeledEmbeddings(np.vstack([enhanced, noisy]), labels)


def _sq_distances(points: np.ndarray) -> np.ndarray:
    sq = np.sum(points**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def build_affinity(points) -> np.ndarray:
    """Gaussian kernel with sigma = median pairwise distance; zero diagonal."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if m < 2:
        raise ValueError("need at least two points")
    d2 = _sq_distances(points)
    sigma = float(np.median(np.sqrt(d2[np.triu_indices(m, 1)])))
    if sigma == 0.0:
        raise ValueError("median pairwise distance is zero (points are degenerate)")
    w = np.exp(-d2 / (2.0 * sigma**2))
    np.fill_diagonal(w, 0.0)
    return w


def spectral_embedding(w: np.ndarray, n_clusters: int = 2) -> np.ndarray:
    """Row-normalized bottom eigenvectors of ``I - D^-1/2 W D^-1/2``."""
    deg = w.sum(axis=1)
    if np.any(deg <= 0.0):
        raise ValueError("graph has an isolated vertex")
    inv_sqrt = 1.0 / np.sqrt(deg)
    a = inv_sqrt[:, None] * w * inv_sqrt[None, :]
    m = len(a)
    # smallest Laplacian eigenvalues == largest eigenvalues of the normalized affinity
    if m <= _DENSE_LIMIT:
        _, vecs = eigh(a, subset_by_index=[m - n_clusters, m - 1])
    else:
        v0 = np.random.default_rng(0).standard_normal(m)
        try:
            _, vecs = eigsh(a, k=n_clusters, which="LA", v0=v0, tol=1e-12)
        except ArpackError as exc:
            raise ValueError(f"eigensolver failed: {exc}") from exc
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate spectral embedding (zero row)")
    return vecs / norms


def kmeans(x: np.ndarray, k: int, seed=0, n_restarts: int = 50, max_iter: int = 100) -> np.ndarray:
    """Lloyd iterations from k-means++ starts; keeps the lowest-inertia labels."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_restarts):
        centers = kmeans_pp_init(x, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = x[labels == j]
                if len(members):
                    centers[j] = members.mean(axis=0)
        inertia = float(np.sum((x - centers[labels]) ** 2))
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best


def spectral_clustering(points, n_clusters: int = 2, seed=0, n_restarts: int = 50) -> np.ndarray:
    """Ng-Jordan-Weiss spectral clustering on the median-bandwidth Gaussian graph."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < n_clusters:
        raise ValueError("fewer points than clusters")
    u = spectral_embedding(build_affinity(points), n_clusters)
    return kmeans(u, n_clusters, seed=seed, n_restarts=n_restarts)


def normalized_cut(w: np.ndarray, labels) -> float:
    """``cut(A,B)/vol(A) + cut(A,B)/vol(B)`` for a two-way labelling."""
    mask = np.asarray(labels) == np.asarray(labels)[0]
    if mask.all():
        return np.inf
    cut = w[mask][:, ~mask].sum()
    return float(cut / w[mask].sum() + cut / w[~mask].sum())


def clustering_metrics(pred, truth) -> dict[str, float]:
    """Accuracy, macro recall and macro F1 under the better of the two label mappings."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    classes = np.unique(truth)
    if len(classes) != 2:
        raise ValueError("truth must contain exactly two classes")
    if not set(np.unique(pred)) <= set(classes):
        raise ValueError("pred labels must use the truth's two classes")
    a, b = classes
    swapped = np.where(pred == a, b, a)
    candidates = [pred, swapped]
    mapped = max(candidates, key=lambda p: np.mean(p == truth))

    recalls, f1s = [], []
    for c in classes:
        tp = np.sum((mapped == c) & (truth == c))
        fn = np.sum((mapped != c) & (truth == c))
        fp = np.sum((mapped == c) & (truth != c))
        recall = tp / (tp + fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        recalls.append(recall)
        f1s.append(f1)
    return {
        "accuracy": float(np.mean(mapped == truth)),
        "macro_recall": float(np.mean(recalls)),
        "macro_f1": float(np.mean(f1s)),
    }
