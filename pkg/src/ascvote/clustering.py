"""Super-category construction: confusion statistics and spectral clustering.

Misclassification counts approximate class similarity; the symmetrized counts
form an affinity graph (optionally sparsified to each node's strongest links),
whose normalized-Laplacian embedding is clustered with k-means to yield the
super categories.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .dataset import ClassCatalog, SuperCategoryPartition, make_partition
from .validation import as_float_array, check_labels, check_seed, check_square, check_symmetric

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with truth on rows, prediction on columns (possibly fold-averaged)."""

    counts: np.ndarray
    fold_count: int = 1

    def __post_init__(self):
        counts = check_square(self.counts, "counts")
        if counts.size and counts.min() < 0:
            raise ValueError("confusion counts must be non-negative")
        if self.fold_count < 1:
            raise ValueError("fold_count must be at least 1")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric non-negative similarity graph with a zero diagonal."""

    weights: np.ndarray
    knn_k: int | None = None

    def __post_init__(self):
        w = check_symmetric(self.weights, "weights", tol=1e-9)
        if w.size and w.min() < 0:
            raise ValueError("affinity weights must be non-negative")
        if w.size and float(np.max(np.abs(np.diag(w)))) > 0:
            raise ValueError("affinity diagonal must be zero")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


def accumulate_confusion(truths, predictions, n_classes: int | None = None) -> ConfusionMatrix:
    """Count (truth, prediction) pairs into a confusion matrix.

    With ``n_classes`` omitted the size is inferred from the largest index seen.
    """
    t = np.asarray(truths, dtype=np.int64).ravel()
    p = np.asarray(predictions, dtype=np.int64).ravel()
    if t.size != p.size:
        raise ValueError(f"truths ({t.size}) and predictions ({p.size}) differ in length")
    if n_classes is None:
        n_classes = int(max(t.max(initial=-1), p.max(initial=-1))) + 1
        n_classes = max(n_classes, 1)
    t = check_labels(t, n_classes, "truths")
    p = check_labels(p, n_classes, "predictions")
    counts = np.zeros((n_classes, n_classes), dtype=np.float64)
    np.add.at(counts, (t, p), 1.0)
    return ConfusionMatrix(counts=counts)


def average_confusions(matrices) -> ConfusionMatrix:
    """Elementwise mean over confusion matrices of equal size."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("cannot average an empty list of confusion matrices")
    shape = matrices[0].counts.shape
    for m in matrices[1:]:
        if m.counts.shape != shape:
            raise ValueError("confusion matrices differ in size")
    mean = np.mean([m.counts for m in matrices], axis=0)
    return ConfusionMatrix(counts=mean, fold_count=sum(m.fold_count for m in matrices))


def build_affinity(confusion, knn_k: int | None = None) -> AffinityMatrix:
    """Symmetrize misclassification counts into an affinity graph.

    ``W_ij = (M_ij + M_ji) / 2`` off the diagonal. With ``knn_k`` set, an edge
    survives only if it ranks among the k strongest of either endpoint's row
    (union-KNN keeps small graphs better connected than the mutual variant).
    """
    counts = confusion.counts if isinstance(confusion, ConfusionMatrix) else as_float_array(confusion, "confusion", ndim=2)
    counts = check_square(counts, "confusion")
    w = (counts + counts.T) / 2.0
    np.fill_diagonal(w, 0.0)
    n = w.shape[0]
    if knn_k is not None:
        if knn_k < 1:
            raise ValueError("knn_k must be at least 1")
        keep = np.zeros_like(w, dtype=bool)
        for i in range(n):
            neighbours = [j for j in range(n) if j != i]
            neighbours.sort(key=lambda j: (-w[i, j], j))
            for j in neighbours[:knn_k]:
                keep[i, j] = True
        mask = keep | keep.T
        w = np.where(mask, w, 0.0)
        w = (w + w.T) / 2.0
    return AffinityMatrix(weights=w, knn_k=knn_k)


def eigen_topk(matrix, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest-k eigenpairs of a symmetric matrix via cyclic Jacobi sweeps.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns. Each vector's sign is fixed so its largest-
    magnitude component is positive.
    """
    s = check_symmetric(matrix, "matrix", tol=1e-10)
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    a = s.copy()
    v = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))
    converged = False
    for _ in range(JACOBI_MAX_SWEEPS):
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= JACOBI_TOLERANCE * scale:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = t * c
                for mat in (a, a.T):
                    col_p = mat[:, p].copy()
                    col_q = mat[:, q].copy()
                    mat[:, p] = c * col_p - sn * col_q
                    mat[:, q] = sn * col_p + c * col_q
                col_p = v[:, p].copy()
                col_q = v[:, q].copy()
                v[:, p] = c * col_p - sn * col_q
                v[:, q] = sn * col_p + c * col_q
    if not converged:
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off > JACOBI_TOLERANCE * scale:
            raise RuntimeError(f"Jacobi sweeps did not converge (off-diagonal norm {off:.3g})")
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")[:k]
    top_values = values[order]
    top_vectors = v[:, order].copy()
    for j in range(top_vectors.shape[1]):
        pivot = int(np.argmax(np.abs(top_vectors[:, j])))
        if top_vectors[pivot, j] < 0:
            top_vectors[:, j] = -top_vectors[:, j]
    return top_values, top_vectors


def _kmeans_pp_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def kmeans(
    points,
    k: int,
    seed: int,
    *,
    n_restarts: int = 10,
    max_iter: int = 100,
) -> np.ndarray:
    """Seeded k-means: k-means++ starts, Lloyd iterations, best of ``n_restarts``.

    Returns the label array of the restart with the lowest within-cluster sum
    of squares (ties keep the earliest restart). Clusters are never left empty:
    an empty cluster steals the farthest point of the largest cluster.
    """
    pts = as_float_array(points, "points", ndim=2)
    if pts.shape[0] == 0:
        raise ValueError("cannot cluster an empty point set")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    seed = check_seed(seed)

    best_labels: np.ndarray | None = None
    best_wcss = math.inf
    for restart in range(n_restarts):
        rng = np.random.default_rng([seed, restart])
        centers = _kmeans_pp_centers(pts, k, rng)
        labels: np.ndarray | None = None
        for _ in range(max_iter):
            d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            counts = np.bincount(new_labels, minlength=k)
            for empty in np.where(counts == 0)[0]:
                donor = int(counts.argmax())
                donor_points = np.where(new_labels == donor)[0]
                farthest = donor_points[int(d2[donor_points, donor].argmax())]
                new_labels[farthest] = empty
                counts = np.bincount(new_labels, minlength=k)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            centers = np.stack([pts[labels == c].mean(axis=0) for c in range(k)])
        assert labels is not None
        wcss = float(((pts - centers[labels]) ** 2).sum())
        if wcss < best_wcss:
            best_wcss = wcss
            best_labels = labels
    assert best_labels is not None
    return best_labels


def spectral_cluster(affinity, k: int, seed: int) -> SuperCategoryPartition:
    """Normalized spectral clustering of an affinity graph into ``k`` categories.

    Pipeline: degree-normalise the weights, take the eigenvectors of the k
    largest eigenvalues, row-normalise the embedding to unit length (isolated
    nodes keep a zero row), and k-means the rows.
    """
    w = affinity.weights if isinstance(affinity, AffinityMatrix) else as_float_array(affinity, "affinity", ndim=2)
    w = check_symmetric(w, "affinity", tol=1e-9)
    n = w.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    degrees = w.sum(axis=1)
    degrees = np.where(degrees <= 0.0, 1.0, degrees)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    laplacian = inv_sqrt[:, None] * w * inv_sqrt[None, :]
    _, vectors = eigen_topk(laplacian, k)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    embedding = np.where(norms > 0.0, vectors / np.where(norms > 0.0, norms, 1.0), 0.0)
    labels = kmeans(embedding, k, seed)
    member_sets = [set(np.where(labels == c)[0].tolist()) for c in range(k)]
    return make_partition([s for s in member_sets if s])


def write_confusion(confusion: ConfusionMatrix, catalog: ClassCatalog, path) -> None:
    """Confusion matrix file: numeric grid with class names on both axes."""
    if confusion.n_classes != catalog.n_classes:
        raise ValueError("confusion matrix and catalog disagree on the class count")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class"] + list(catalog.names))
        for name, row in zip(catalog.names, confusion.counts):
            writer.writerow([name] + [repr(float(v)) for v in row])


def read_confusion(path) -> tuple[ConfusionMatrix, ClassCatalog]:
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ValueError(f"{path}: confusion file needs a header and data rows")
    names = tuple(c.strip() for c in rows[0][1:])
    catalog = ClassCatalog(names)
    counts = np.zeros((len(names), len(names)), dtype=np.float64)
    if len(rows) - 1 != len(names):
        raise ValueError(f"{path}: expected {len(names)} data rows, got {len(rows) - 1}")
    for i, row in enumerate(rows[1:], start=0):
        if len(row) != len(names) + 1:
            raise ValueError(f"{path}: row {i + 2} has the wrong number of columns")
        if row[0].strip() != names[i]:
            raise ValueError(f"{path}: row {i + 2} is labeled {row[0]!r}, expected {names[i]!r}")
        counts[i] = [float(v) for v in row[1:]]
    return ConfusionMatrix(counts=counts), catalog


class SuperCategoryClustering(BaseEstimator):
    """Sklearn-style front door: fit on a confusion matrix, read off the partition.

    ``fit`` accepts a ConfusionMatrix or a raw CN x CN count array; afterwards
    ``labels_`` holds each class's category id and ``partition_`` the validated
    partition object.
    """

    def __init__(self, n_categories: int = 3, knn_k: int | None = 2, random_state: int = 0):
        self.n_categories = n_categories
        self.knn_k = knn_k
        self.random_state = random_state

    def fit(self, X, y=None):
        confusion = X if isinstance(X, ConfusionMatrix) else ConfusionMatrix(counts=np.asarray(X, dtype=np.float64))
        self.affinity_ = build_affinity(confusion, self.knn_k)
        self.partition_ = spectral_cluster(self.affinity_, self.n_categories, self.random_state)
        labels = np.empty(self.partition_.n_classes, dtype=np.int64)
        for cat in self.partition_.categories:
            for m in cat.members:
                labels[m] = cat.id
        self.labels_ = labels
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X, y).labels_

    def _check_fitted(self):
        if not hasattr(self, "partition_"):
            raise NotFittedError("this SuperCategoryClustering is not fitted yet; call fit first")
