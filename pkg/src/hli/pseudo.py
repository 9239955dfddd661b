"""K-means pseudo labels for the unlabelled target domain."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import SampleRecord, relabel


@dataclass
class PseudoLabeling:
    assignments: np.ndarray  # (N,) ints in [0, M_t)
    centroids: np.ndarray  # (M_t, D)
    inertia: float
    epoch: int = 0
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a centre
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def cluster_targets(
    embeddings: np.ndarray,
    n_clusters: int,
    seed: int,
    max_iter: int = 100,
    normalize: bool = True,
    epoch: int = 0,
) -> PseudoLabeling:
    """Lloyd's algorithm with k-means++ seeding on L2-normalised embeddings.

    Stops at an assignment fixpoint or after ``max_iter`` rounds.  A cluster
    that empties is re-seeded with the point farthest from its own centroid.
    ``inertia_history`` holds the objective right after every assignment step.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be N x D")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    n = x.shape[0]
    if n_clusters < 1 or n < n_clusters:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} samples")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, n_clusters, rng)
    assign = np.full(n, -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new = d.argmin(1)
        cost = d[np.arange(n), new]
        for k in range(n_clusters):
            if np.any(new == k):
                continue
            # steal the worst-served point from a cluster that can spare it
            sizes = np.bincount(new, minlength=n_clusters)
            donors = np.flatnonzero(sizes[new] > 1)
            far = donors[np.argmax(cost[donors])]
            new[far] = k
            centroids[k] = x[far]
            cost[far] = 0.0
        history.append(float(cost.sum()))
        converged = np.array_equal(new, assign)
        assign = new
        for k in range(n_clusters):
            centroids[k] = x[assign == k].mean(0)
        if converged:
            break
    inertia = float(((x - centroids[assign]) ** 2).sum())
    return PseudoLabeling(assign.astype(np.int64), centroids, inertia, epoch, it, history)


def relabel_dataset(targets: Sequence[SampleRecord], labeling: PseudoLabeling) -> list[SampleRecord]:
    """Copy of ``targets`` with ``pseudo_label`` set from the labeling.  The
    classifier head is resized by the training loop, not here."""
    return relabel(targets, labeling.assignments)


def dump_assignments(labeling: PseudoLabeling, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "pseudo_label"])
        for i, a in enumerate(labeling.assignments):
            w.writerow([i, int(a)])
    return path
