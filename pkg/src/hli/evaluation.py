"""CMC and mAP retrieval metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class RetrievalResult:
    ranked: list[np.ndarray]  # per valid query: gallery sample indices, nearest first
    average_precision: np.ndarray  # per valid query
    cmc_curve: np.ndarray  # cmc_curve[k-1] = CMC(k)
    query_indices: np.ndarray
    n_skipped: int

    @property
    def mAP(self) -> float:
        return float(self.average_precision.mean())

    def top(self, k: int) -> float:
        return float(self.cmc_curve[min(k, len(self.cmc_curve)) - 1])


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def distance_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q, g = l2_normalize(query), l2_normalize(gallery)
    d2 = (q * q).sum(1)[:, None] - 2.0 * q @ g.T + (g * g).sum(1)[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def rank_gallery(query_emb: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending distance on L2-normalised embeddings;
    ties go to the lower index."""
    gallery_embs = np.asarray(gallery_embs, dtype=np.float64)
    if gallery_embs.ndim != 2 or gallery_embs.shape[0] == 0:
        raise ValueError("gallery is empty")
    query_emb = np.asarray(query_emb, dtype=np.float64).reshape(1, -1)
    if not (np.all(np.isfinite(query_emb)) and np.all(np.isfinite(gallery_embs))):
        raise ValueError("embeddings contain non-finite values")
    d = distance_matrix(query_emb, gallery_embs)[0]
    return np.argsort(d, kind="stable")


def evaluate(
    embeddings: np.ndarray,
    identities: np.ndarray,
    nuisance_ids: np.ndarray,
    exclude_same_nuisance: bool = True,
) -> RetrievalResult:
    """All-vs-all retrieval.

    Every sample queries all others.  Same-identity items sharing the query's
    nuisance id (camera) are dropped from its gallery.  Queries without any
    remaining positive are skipped and counted.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError("embeddings must be N x D")
    if not np.all(np.isfinite(emb)):
        raise ValueError("embeddings contain non-finite values")
    return evaluate_distances(distance_matrix(emb, emb), identities, nuisance_ids, exclude_same_nuisance)


def evaluate_distances(
    dist: np.ndarray,
    identities: np.ndarray,
    nuisance_ids: np.ndarray,
    exclude_same_nuisance: bool = True,
) -> RetrievalResult:
    ids = np.asarray(identities)
    cams = np.asarray(nuisance_ids)
    n = dist.shape[0]
    if dist.shape != (n, n) or not (len(ids) == len(cams) == n):
        raise ValueError("distances, identities and nuisance ids differ in length")

    ranked, aps, cmcs, queries = [], [], [], []
    skipped = 0
    for q in range(n):
        keep = np.arange(n) != q
        if exclude_same_nuisance:
            keep &= ~((ids == ids[q]) & (cams == cams[q]))
        gallery = np.flatnonzero(keep)
        order = gallery[np.argsort(dist[q, gallery], kind="stable")]
        hits = ids[order] == ids[q]
        if not hits.any():
            skipped += 1
            continue
        cum = np.cumsum(hits)
        precision = cum / np.arange(1, len(hits) + 1)
        aps.append(float(precision[hits].mean()))
        cmcs.append((cum >= 1).astype(np.float64))
        ranked.append(order)
        queries.append(q)
    if not aps:
        raise ValueError("every query was skipped; no query has a valid positive")

    length = max(len(c) for c in cmcs)
    padded = np.ones((len(cmcs), length))
    for i, c in enumerate(cmcs):
        padded[i, : len(c)] = c
    return RetrievalResult(ranked, np.array(aps), padded.mean(0), np.array(queries), skipped)


def expected_random_ap(n_relevant: int, n_gallery: int) -> float:
    """Expected AP of a uniformly random ranking with ``n_relevant`` positives
    among ``n_gallery`` items."""
    r, g = n_relevant, n_gallery
    if r < 1 or g < r:
        raise ValueError("need 1 <= n_relevant <= n_gallery")
    harmonic = sum(1.0 / j for j in range(1, g + 1))
    if g == 1:
        return 1.0
    return (harmonic + (r - 1) / (g - 1) * (g - harmonic)) / g


def write_result_csv(result: RetrievalResult, path: str | Path, ranks=(1, 5, 10)) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["mAP", repr(result.mAP)])
        for k in ranks:
            w.writerow([f"top{k}", repr(result.top(k))])
        w.writerow(["n_queries", len(result.query_indices)])
        w.writerow(["n_skipped", result.n_skipped])
        for k, v in enumerate(result.cmc_curve, start=1):
            w.writerow([f"cmc{k}", repr(float(v))])
    return path


def plot_cmc(curves: dict[str, np.ndarray], path: str | Path, max_rank: int = 20) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        k = min(max_rank, len(curve))
        ax.plot(np.arange(1, k + 1), curve[:k], marker="o", ms=3, label=label)
    ax.set_xlabel("rank k")
    ax.set_ylabel("CMC(k)")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
