"""Cluster-center lifecycle: k-means initialization, cosine assignment, smoothed center update."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .core import ClusterState
from .embedder import EmbedderModel, embed
from .errors import TooFewSamples, ZeroNormVector

log = logging.getLogger(__name__)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroNormVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-normalize; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 100
    tol: float = 1e-4  # relative inertia improvement

    def __post_init__(self):
        if self.k <= 0 or self.max_iters <= 0 or self.tol <= 0:
            raise ValueError("k, max_iters and tol must be positive")


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia_history: List[float]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i:i + 1])[:, 0])
    return centers


def lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int, tol: float) -> KMeansResult:
    """Lloyd iterations from given centers.

    ``inertia_history[t]`` is the inertia of the assignment made in round t
    against the centers of round t; empty clusters are re-seeded at the point
    farthest from its current center.
    """
    centers = centers.copy()
    k = centers.shape[0]
    history = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(x, centers)
        labels = np.argmin(d, axis=1)
        point_cost = ((x - centers[labels]) ** 2).sum(axis=1)
        inertia = float(point_cost.sum())
        history.append(inertia)
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], 1e-300):
            break
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        taken = set()
        for j in np.flatnonzero(~nonempty):
            for cand in np.argsort(-point_cost, kind="stable"):
                if cand not in taken:
                    break
            taken.add(cand)
            new[j] = x[cand]
            point_cost[cand] = 0.0
            labels[cand] = j
        centers = new
        if inertia == 0.0:
            break
    # final labels against final centers
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    return KMeansResult(centers, labels, history)


def kmeans(features, cfg: KMeansConfig, seed=0) -> KMeansResult:
    """k-means++ seeded Lloyd's algorithm on L2-normalized rows."""
    x = l2_normalize(features)
    if x.shape[0] < cfg.k:
        raise TooFewSamples(f"need at least k={cfg.k} samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    return lloyd(x, kmeans_plusplus(x, cfg.k, rng), cfg.max_iters, cfg.tol)


def kmeans_init(features, cfg: KMeansConfig, seed=0) -> np.ndarray:
    """Initial cluster centers (in normalized space)."""
    centers = kmeans(features, cfg, seed).centers
    # a center can only be zero if all its points were zero rows; nudge it to a unit vector
    zero = np.linalg.norm(centers, axis=1) == 0
    if zero.any():
        centers[zero, 0] = 1.0
    return centers


def assign_embeddings(emb: np.ndarray, centers: np.ndarray) -> ClusterState:
    """Label each embedding with its most cosine-similar center (ties -> lowest k)."""
    emb = np.asarray(emb, dtype=np.float64)
    sims = l2_normalize(emb) @ l2_normalize(centers).T
    labels = np.argmax(sims, axis=1)
    best = np.clip(sims[np.arange(emb.shape[0]), labels], -1.0, 1.0)
    flagged = np.linalg.norm(emb, axis=1) == 0
    if flagged.any():
        log.warning("%d samples have zero-norm embeddings; quarantined", int(flagged.sum()))
        labels[flagged] = 0
        best[flagged] = -1.0
    return ClusterState(centers=centers, labels=labels, similarities=best, flagged=flagged)


def assign_clusters(model: EmbedderModel, target, centers) -> ClusterState:
    return assign_embeddings(embed(model, target.features), centers)


def update_centers(state: ClusterState, embeddings, lambda_c: float, beta: float = 1e-8) -> np.ndarray:
    """Move each center toward its members' mean.

    ``delta_k = sum_{i: l_i=k} (c_k - f_i) / (beta + n_k)`` and
    ``c_k <- c_k - lambda_c * delta_k``; the sum is over every sample,
    accumulated in ascending index order. Empty clusters keep their center.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(state.centers, dtype=np.float64)
    labels = state.labels
    diff_sum = np.zeros_like(centers)
    np.add.at(diff_sum, labels, centers[labels] - emb)
    counts = np.bincount(labels, minlength=centers.shape[0]).astype(np.float64)
    delta = diff_sum / (beta + counts)[:, None]
    return centers - lambda_c * delta


def cluster_purity(labels, identities) -> Tuple[float, float]:
    """(purity, inverse purity) of a labeling against ground truth; diagnostic only."""
    labels = np.asarray(labels)
    identities = np.asarray(identities)
    n = labels.shape[0]
    if n == 0:
        return 1.0, 1.0
    _, li = np.unique(labels, return_inverse=True)
    _, ii = np.unique(identities, return_inverse=True)
    table = np.zeros((li.max() + 1, ii.max() + 1), dtype=np.int64)
    np.add.at(table, (li, ii), 1)
    return table.max(axis=1).sum() / n, table.max(axis=0).sum() / n
