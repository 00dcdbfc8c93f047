"""Single-query retrieval evaluation (CMC rank-k and mAP).

Gallery entries sharing both identity and camera with the query are junk:
they are removed from the ranking before scoring.
"""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .clustering import l2_normalize
from .core import Dataset, Sample
from .embedder import EmbedderModel, embed
from .errors import EmptyGallery, UndefinedAP


def average_precision(ranked_relevance: Sequence[bool], n_positives: int) -> float:
    rel = np.asarray(ranked_relevance, dtype=bool)
    if n_positives <= 0:
        raise UndefinedAP("average precision needs at least one positive")
    if int(rel.sum()) != n_positives:
        raise ValueError(f"relevance has {int(rel.sum())} hits but n_positives={n_positives}")
    ranks = np.flatnonzero(rel) + 1
    hits = np.arange(1, ranks.shape[0] + 1)
    return float(np.sum(hits / ranks) / n_positives)


def _distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _prepare(emb: np.ndarray, metric: str) -> np.ndarray:
    return l2_normalize(emb) if metric == "normalized" else np.asarray(emb, dtype=np.float64)


def rank_from_embeddings(q_emb, q_id, q_cam, g_emb, g_ids, g_cams, metric="normalized") -> np.ndarray:
    """Gallery indices sorted by distance to one query, junk removed, ties by index."""
    q = _prepare(np.asarray(q_emb)[None, :], metric)
    g = _prepare(g_emb, metric)
    dist = _distances(q, g)[0]
    g_ids = np.asarray(g_ids)
    g_cams = np.asarray(g_cams)
    keep = ~((g_ids == q_id) & (g_cams == q_cam))
    if q_id < 0:
        keep[:] = True
    valid = np.flatnonzero(keep)
    if valid.size == 0:
        raise EmptyGallery("gallery is empty after junk removal")
    return valid[np.argsort(dist[valid], kind="stable")]


def rank_gallery(model: EmbedderModel, query: Sample, gallery: Dataset, metric="normalized") -> np.ndarray:
    if len(gallery) == 0:
        raise EmptyGallery("gallery is empty")
    q_id = -1 if query.true_identity is None else query.true_identity
    return rank_from_embeddings(
        embed(model, np.asarray(query.raw_feature)[None, :])[0], q_id, query.camera_id,
        embed(model, gallery.features), gallery.identities, gallery.camera_ids, metric,
    )


def evaluate_embeddings(q_emb, q_ids, q_cams, g_emb, g_ids, g_cams, metric="normalized", ranks=(1, 5)) -> Dict[str, float]:
    """CMC and mAP from precomputed embeddings.

    Returns ``{"rank1", "rank5", "map", "n_queries"}`` (one ``rank<k>`` per
    entry of ``ranks``).
    """
    q = _prepare(q_emb, metric)
    g = _prepare(g_emb, metric)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if g.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    dist = _distances(q, g)
    hits_at = {k: 0 for k in ranks}
    aps = []
    for i in range(q.shape[0]):
        keep = ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
        valid = np.flatnonzero(keep)
        if valid.size == 0:
            raise EmptyGallery(f"query {i}: gallery is empty after junk removal")
        order = valid[np.argsort(dist[i, valid], kind="stable")]
        rel = g_ids[order] == q_ids[i]
        n_pos = int(rel.sum())
        aps.append(average_precision(rel, n_pos))
        first = int(np.argmax(rel))
        for k in ranks:
            hits_at[k] += first < k
    n = q.shape[0]
    out = {f"rank{k}": hits_at[k] / n for k in ranks}
    out["map"] = float(np.mean(aps))
    out["n_queries"] = n
    return out


def evaluate(model: EmbedderModel, query_set: Dataset, gallery: Dataset, metric="normalized") -> Dict[str, float]:
    """Embed query and gallery with ``model`` and score retrieval."""
    if not (query_set.has_identities and gallery.has_identities):
        raise ValueError("evaluation needs ground-truth identities on query and gallery")
    return evaluate_embeddings(
        embed(model, query_set.features), query_set.identities, query_set.camera_ids,
        embed(model, gallery.features), gallery.identities, gallery.camera_ids, metric,
    )
