"""Reliable-sample selection: temporal continuity, similarity threshold, or none."""
from __future__ import annotations

import numpy as np

from .core import ClusterState, Dataset, ReliableSet
from .errors import InsufficientLabels


def _eligible(state: ClusterState) -> np.ndarray:
    return np.flatnonzero(~state.flagged)


def select_temporal(state: ClusterState, target: Dataset, lambda_fr) -> ReliableSet:
    """Keep samples whose frame id lies within ``lambda_fr`` of their group's anchor.

    A group is all samples of one camera assigned to one cluster; its anchor
    is the member most similar to the cluster center (ties -> lowest index).
    """
    idx = _eligible(state)
    if idx.size == 0:
        return ReliableSet(np.zeros(0, dtype=np.int64))
    cams = target.camera_ids[idx]
    labs = state.labels[idx]
    sims = state.similarities[idx]
    # group by (camera, label); inside a group the anchor sorts first
    order = np.lexsort((idx, -sims, labs, cams))
    idx, cams, labs = idx[order], cams[order], labs[order]
    new_group = np.ones(idx.shape[0], dtype=bool)
    new_group[1:] = (cams[1:] != cams[:-1]) | (labs[1:] != labs[:-1])
    group_id = np.cumsum(new_group) - 1
    anchors = idx[new_group]
    anchor_of = anchors[group_id]
    frames = target.frame_ids
    keep = np.abs(frames[anchor_of] - frames[idx]) <= lambda_fr
    anchor_map = {
        (int(k), int(j)): int(a)
        for k, j, a in zip(labs[new_group], cams[new_group], anchors)
    }
    return ReliableSet(idx[keep], anchor_map)


def select_similarity(state: ClusterState, target: Dataset, threshold: float) -> ReliableSet:
    """Keep samples whose cosine similarity to their center is at least ``threshold``."""
    idx = _eligible(state)
    return ReliableSet(idx[state.similarities[idx] >= threshold])


def select_all(state: ClusterState, target: Dataset) -> ReliableSet:
    return ReliableSet(_eligible(state))


def select(strategy, state: ClusterState, target: Dataset, lambda_fr) -> ReliableSet:
    name, threshold = strategy
    if name == "temporal":
        return select_temporal(state, target, lambda_fr)
    if name == "similarity":
        return select_similarity(state, target, threshold)
    return select_all(state, target)


def prune_for_training(rs: ReliableSet, state: ClusterState) -> ReliableSet:
    """Drop members whose pseudo-label has fewer than two selected samples.

    Raises:
        InsufficientLabels: if fewer than two labels survive.
    """
    members = rs.member_indices
    labs = state.labels[members]
    counts = np.bincount(labs, minlength=state.k) if labs.size else np.zeros(state.k, dtype=np.int64)
    keep = counts[labs] >= 2
    n_labels = int(np.count_nonzero(counts >= 2))
    if n_labels < 2:
        raise InsufficientLabels(f"only {n_labels} pseudo-label(s) have two or more reliable samples")
    anchors = {key: a for key, a in rs.per_cluster_camera_anchors.items() if counts[key[0]] >= 2}
    return ReliableSet(members[keep], anchors)
