"""PK-batch sampling and the triplet fine-tuning loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

from .core import ClusterState, Dataset, PipelineConfig, ReliableSet, seed_sequence
from .embedder import EmbedderModel, OptimizerState, sgd_step, triplet_loss_and_grad
from .errors import InsufficientLabels, NoValidTriplets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PKBatch:
    indices: np.ndarray  # positions into the dataset being trained on
    labels: np.ndarray

    @property
    def entries(self) -> List[Tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.labels.tolist()))

    def __len__(self):
        return self.indices.shape[0]


def _group_by_label(indices: np.ndarray, labels: np.ndarray):
    order = np.lexsort((indices, labels))
    idx, lab = indices[order], labels[order]
    uniq, starts = np.unique(lab, return_index=True)
    return uniq, np.split(idx, starts[1:])


def pk_batches(indices, labels, P: int, K: int, rng: np.random.Generator) -> Iterator[PKBatch]:
    """One epoch of PK batches over ``(index, label)`` pairs.

    Label order is shuffled; consecutive runs of ``P`` labels form a batch
    (the last batch takes the remainder). A label with at least ``K`` members
    contributes ``K`` distinct members; a smaller label contributes every
    member once and fills the remaining slots by drawing with replacement.
    """
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    uniq, groups = _group_by_label(indices, labels)
    counts = np.array([g.shape[0] for g in groups])
    if uniq.shape[0] < 2 or np.any(counts < 2):
        raise InsufficientLabels(
            f"PK sampling needs >=2 labels with >=2 members each; got {uniq.shape[0]} labels, "
            f"min size {counts.min() if counts.size else 0}"
        )
    return _pk_epoch(uniq, groups, min(P, uniq.shape[0]), K, rng)


def _pk_epoch(uniq, groups, P, K, rng):
    order = rng.permutation(uniq.shape[0])
    for start in range(0, order.shape[0], P):
        b_idx, b_lab = [], []
        for g in order[start:start + P]:
            members = groups[g]
            if members.shape[0] >= K:
                pick = rng.choice(members, size=K, replace=False)
            else:
                extra = rng.choice(members, size=K - members.shape[0], replace=True)
                pick = np.concatenate([members, extra])
            b_idx.append(pick)
            b_lab.append(np.full(K, uniq[g], dtype=np.int64))
        yield PKBatch(np.concatenate(b_idx), np.concatenate(b_lab))


def sample_pk_batches(rs: ReliableSet, state: ClusterState, P: int, Kimg: int, seed) -> Iterator[PKBatch]:
    """One epoch of PK batches over the reliable set, labeled by pseudo-label."""
    members = rs.member_indices
    return pk_batches(members, state.labels[members], P, Kimg, np.random.default_rng(seed))


def _epoch_seeds(seed, n_epochs):
    return [seed_sequence(seed, e) for e in range(n_epochs)]


def fit_labeled(model: EmbedderModel, opt: OptimizerState, features, labels, cfg: PipelineConfig, n_epochs: int, seed):
    """Run ``n_epochs`` of PK-batch triplet training on (features, labels).

    Every row of ``features`` takes part. Returns
    ``(model, epoch_mean_losses, skipped_batches)``; an epoch whose every
    batch was skipped reports NaN.
    """
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    positions = np.arange(labels.shape[0])
    losses, skipped = [], 0
    for ss in _epoch_seeds(seed, n_epochs):
        rng = np.random.default_rng(ss)
        batch_losses = []
        for batch in pk_batches(positions, labels, cfg.identities_per_batch, cfg.images_per_identity, rng):
            try:
                loss, grads = triplet_loss_and_grad(model, features[batch.indices], batch.labels, cfg.margin)
            except NoValidTriplets:
                skipped += 1
                continue
            sgd_step(model, opt, grads)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
    if skipped:
        log.debug("skipped %d batches without valid triplets", skipped)
    return model, losses, skipped


def train_epochs(model: EmbedderModel, opt: OptimizerState, rs: ReliableSet, state: ClusterState,
                 target: Dataset, cfg: PipelineConfig, seed=None, epochs=None):
    """Fine-tune on the reliable subset of ``target`` using pseudo-labels.

    ``epochs`` overrides ``cfg.epochs_per_iter``. Returns
    ``(model, epoch_mean_losses, skipped_batches)``.
    """
    seed = cfg.seed if seed is None else seed
    epochs = cfg.epochs_per_iter if epochs is None else epochs
    if epochs == 0:
        return model, [], 0
    members = rs.member_indices
    return fit_labeled(model, opt, target.features[members], state.labels[members], cfg, epochs, seed)
