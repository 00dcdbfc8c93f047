from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcul.core import ClusterState, Dataset, PipelineConfig, ReliableSet, seed_sequence
from tcul.embedder import EmbedderModel, OptimizerState, sgd_step, triplet_loss_and_grad
from tcul.errors import InsufficientLabels
from tcul.synthgen import SynthConfig, generate
from tcul.trainer import pk_batches, sample_pk_batches, train_epochs


def _labeled(sizes):
    labels = np.concatenate([np.full(s, k) for k, s in enumerate(sizes)])
    state = ClusterState(np.eye(len(sizes) + 1)[: len(sizes)] + 0.1, labels, np.ones(labels.shape[0]))
    return ReliableSet(np.arange(labels.shape[0])), state


def test_exact_fit_one_batch():
    rs, state = _labeled([8] * 16)
    batches = list(sample_pk_batches(rs, state, 16, 8, seed=0))
    assert len(batches) == 1
    assert sorted(batches[0].indices.tolist()) == list(range(128))


def test_small_label_filled_with_replacement():
    rs, state = _labeled([3, 8])
    (batch,) = list(sample_pk_batches(rs, state, 16, 8, seed=1))
    small = batch.indices[batch.labels == 0]
    assert small.shape[0] == 8
    assert set(small.tolist()) == {0, 1, 2}


def test_partition_33_labels():
    rs, state = _labeled([4] * 33)
    batches = list(sample_pk_batches(rs, state, 16, 8, seed=2))
    assert len(batches) == 3
    seen = Counter(l for b in batches for l in set(b.labels.tolist()))
    assert len(seen) == 33 and set(seen.values()) == {1}


def test_p_reduced_when_few_labels():
    rs, state = _labeled([5, 6, 7])
    (batch,) = list(sample_pk_batches(rs, state, 16, 4, seed=0))
    assert len(set(batch.labels.tolist())) == 3 and len(batch) == 12


def test_unpruned_input_rejected():
    rs, state = _labeled([1, 5])
    with pytest.raises(InsufficientLabels):
        sample_pk_batches(rs, state, 16, 8, seed=0)
    rs, state = _labeled([5])
    with pytest.raises(InsufficientLabels):
        sample_pk_batches(rs, state, 16, 8, seed=0)


@settings(max_examples=50, deadline=None)
@given(sizes=st.lists(st.integers(2, 20), min_size=2, max_size=40), P=st.integers(1, 16), K=st.integers(1, 10),
       seed=st.integers(0, 2**32 - 1))
def test_pk_invariants(sizes, P, K, seed):
    labels = np.concatenate([np.full(s, k) for k, s in enumerate(sizes)])
    idx = np.arange(labels.shape[0]) * 2 + 7  # arbitrary index values
    batches = list(pk_batches(idx, labels, P, K, np.random.default_rng(seed)))
    p_eff = min(P, len(sizes))
    visited = []
    for b in batches[:-1]:
        assert len(set(b.labels.tolist())) == p_eff
    for b in batches:
        counts = Counter(b.labels.tolist())
        assert set(counts.values()) == {K}
        for i, l in zip(b.indices.tolist(), b.labels.tolist()):
            assert labels[(i - 7) // 2] == l
        for l in counts:
            members = b.indices[b.labels == l]
            if sizes[l] >= K:
                assert len(set(members.tolist())) == K
            else:
                assert len(set(members.tolist())) == sizes[l]
        visited.extend(counts)
    assert sorted(visited) == list(range(len(sizes)))


def _blob_world(n_ids=6, per=6, d=5, seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_ids, d)) * 3
    x = np.repeat(means, per, axis=0) + rng.normal(scale=spread, size=(n_ids * per, d))
    labels = np.repeat(np.arange(n_ids), per)
    ds = Dataset(x, np.arange(x.shape[0]), np.zeros(x.shape[0]), np.arange(x.shape[0]), np.full(x.shape[0], -1))
    state = ClusterState(np.eye(max(n_ids, d))[:n_ids, :d] + 0.1, labels, np.ones(x.shape[0]))
    return ds, state, ReliableSet(np.arange(x.shape[0]))


def _cfg(**kw):
    base = dict(identities_per_batch=4, images_per_identity=4, epochs_per_iter=5, learning_rate=0.01, margin=0.5)
    base.update(kw)
    return PipelineConfig(**base)


def test_zero_epochs_noop():
    ds, state, rs = _blob_world()
    model = EmbedderModel.init(5, 8, 3, seed=0)
    before = model.copy()
    opt = OptimizerState.for_model(model, 0.01, 0.9)
    model, losses, skipped = train_epochs(model, opt, rs, state, ds, _cfg(), epochs=0)
    assert model == before and losses == [] and skipped == 0


def test_zero_margin_separated_embeddings_no_update():
    ds, state, rs = _blob_world(spread=0.01)
    model = EmbedderModel(np.eye(5), np.full(5, 50.0), np.eye(5), np.zeros(5))
    before = model.copy()
    opt = OptimizerState.for_model(model, 0.01, 0.9)
    model, losses, _ = train_epochs(model, opt, rs, state, ds, _cfg(margin=0.0), epochs=3)
    assert losses == [0.0, 0.0, 0.0]
    assert model == before


def test_loss_decreases_on_solvable_data():
    train, _, _ = generate(SynthConfig(n_identities=40, n_cameras=3, d_latent=8, d_raw=16, appearance_prob=0.8, seed=3))
    _, labels = np.unique(train.identities, return_inverse=True)
    state = ClusterState(np.eye(labels.max() + 1) + 0.1, labels, np.ones(len(labels)))
    model = EmbedderModel.init(16, 32, 8, seed=0)
    cfg = PipelineConfig(epochs_per_iter=5, learning_rate=5e-3)
    opt = OptimizerState.for_model(model, cfg.learning_rate, cfg.momentum)
    _, losses, _ = train_epochs(model, opt, ReliableSet(np.arange(len(train))), state, train.unlabeled(), cfg, seed=0)
    assert len(losses) == 5
    assert losses[-1] <= losses[0]


def test_training_deterministic():
    ds, state, rs = _blob_world(n_ids=10, per=5, seed=2, spread=0.5)
    results = []
    for _ in range(2):
        model = EmbedderModel.init(5, 8, 3, seed=7)
        opt = OptimizerState.for_model(model, 0.01, 0.9)
        results.append(train_epochs(model, opt, rs, state, ds, _cfg(), seed=3))
    assert results[0][0] == results[1][0]
    assert results[0][1] == results[1][1]


def test_reported_loss_is_mean_of_batch_losses():
    ds, state, rs = _blob_world(n_ids=10, per=5, seed=2, spread=0.5)
    cfg = _cfg(epochs_per_iter=2)
    model = EmbedderModel.init(5, 8, 3, seed=7)
    replay = model.copy()
    opt = OptimizerState.for_model(model, cfg.learning_rate, cfg.momentum)
    _, losses, _ = train_epochs(model, opt, rs, state, ds, cfg, seed=5)

    # replay the same batch stream step by step
    ropt = OptimizerState.for_model(replay, cfg.learning_rate, cfg.momentum)
    labels = state.labels
    for e in range(2):
        rng = np.random.default_rng(seed_sequence(5, e))
        per_batch = []
        for b in pk_batches(np.arange(len(ds)), labels, cfg.identities_per_batch, cfg.images_per_identity, rng):
            loss, grads = triplet_loss_and_grad(replay, ds.features[b.indices], b.labels, cfg.margin)
            sgd_step(replay, ropt, grads)
            per_batch.append(loss)
        assert losses[e] == np.mean(per_batch)
    assert replay == model
