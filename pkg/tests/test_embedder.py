import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcul.core import PipelineConfig
from tcul.embedder import (EmbedderModel, OptimizerState, embed, forward, pretrain_source, sgd_step,
                           triplet_loss_and_grad, triplet_terms)
from tcul.errors import DimensionMismatch, NoValidTriplets
from tcul.evaluator import evaluate
from tcul.synthgen import SynthConfig, generate, generate_pair, source_default, target_default

from oracles import finite_difference_grads, naive_forward, random_triplet_instance, relative_error


def test_zero_model_gives_zero():
    model = EmbedderModel.zeros(5, 4, 3)
    assert np.array_equal(forward(model, np.arange(5.0) - 2), np.zeros(3))


def test_identity_model_clamps_negatives():
    model = EmbedderModel(np.eye(4), np.zeros(4), np.eye(4), np.zeros(4))
    assert forward(model, np.array([1.0, -2.0, 3.0, -0.5])).tolist() == [1.0, 0.0, 3.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    d_raw, d_hidden, d_emb = rng.integers(1, 7, size=3)
    model = EmbedderModel.init(int(d_raw), int(d_hidden), int(d_emb), seed=seed)
    model.b1 = rng.normal(size=model.b1.shape)
    model.b2 = rng.normal(size=model.b2.shape)
    x = rng.normal(size=int(d_raw))
    np.testing.assert_allclose(forward(model, x), naive_forward(model, x), rtol=0, atol=1e-10)


def test_forward_batch_equals_rowwise():
    rng = np.random.default_rng(3)
    model = EmbedderModel.init(6, 8, 4, seed=3)
    x = rng.normal(size=(5, 6))
    rows = np.stack([forward(model, r) for r in x])
    np.testing.assert_allclose(embed(model, x), rows, atol=1e-12)


def test_forward_deterministic():
    model = EmbedderModel.init(6, 8, 4, seed=3)
    x = np.linspace(-1, 1, 6)
    assert np.array_equal(forward(model, x), forward(model, x))


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(EmbedderModel.init(6, 8, 4), np.zeros(5))


def _fixed_distance_embeddings(d_pos, d_neg):
    # anchor at origin, one positive and one negative on separate axes
    return np.array([[0.0, 0.0], [d_pos, 0.0], [0.0, d_neg]]), np.array([0, 0, 1])


def test_hinge_inactive():
    emb, labels = _fixed_distance_embeddings(1.0, 2.0)
    terms, *_ = triplet_terms(emb, labels, 0.5)
    assert terms[0] == 0.0


def test_hinge_active():
    emb, labels = _fixed_distance_embeddings(2.0, 1.0)
    terms, *_ = triplet_terms(emb, labels, 0.5)
    assert terms[0] == pytest.approx(1.5, abs=1e-12)


def test_single_label_batch_has_no_triplets():
    model = EmbedderModel.init(3, 4, 2)
    with pytest.raises(NoValidTriplets):
        triplet_loss_and_grad(model, np.ones((4, 3)), [1, 1, 1, 1], 0.5)


def test_all_singleton_labels_have_no_triplets():
    model = EmbedderModel.init(3, 4, 2)
    with pytest.raises(NoValidTriplets):
        triplet_loss_and_grad(model, np.eye(3), [0, 1, 2], 0.5)


def test_loss_zero_when_separated():
    # labels split along the first axis far beyond the margin
    x = np.array([[10.0, 0.0], [10.0, 0.1], [-10.0, 0.0], [-10.0, 0.1]])
    model = EmbedderModel(np.eye(2), np.array([20.0, 20.0]), np.eye(2), np.zeros(2))
    loss, grads = triplet_loss_and_grad(model, x, [0, 0, 1, 1], 0.5)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    model = EmbedderModel.init(5, 6, 3, seed=seed)
    x = rng.normal(size=(8, 5))
    labels = rng.integers(0, 3, size=8)
    if len(set(labels.tolist())) < 2:
        labels[0] = (labels[1] + 1) % 3
    try:
        loss, _ = triplet_loss_and_grad(model, x, labels, float(rng.uniform(0, 2)))
    except NoValidTriplets:
        return
    assert loss >= 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(seed):
    model, x, labels, margin = random_triplet_instance(np.random.default_rng(seed))
    _, grads = triplet_loss_and_grad(model, x, labels, margin)
    numeric = finite_difference_grads(model, x, labels, margin, h=1e-5)
    for name in grads:
        assert relative_error(grads[name], numeric[name]).max() <= 1e-4, name


def test_sgd_vanilla():
    model = EmbedderModel.init(3, 4, 2, seed=0)
    before = model.copy()
    opt = OptimizerState.for_model(model, learning_rate=0.1, momentum=0.0)
    g = {n: np.full_like(p, 2.0) for n, p in model.params().items()}
    sgd_step(model, opt, g)
    for n, p in model.params().items():
        np.testing.assert_allclose(p, before.params()[n] - 0.2, atol=1e-15)


def test_sgd_zero_grad_keeps_weights():
    model = EmbedderModel.init(3, 4, 2, seed=0)
    before = model.copy()
    opt = OptimizerState.for_model(model, 0.1, 0.9)
    zero = {n: np.zeros_like(p) for n, p in model.params().items()}
    for _ in range(5):
        sgd_step(model, opt, zero)
    assert model == before


def test_sgd_momentum_second_step():
    model = EmbedderModel.init(3, 4, 2, seed=0)
    opt = OptimizerState.for_model(model, 0.01, 0.9)
    g = {n: np.full_like(p, 0.5) for n, p in model.params().items()}
    sgd_step(model, opt, g)
    mid = model.copy()
    sgd_step(model, opt, g)
    for n in model.params():
        np.testing.assert_allclose(mid.params()[n] - model.params()[n], 0.01 * 1.9 * 0.5, rtol=1e-12)


def test_sgd_shape_mismatch():
    model = EmbedderModel.init(3, 4, 2)
    opt = OptimizerState.for_model(model, 0.1, 0.9)
    g = {n: np.zeros_like(p) for n, p in model.params().items()}
    g["W1"] = np.zeros((2, 2))
    with pytest.raises(DimensionMismatch):
        sgd_step(model, opt, g)


def test_model_rejects_inconsistent_shapes():
    with pytest.raises(DimensionMismatch):
        EmbedderModel(np.zeros((4, 3)), np.zeros(5), np.zeros((2, 4)), np.zeros(2))


def test_pretraining_helps_on_noiseless_source():
    cfg = SynthConfig(n_identities=40, n_cameras=3, d_latent=8, d_raw=16, noise_sigma=0.0, seed=2)
    train, query, gallery = generate(cfg)
    pcfg = PipelineConfig(d_hidden=32, d_emb=16, pretrain_epochs=10, pretrain_learning_rate=1e-3)
    model = EmbedderModel.init(16, 32, 16, seed=0)
    before = evaluate(model, query, gallery)["rank1"]
    trained = pretrain_source(model.copy(), train, pcfg, seed=1)
    assert evaluate(trained, query, gallery)["rank1"] >= before


def test_pretrained_beats_random_on_target():
    source, (_, query, gallery) = generate_pair(source_default(0), target_default(0))
    cfg = PipelineConfig(pretrain_epochs=30, pretrain_learning_rate=1e-3)
    random_model = EmbedderModel.init(source.d_raw, cfg.d_hidden, cfg.d_emb, seed=0)
    trained = pretrain_source(random_model.copy(), source, cfg, seed=1)
    assert evaluate(trained, query, gallery)["map"] > evaluate(random_model, query, gallery)["map"]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_output_bias_gradient_vanishes(seed):
    # distances ignore a common shift of every embedding
    model, x, labels, margin = random_triplet_instance(np.random.default_rng(seed))
    _, grads = triplet_loss_and_grad(model, x, labels, margin)
    assert np.abs(grads["b2"]).max() <= 1e-12
