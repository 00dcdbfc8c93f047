"""Two-layer ReLU embedder with hand-derived batch-hard triplet gradients.

The model maps a raw feature ``x`` to ``W2 @ relu(W1 @ x + b1) + b2``.
Everything is float64; embeddings are *not* normalized here.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import DimensionMismatch, NoValidTriplets

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class EmbedderModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        h, d = self.W1.shape
        e = self.W2.shape[0]
        if self.b1.shape != (h,) or self.W2.shape != (e, h) or self.b2.shape != (e,):
            raise DimensionMismatch(
                f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape} b2{self.b2.shape}"
            )
        if not all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES):
            raise ValueError("embedder weights must be finite")

    @classmethod
    def init(cls, d_raw: int, d_hidden: int, d_emb: int, seed=0) -> "EmbedderModel":
        """He-initialized weights, zero biases."""
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.normal(0.0, np.sqrt(2.0 / d_raw), size=(d_hidden, d_raw)),
            b1=np.zeros(d_hidden),
            W2=rng.normal(0.0, np.sqrt(1.0 / d_hidden), size=(d_emb, d_hidden)),
            b2=np.zeros(d_emb),
        )

    @classmethod
    def zeros(cls, d_raw: int, d_hidden: int, d_emb: int) -> "EmbedderModel":
        return cls(np.zeros((d_hidden, d_raw)), np.zeros(d_hidden), np.zeros((d_emb, d_hidden)), np.zeros(d_emb))

    @property
    def d_raw(self) -> int:
        return self.W1.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def d_emb(self) -> int:
        return self.W2.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "EmbedderModel":
        return EmbedderModel(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def __eq__(self, other):
        if not isinstance(other, EmbedderModel):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray]
    learning_rate: float
    momentum: float

    @classmethod
    def for_model(cls, model: EmbedderModel, learning_rate: float, momentum: float) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in model.params().items()}, learning_rate, momentum)


def _check_input(model: EmbedderModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d_raw:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != model d_raw {model.d_raw}")
    return x


def forward(model: EmbedderModel, x) -> np.ndarray:
    """Embed one raw vector (shape ``(d_raw,)``) or a batch (``(n, d_raw)``)."""
    x = _check_input(model, x)
    hidden = np.maximum(x @ model.W1.T + model.b1, 0.0)
    return hidden @ model.W2.T + model.b2


def embed(model: EmbedderModel, features, chunk=4096) -> np.ndarray:
    """Batched :func:`forward` over a feature matrix, chunked to bound memory."""
    features = np.asarray(features)
    if features.shape[0] == 0:
        return np.zeros((0, model.d_emb))
    return np.concatenate([forward(model, features[i:i + chunk]) for i in range(0, features.shape[0], chunk)])


def pairwise_distances(emb: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix computed from explicit differences.

    The Gram-matrix shortcut loses precision for near-identical points, which
    shows up as noise in finite-difference checks.
    """
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def batch_hard_mining(dist: np.ndarray, labels: np.ndarray):
    """Hardest positive and negative per anchor.

    Returns ``(pos_idx, neg_idx, valid)``; ``valid`` is False for anchors that
    lack a positive (other than themselves) or a negative. Ties go to the
    lowest index.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    pos_idx = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    return pos_idx, neg_idx, valid


def triplet_terms(emb: np.ndarray, labels, margin: float):
    """Per-anchor hinge values on fixed embeddings.

    Returns ``(terms, pos_idx, neg_idx, valid, dist)``; ``terms`` holds
    ``max(0, D(a,p*) - D(a,n*) + margin)`` for valid anchors and 0 elsewhere.
    """
    dist = pairwise_distances(emb)
    pos_idx, neg_idx, valid = batch_hard_mining(dist, labels)
    rows = np.arange(emb.shape[0])
    raw = dist[rows, pos_idx] - dist[rows, neg_idx] + margin
    terms = np.where(valid, np.maximum(raw, 0.0), 0.0)
    return terms, pos_idx, neg_idx, valid, dist


def triplet_loss_and_grad(model: EmbedderModel, features, labels, margin: float) -> Tuple[float, Dict[str, np.ndarray]]:
    """Batch-hard triplet loss (mean over valid anchors) and its weight gradients.

    Args:
        model: the embedder.
        features: ``(B, d_raw)`` raw inputs.
        labels: ``(B,)`` integer (pseudo-)labels.
        margin: hinge margin ``m``.

    Raises:
        NoValidTriplets: if no anchor has both a positive and a negative.
    """
    x = _check_input(model, features)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionMismatch("features must be (B, d_raw) with one label per row")

    pre = x @ model.W1.T + model.b1
    hidden = np.maximum(pre, 0.0)
    emb = hidden @ model.W2.T + model.b2

    terms, pos_idx, neg_idx, valid, dist = triplet_terms(emb, labels, margin)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidTriplets("batch has no anchor with both a positive and a negative")
    loss = float(terms.sum() / n_valid)

    # d loss / d emb; the hinge and D=0 get subgradient 0
    g_emb = np.zeros_like(emb)
    active = np.flatnonzero(terms > 0)
    for other, sign in ((pos_idx, 1.0), (neg_idx, -1.0)):
        o = other[active]
        d = dist[active, o]
        ok = d > 0
        a, o, d = active[ok], o[ok], d[ok]
        unit = (emb[a] - emb[o]) / d[:, None] * (sign / n_valid)
        np.add.at(g_emb, a, unit)
        np.add.at(g_emb, o, -unit)

    g_hidden = g_emb @ model.W2
    g_pre = g_hidden * (pre > 0)
    grads = {
        "W1": g_pre.T @ x,
        "b1": g_pre.sum(axis=0),
        "W2": g_emb.T @ hidden,
        "b2": g_emb.sum(axis=0),
    }
    return loss, grads


def sgd_step(model: EmbedderModel, opt: OptimizerState, grads: Dict[str, np.ndarray]):
    """Classical momentum: ``v = mu*v + g``; ``w -= lr*v``. Updates in place and returns both."""
    for name in PARAM_NAMES:
        w = getattr(model, name)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape or opt.velocity[name].shape != w.shape:
            raise DimensionMismatch(f"shape mismatch for {name}: weight {w.shape}, grad {g.shape}")
        v = opt.momentum * opt.velocity[name] + g
        opt.velocity[name] = v
        w -= opt.learning_rate * v
    return model, opt


def pretrain_source(model: EmbedderModel, source, cfg, seed=None) -> EmbedderModel:
    """Train on a labeled source dataset with its true identities as labels.

    Uses the same PK-batch triplet loop as target fine-tuning
    (``cfg.pretrain_epochs`` epochs at ``cfg.pretrain_learning_rate``).
    """
    from .trainer import fit_labeled

    if not source.has_identities:
        raise ValueError("source dataset must carry true identities for pretraining")
    if cfg.pretrain_epochs == 0:
        return model
    opt = OptimizerState.for_model(model, cfg.pretrain_learning_rate, cfg.momentum)
    seed = cfg.seed if seed is None else seed
    model, _, _ = fit_labeled(model, opt, source.features, source.identities, cfg, cfg.pretrain_epochs, seed)
    return model
