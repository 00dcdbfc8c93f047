"""Domain types shared by the rest of the package.

A :class:`Dataset` stores its samples column-wise (one numpy array per field)
so the numeric code can work on whole arrays; :class:`Sample` is the per-row
view. Ground-truth identities live in the same record, but anything that
trains on a dataset should be handed ``ds.unlabeled()``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

WITHHELD = -1
ROLES = ("source_train", "target_train", "query", "gallery")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Sample:
    sample_id: int
    camera_id: int
    frame_id: int
    raw_feature: np.ndarray
    true_identity: Optional[int] = None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.camera_id == other.camera_id
            and self.frame_id == other.frame_id
            and self.true_identity == other.true_identity
            and np.array_equal(self.raw_feature, other.raw_feature)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered collection of samples sharing one feature dimension.

    Features are kept as float32 (the on-disk precision) so that a save/load
    round trip is bit-exact. Identities use ``WITHHELD`` (-1) per row when
    unknown.
    """

    features: np.ndarray
    sample_ids: np.ndarray
    camera_ids: np.ndarray
    frame_ids: np.ndarray
    identities: np.ndarray
    role: str = "target_train"

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32, copy=True)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D array (count x dim)")
        n = feats.shape[0]
        cols = {}
        for name in ("sample_ids", "camera_ids", "frame_ids", "identities"):
            col = np.array(getattr(self, name), dtype=np.int64, copy=True).reshape(-1)
            if col.shape[0] != n:
                raise ValueError(f"{name} has {col.shape[0]} entries, expected {n}")
            cols[name] = _frozen(col)
        object.__setattr__(self, "features", _frozen(feats))
        for name, col in cols.items():
            object.__setattr__(self, name, col)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], role="target_train", d_raw=None) -> "Dataset":
        if not samples:
            return cls.empty(d_raw or 0, role)
        dims = {np.asarray(s.raw_feature).shape for s in samples}
        if len(dims) != 1:
            raise ValueError(f"samples have inconsistent feature shapes: {sorted(dims)}")
        feats = np.stack([np.asarray(s.raw_feature, dtype=np.float32) for s in samples])
        if d_raw is not None and feats.shape[1] != d_raw:
            raise ValueError(f"features have dim {feats.shape[1]}, expected {d_raw}")
        return cls(
            features=feats,
            sample_ids=[s.sample_id for s in samples],
            camera_ids=[s.camera_id for s in samples],
            frame_ids=[s.frame_id for s in samples],
            identities=[WITHHELD if s.true_identity is None else s.true_identity for s in samples],
            role=role,
        )

    @classmethod
    def empty(cls, d_raw: int, role="target_train") -> "Dataset":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d_raw), np.float32), z, z, z, z, role)

    def __len__(self):
        return self.features.shape[0]

    @property
    def d_raw(self) -> int:
        return self.features.shape[1]

    @property
    def has_identities(self) -> bool:
        return bool(np.all(self.identities >= 0))

    def __getitem__(self, i: int) -> Sample:
        ident = int(self.identities[i])
        return Sample(
            sample_id=int(self.sample_ids[i]),
            camera_id=int(self.camera_ids[i]),
            frame_id=int(self.frame_ids[i]),
            raw_feature=self.features[i],
            true_identity=None if ident == WITHHELD else ident,
        )

    @property
    def samples(self) -> List[Sample]:
        return [self[i] for i in range(len(self))]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx, role=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.sample_ids[idx],
            self.camera_ids[idx],
            self.frame_ids[idx],
            self.identities[idx],
            role or self.role,
        )

    def unlabeled(self) -> "Dataset":
        """Copy with every identity withheld; what training code should see."""
        return Dataset(
            self.features,
            self.sample_ids,
            self.camera_ids,
            self.frame_ids,
            np.full(len(self), WITHHELD, dtype=np.int64),
            self.role,
        )

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self.features, self.sample_ids, self.camera_ids, self.frame_ids, self.identities, role)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.role == other.role
            and self.features.shape == other.features.shape
            # compare bit patterns so NaNs and signed zeros round-trip exactly
            and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("sample_ids", "camera_ids", "frame_ids", "identities")
            )
        )

    __hash__ = None


# validate_dataset violation descriptors
@dataclass(frozen=True)
class DuplicateId:
    sample_id: int


@dataclass(frozen=True)
class NonFiniteFeature:
    idx: int


@dataclass(frozen=True)
class NegativeField:
    idx: int
    field: str


@dataclass(frozen=True)
class UnknownRole:
    role: str


def validate_dataset(ds: Dataset) -> list:
    """Return one violation descriptor per broken Dataset invariant (empty if valid)."""
    out = []
    if ds.role not in ROLES:
        out.append(UnknownRole(ds.role))
    ids, counts = np.unique(ds.sample_ids, return_counts=True)
    for sid in ids[counts > 1]:
        out.append(DuplicateId(int(sid)))
    bad = ~np.all(np.isfinite(ds.features), axis=1)
    for i in np.flatnonzero(bad):
        out.append(NonFiniteFeature(idx=int(i)))
    for name in ("sample_ids", "camera_ids", "frame_ids"):
        for i in np.flatnonzero(getattr(ds, name) < 0):
            out.append(NegativeField(idx=int(i), field=name))
    for i in np.flatnonzero(ds.identities < WITHHELD):
        out.append(NegativeField(idx=int(i), field="identities"))
    return out


@dataclass(frozen=True, eq=False)
class ClusterState:
    """Cluster centers plus the current pseudo-label assignment.

    ``flagged`` marks samples whose embedding had zero norm; they carry
    label 0 and similarity -1 and are never selected.
    """

    centers: np.ndarray
    labels: np.ndarray
    similarities: np.ndarray
    flagged: np.ndarray = None

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        sims = np.array(self.similarities, dtype=np.float64, copy=True)
        flagged = (
            np.zeros(labels.shape[0], dtype=bool)
            if self.flagged is None
            else np.array(self.flagged, dtype=bool, copy=True)
        )
        if centers.ndim != 2 or centers.shape[0] == 0:
            raise ValueError("centers must be a non-empty K x d array")
        if not np.all(np.isfinite(centers)):
            raise ValueError("centers must be finite")
        if np.any(np.linalg.norm(centers, axis=1) == 0):
            raise ValueError("centers must have nonzero norm")
        if not (labels.shape == sims.shape == flagged.shape):
            raise ValueError("labels, similarities and flagged must have equal length")
        if labels.size and (labels.min() < 0 or labels.max() >= centers.shape[0]):
            raise ValueError("labels must lie in [0, K)")
        for name, arr in (("centers", centers), ("labels", labels), ("similarities", sims), ("flagged", flagged)):
            object.__setattr__(self, name, _frozen(arr))

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class ReliableSet:
    member_indices: np.ndarray
    per_cluster_camera_anchors: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        idx = np.unique(np.asarray(self.member_indices, dtype=np.int64))
        object.__setattr__(self, "member_indices", _frozen(idx))
        object.__setattr__(self, "per_cluster_camera_anchors", dict(self.per_cluster_camera_anchors))

    def __len__(self):
        return self.member_indices.shape[0]

    def __contains__(self, i):
        pos = np.searchsorted(self.member_indices, i)
        return bool(pos < len(self) and self.member_indices[pos] == i)

    def __eq__(self, other):
        if not isinstance(other, ReliableSet):
            return NotImplemented
        return (
            np.array_equal(self.member_indices, other.member_indices)
            and self.per_cluster_camera_anchors == other.per_cluster_camera_anchors
        )

    __hash__ = None


def parse_selection(strategy: str) -> Tuple[str, Optional[float]]:
    """Split ``temporal`` / ``none`` / ``similarity:<t>`` into (name, threshold)."""
    s = strategy.strip()
    if s in ("temporal", "none"):
        return s, None
    if s.startswith("similarity"):
        _, _, rest = s.partition(":")
        try:
            return "similarity", float(rest) if rest else 0.85
        except ValueError:
            raise ConfigError(f"bad similarity threshold in {strategy!r}") from None
    raise ConfigError(f"unknown selection strategy {strategy!r}")


@dataclass(frozen=True)
class PipelineConfig:
    # clustering / selection
    k_clusters: int = 750
    lambda_fr: int = 100
    lambda_c: float = 0.5
    beta: float = 1e-8
    selection_strategy: str = "temporal"
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    # fine-tuning
    margin: float = 0.5
    n_iterations: int = 10
    epochs_per_iter: int = 20
    identities_per_batch: int = 16
    images_per_identity: int = 8
    learning_rate: float = 5e-4
    momentum: float = 0.9
    # embedder and source pretraining
    d_hidden: int = 128
    d_emb: int = 64
    pretrain_epochs: int = 20
    pretrain_learning_rate: float = 5e-4
    # evaluation: "normalized" or "raw" euclidean
    eval_metric: str = "normalized"
    seed: int = 0

    def __post_init__(self):
        def check(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("k_clusters", "lambda_fr", "n_iterations", "epochs_per_iter", "identities_per_batch",
                     "images_per_identity", "kmeans_max_iters", "d_hidden", "d_emb"):
            v = getattr(self, name)
            check(isinstance(v, (int, np.integer)) and not isinstance(v, bool), f"{name} must be an integer")
        check(self.k_clusters > 0, "k_clusters must be positive")
        check(self.lambda_fr > 0, "lambda_fr must be positive")
        check(0.0 <= self.lambda_c <= 1.0, "lambda_c must lie in [0, 1]")
        check(self.beta > 0, "beta must be positive")
        check(self.margin >= 0, "margin must be non-negative")
        check(self.n_iterations >= 0, "n_iterations must be non-negative")  # 0 = baseline only
        check(self.epochs_per_iter > 0, "epochs_per_iter must be positive")
        check(self.identities_per_batch > 0 and self.images_per_identity > 0, "batch shape must be positive")
        check(self.learning_rate > 0 and self.pretrain_learning_rate > 0, "learning rates must be positive")
        check(0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)")
        check(self.kmeans_max_iters > 0 and self.kmeans_tol > 0, "bad k-means settings")
        check(self.d_hidden > 0 and self.d_emb > 0, "embedder dims must be positive")
        check(self.pretrain_epochs >= 0, "pretrain_epochs must be non-negative")
        check(self.eval_metric in ("normalized", "raw"), "eval_metric must be 'normalized' or 'raw'")
        check(0 <= int(self.seed) < 2**64, "seed must be an unsigned 64-bit integer")
        parse_selection(self.selection_strategy)

    @property
    def selection(self) -> Tuple[str, Optional[float]]:
        return parse_selection(self.selection_strategy)

    def replace(self, **changes) -> "PipelineConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return PipelineConfig(**vals)


def seed_sequence(seed, *key: int) -> np.random.SeedSequence:
    """Child seed sequence addressed by ``key``; pure (unlike ``SeedSequence.spawn``)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    return np.random.SeedSequence(int(seed), spawn_key=key)
