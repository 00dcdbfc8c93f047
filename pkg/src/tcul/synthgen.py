"""Synthetic multi-camera datasets with frame ids and known identities.

Each identity ``i`` has a latent code ``z_i``; camera ``j`` observes it as
``R_j @ (A @ z_i) + b_j + noise``, where ``A`` is a mixing matrix shared by
every camera (and by source and target), ``R_j`` a rotation whose angle
grows with ``camera_shift_scale`` and ``b_j`` a camera bias of the same
scale. Every camera has its own timeline on which each visiting identity
occupies one short contiguous window of frames, optionally followed by a
later re-entry.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import expm

from .core import Dataset
from .errors import ConfigError, GenerationInfeasible

_MIXING_STREAM = 99
_MAX_CAMERA_DRAWS = 100


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 200
    n_cameras: int = 6
    d_latent: int = 32
    d_raw: int = 64
    images_per_appearance: Tuple[int, int] = (4, 8)
    session_width: int = 40
    camera_gap: int = 20
    appearance_prob: float = 0.65
    noise_sigma: float = 0.5
    camera_shift_scale: float = 0.35
    reappearance_prob: float = 0.0
    group_size: int = 4
    group_affinity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.images_per_appearance
        object.__setattr__(self, "images_per_appearance", (int(lo), int(hi)))
        problems = []
        if self.n_identities <= 0 or self.n_cameras <= 0:
            problems.append("n_identities and n_cameras must be positive")
        if not 0 < self.d_latent <= self.d_raw:
            problems.append("need 0 < d_latent <= d_raw")
        if not 1 <= lo <= hi:
            problems.append("images_per_appearance must satisfy 1 <= lo <= hi")
        if self.session_width < 1:
            problems.append("session_width must be >= 1")
        if self.camera_gap < 0:
            problems.append("camera_gap must be non-negative")
        if not 0 < self.appearance_prob <= 1:
            problems.append("appearance_prob must lie in (0, 1]")
        if self.noise_sigma < 0 or self.camera_shift_scale < 0:
            problems.append("noise_sigma and camera_shift_scale must be non-negative")
        if self.group_size < 1 or not 0 <= self.group_affinity < 1:
            problems.append("group_size must be >= 1 and group_affinity must lie in [0, 1)")
        if not 0 <= self.reappearance_prob < 1:
            problems.append("reappearance_prob must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "SynthConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return SynthConfig(**vals)


def source_default(seed=0) -> SynthConfig:
    return SynthConfig(n_identities=150, seed=seed)


def target_default(seed=0) -> SynthConfig:
    return SynthConfig(n_identities=200, seed=seed)


def mixing_matrix(d_raw: int, d_latent: int, seed) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_MIXING_STREAM,)))
    return rng.normal(0.0, 1.0 / np.sqrt(d_latent), size=(d_raw, d_latent))


def _camera_transform(rng, d_raw, scale):
    g = rng.normal(0.0, 1.0 / np.sqrt(d_raw), size=(d_raw, d_raw))
    rot = expm(scale * (g - g.T))  # exp of a skew-symmetric matrix is a rotation
    bias = scale * rng.normal(0.0, 1.0, size=d_raw)
    return rot, bias


def _draw_groups(rng, n, max_size):
    """Partition ``0..n-1`` into consecutive groups of 1..max_size identities."""
    groups, start = [], 0
    while start < n:
        size = int(rng.integers(1, max_size + 1))
        groups.append(list(range(start, min(start + size, n))))
        start += size
    return groups


def _draw_cameras(rng, cfg, need):
    for _ in range(_MAX_CAMERA_DRAWS):
        cams = np.flatnonzero(rng.random(cfg.n_cameras) < cfg.appearance_prob)
        if cams.size >= need:
            return cams
    raise GenerationInfeasible(
        f"appearance_prob={cfg.appearance_prob} rarely places an identity in {need} of "
        f"{cfg.n_cameras} cameras; query/gallery construction needs cross-camera appearances"
    )


def generate(cfg: SynthConfig, *, stream=0, identity_offset=0, sample_id_offset=0,
             mixing: Optional[np.ndarray] = None):
    """Generate ``(train, query, gallery)`` datasets, all carrying identities.

    For every identity seen by two or more cameras, one sample per camera is
    moved out of ``train``: one camera's sample becomes the query, the rest
    go to the gallery, so each query has a cross-camera positive.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(stream,)))
    if mixing is None:
        mixing = mixing_matrix(cfg.d_raw, cfg.d_latent, cfg.seed)
    if mixing.shape != (cfg.d_raw, cfg.d_latent):
        raise ConfigError(f"mixing matrix shape {mixing.shape} != ({cfg.d_raw}, {cfg.d_latent})")
    lo, hi = cfg.images_per_appearance
    need = min(2, cfg.n_cameras)

    groups = _draw_groups(rng, cfg.n_identities, cfg.group_size)
    # members of a group share part of their latent code; each z_i stays unit Gaussian
    shared = rng.normal(size=(len(groups), cfg.d_latent))
    own = rng.normal(size=(cfg.n_identities, cfg.d_latent))
    group_of = np.empty(cfg.n_identities, dtype=np.int64)
    for g, members in enumerate(groups):
        group_of[members] = g
    latent = np.sqrt(cfg.group_affinity) * shared[group_of] + np.sqrt(1.0 - cfg.group_affinity) * own
    clean = latent @ mixing.T
    transforms = [_camera_transform(rng, cfg.d_raw, cfg.camera_shift_scale) for _ in range(cfg.n_cameras)]
    group_visits = [_draw_cameras(rng, cfg, need) for _ in groups]
    visits = [group_visits[g] for g in group_of]

    # camera -> ordered list of (identity, is_reentry)
    rows = []  # (identity, camera, frame, session_index)
    session = 0
    first_session = {}
    for cam in range(cfg.n_cameras):
        # groups pass in random order, members back to back
        order = []
        for g in rng.permutation(len(groups)).tolist():
            if cam in group_visits[g]:
                order.extend((i, False) for i in rng.permutation(groups[g]).tolist())
        for pos in range(len(order) - 1, -1, -1):
            if rng.random() < cfg.reappearance_prob:
                # re-entry lands strictly after the first visit and its neighbour
                slot = int(rng.integers(pos + 2, len(order) + 2))
                order.insert(min(slot, len(order)), (order[pos][0], True))
        t = int(rng.integers(0, cfg.session_width + 1))
        for ident, reentry in order:
            width = int(rng.integers(max(1, cfg.session_width // 2), cfg.session_width + 1))
            n = int(rng.integers(lo, hi + 1))
            frames = np.sort(t + rng.integers(0, width + 1, size=n))
            if not reentry:
                first_session[(ident, cam)] = session
            rows.extend((ident, cam, int(f), session) for f in frames)
            session += 1
            t += width + 1 + cfg.camera_gap + int(rng.integers(0, cfg.camera_gap + 1))

    ident = np.array([r[0] for r in rows], dtype=np.int64)
    cam = np.array([r[1] for r in rows], dtype=np.int64)
    frame = np.array([r[2] for r in rows], dtype=np.int64)
    sess = np.array([r[3] for r in rows], dtype=np.int64)

    feats = np.empty((len(rows), cfg.d_raw))
    for j, (rot, bias) in enumerate(transforms):
        m = cam == j
        feats[m] = clean[ident[m]] @ rot.T + bias
    if cfg.noise_sigma > 0:
        feats += rng.normal(0.0, cfg.noise_sigma, size=feats.shape)

    # query / gallery split
    query_rows, gallery_rows = [], []
    for i in range(cfg.n_identities):
        cams_i = visits[i]
        if cams_i.size < 2:
            continue
        picks = []
        for j in cams_i:
            cand = np.flatnonzero(sess == first_session[(i, int(j))])
            picks.append(int(rng.choice(cand)))
        q = int(rng.integers(len(picks)))
        query_rows.append(picks[q])
        gallery_rows.extend(p for k, p in enumerate(picks) if k != q)
    moved = np.zeros(len(rows), dtype=bool)
    moved[query_rows + gallery_rows] = True
    train_rows = rng.permutation(np.flatnonzero(~moved))

    sid = sample_id_offset
    out = []
    for role, sel in (("target_train", train_rows), ("query", np.array(query_rows, dtype=np.int64)),
                      ("gallery", np.array(gallery_rows, dtype=np.int64))):
        out.append(Dataset(
            features=feats[sel].reshape(-1, cfg.d_raw),
            sample_ids=np.arange(sid, sid + sel.shape[0]),
            camera_ids=cam[sel],
            frame_ids=frame[sel],
            identities=ident[sel] + identity_offset,
            role=role,
        ))
        sid += sel.shape[0]
    return tuple(out)


def generate_pair(cfg_source: SynthConfig, cfg_target: SynthConfig):
    """Source dataset (identities visible) and target ``(train, query, gallery)``.

    Identity pools are disjoint (target identities are offset past the
    source pool) and each side uses its own random stream for cameras and
    identities, even when the seeds are equal. The mixing matrix is shared.
    The target training set comes back with identities withheld.
    """
    if (cfg_source.d_raw, cfg_source.d_latent) != (cfg_target.d_raw, cfg_target.d_latent):
        raise ConfigError("source and target must share d_raw and d_latent")
    mixing = mixing_matrix(cfg_target.d_raw, cfg_target.d_latent, cfg_target.seed)
    src_train, src_q, src_g = generate(cfg_source, stream=1, mixing=mixing)
    # query/gallery samples of the source pool are still labeled training data
    source = Dataset(
        np.concatenate([src_train.features, src_q.features, src_g.features]),
        np.concatenate([src_train.sample_ids, src_q.sample_ids, src_g.sample_ids]),
        np.concatenate([src_train.camera_ids, src_q.camera_ids, src_g.camera_ids]),
        np.concatenate([src_train.frame_ids, src_q.frame_ids, src_g.frame_ids]),
        np.concatenate([src_train.identities, src_q.identities, src_g.identities]),
        role="source_train",
    )
    train, query, gallery = generate(
        cfg_target, stream=2, identity_offset=cfg_source.n_identities,
        sample_id_offset=len(source), mixing=mixing,
    )
    return source, (train.unlabeled(), query, gallery)
