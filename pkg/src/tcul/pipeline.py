"""The iterative loop: pretrain, k-means, then assign / select / fine-tune / update centers."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dataio
from .clustering import KMeansConfig, assign_embeddings, kmeans_init, l2_normalize, update_centers
from .core import ClusterState, Dataset, PipelineConfig, ReliableSet, seed_sequence
from .embedder import EmbedderModel, OptimizerState, embed, pretrain_source
from .errors import ConfigError, InsufficientLabels
from .evaluator import evaluate
from .selection import prune_for_training, select
from .trainer import train_epochs

log = logging.getLogger(__name__)

ABLATION_PARAMS = ("lambda_fr", "k_clusters", "selection_strategy")

# fixed child indices of the run's SeedSequence
_SEED_INIT, _SEED_PRETRAIN, _SEED_KMEANS, _SEED_ITER0 = 0, 1, 2, 3


@dataclass
class RunRecord:
    entries: List[dict] = field(default_factory=list)
    baseline: Dict[str, float] = field(default_factory=dict)
    config: Optional[PipelineConfig] = None
    seed: int = 0

    @property
    def final(self) -> Dict[str, float]:
        return self.entries[-1] if self.entries else self.baseline

    def reliable_counts(self) -> List[int]:
        return [e["reliable_count"] for e in self.entries]

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        # compare through JSON so NaN losses compare equal
        return (json.dumps(self.entries, sort_keys=True) == json.dumps(other.entries, sort_keys=True)
                and json.dumps(self.baseline, sort_keys=True) == json.dumps(other.baseline, sort_keys=True)
                and self.config == other.config and self.seed == other.seed)


def _seed(cfg: PipelineConfig, child: int) -> np.random.SeedSequence:
    return seed_sequence(cfg.seed, child)


def pretrain_baseline(source: Dataset, cfg: PipelineConfig) -> EmbedderModel:
    """Fresh embedder trained on the labeled source set."""
    model = EmbedderModel.init(source.d_raw, cfg.d_hidden, cfg.d_emb, seed=_seed(cfg, _SEED_INIT))
    return pretrain_source(model, source, cfg, seed=_seed(cfg, _SEED_PRETRAIN))


def _metrics(model, query, gallery, cfg):
    m = evaluate(model, query, gallery, metric=cfg.eval_metric)
    return {"rank1": m["rank1"], "rank5": m["rank5"], "map": m["map"]}


def _write_labels(path: Path, target: Dataset, state: ClusterState, reliable: ReliableSet):
    mask = np.zeros(len(target), dtype=bool)
    mask[reliable.member_indices] = True
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "label", "similarity", "reliable"])
        for sid, lab, sim, rel in zip(target.sample_ids.tolist(), state.labels.tolist(),
                                      state.similarities.tolist(), mask.tolist()):
            w.writerow([sid, lab, repr(sim), int(rel)])


def run_tcul(source: Dataset, target: Dataset, query: Dataset, gallery: Dataset, cfg: PipelineConfig,
             run_dir=None, pretrained: Optional[EmbedderModel] = None) -> Tuple[EmbedderModel, RunRecord]:
    """Train a target embedder without target labels.

    Args:
        source: labeled source set, used only for pretraining.
        target: unlabeled target training set (identities, if present, are dropped).
        query, gallery: labeled evaluation sets, scored after every iteration.
        cfg: pipeline configuration.
        run_dir: optional directory for config snapshot, record, labels and model.
        pretrained: baseline model to start from instead of pretraining on
            ``source``; must equal what :func:`pretrain_baseline` would give
            for bit-reproducible records.

    Returns:
        The final model and its :class:`RunRecord`.
    """
    target = target.unlabeled()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        dataio.save_config(cfg, run_dir / "config.snapshot")
    if cfg.k_clusters > len(target):
        raise ConfigError(f"k_clusters={cfg.k_clusters} exceeds target size {len(target)}")

    model = pretrain_baseline(source, cfg) if pretrained is None else pretrained.copy()
    record = RunRecord(baseline=_metrics(model, query, gallery, cfg), config=cfg, seed=int(cfg.seed))
    log.info("baseline: %s", _fmt(record.baseline))

    kcfg = KMeansConfig(cfg.k_clusters, cfg.kmeans_max_iters, cfg.kmeans_tol)
    centers = kmeans_init(embed(model, target.features), kcfg, seed=_seed(cfg, _SEED_KMEANS))
    strategy = cfg.selection

    for it in range(1, cfg.n_iterations + 1):
        t0 = time.perf_counter()
        state = assign_embeddings(embed(model, target.features), centers)
        reliable = select(strategy, state, target, cfg.lambda_fr)
        entry = {"iter": it, "reliable_count": len(reliable)}
        try:
            pruned = prune_for_training(reliable, state)
        except InsufficientLabels as e:
            log.warning("iteration %d: fine-tuning skipped (%s)", it, e)
            entry.update(pruned_count=0, mean_triplet_loss=float("nan"), finetune_skipped=True, skipped_batches=0)
        else:
            opt = OptimizerState.for_model(model, cfg.learning_rate, cfg.momentum)
            model, losses, skipped = train_epochs(model, opt, pruned, state, target, cfg,
                                                  seed=_seed(cfg, _SEED_ITER0 + it))
            finite = [x for x in losses if np.isfinite(x)]
            entry.update(pruned_count=len(pruned), mean_triplet_loss=float(np.mean(finite)) if finite else float("nan"),
                         finetune_skipped=False, skipped_batches=skipped)
        centers = update_centers(state, l2_normalize(embed(model, target.features)), cfg.lambda_c, cfg.beta)
        entry.update(_metrics(model, query, gallery, cfg))
        record.entries.append(entry)
        if run_dir is not None:
            _write_labels(run_dir / f"labels_iter{it}.csv", target, state, reliable)
        log.info("iter %d (%.1fs): %s", it, time.perf_counter() - t0, _fmt(entry))

    if run_dir is not None:
        save_run(record, model, run_dir)
    return model, record


def _fmt(d):
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items())


def save_run(record: RunRecord, model: EmbedderModel, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dataio.save_run_record(record.entries, run_dir / "record.jsonl")
    (run_dir / "baseline.json").write_text(json.dumps(record.baseline) + "\n")
    dataio.save_model(model, run_dir / "model_final.bin")
    if record.config is not None:
        dataio.save_config(record.config, run_dir / "config.snapshot")


def load_run(run_dir) -> Tuple[EmbedderModel, RunRecord]:
    run_dir = Path(run_dir)
    cfg = dataio.load_config(run_dir / "config.snapshot")
    record = RunRecord(
        entries=dataio.load_run_record(run_dir / "record.jsonl"),
        baseline=json.loads((run_dir / "baseline.json").read_text()),
        config=cfg,
        seed=int(cfg.seed),
    )
    return dataio.load_model(run_dir / "model_final.bin"), record


def worker_threads() -> int:
    raw = os.environ.get("TCUL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"TCUL_THREADS must be an integer, got {raw!r}") from None


def _sweep_value(param: str, value):
    if param == "selection_strategy":
        return str(value)
    return int(value)


def run_ablation(base_cfg: PipelineConfig, param: str, values: Sequence, datasets, threads=None) -> List[dict]:
    """Run the pipeline once per value of ``param``.

    ``datasets`` is ``(source, target, query, gallery)``. All rows share the
    seed and one pretrained baseline. A failing row is recorded with its
    error message and the sweep carries on. Rows come back in input order.
    """
    if param not in ABLATION_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {', '.join(ABLATION_PARAMS)}")
    source, target, query, gallery = datasets
    baseline = pretrain_baseline(source, base_cfg)

    def one(value):
        row = {"param": param, "value": value}
        try:
            cfg = base_cfg.replace(**{param: _sweep_value(param, value)})
            _, rec = run_tcul(source, target, query, gallery, cfg, pretrained=baseline)
        except Exception as e:  # noqa: BLE001 - a broken row must not stop the sweep
            log.error("ablation %s=%s failed: %s", param, value, e)
            row.update(rank1=float("nan"), rank5=float("nan"), map=float("nan"),
                       baseline_map=float("nan"), final_reliable=-1, error=f"{type(e).__name__}: {e}")
            return row
        fin = rec.final
        row.update(rank1=fin["rank1"], rank5=fin["rank5"], map=fin["map"], baseline_map=rec.baseline["map"],
                   final_reliable=rec.entries[-1]["reliable_count"] if rec.entries else 0, error="")
        return row

    n = threads if threads is not None else worker_threads()
    if n <= 1:
        return [one(v) for v in values]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, values))


ABLATION_COLUMNS = ["param", "value", "rank1", "rank5", "map", "baseline_map", "final_reliable", "error"]


def write_ablation_csv(rows: List[dict], out) -> None:
    w = csv.DictWriter(out, fieldnames=ABLATION_COLUMNS)
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in ABLATION_COLUMNS})
