"""Command line entry point: gen, pretrain, run, eval, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio
from .core import PipelineConfig, parse_selection
from .errors import TCULError
from .evaluator import evaluate
from .pipeline import ABLATION_PARAMS, pretrain_baseline, run_ablation, run_tcul, write_ablation_csv
from .synthgen import SynthConfig, generate_pair, source_default, target_default

log = logging.getLogger("tcul")


def _pipeline_config(args) -> PipelineConfig:
    cfg = dataio.load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "selection", None):
        parse_selection(args.selection)
        cfg = cfg.replace(selection_strategy=args.selection)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def synth_configs(kv, seed=None):
    """Source and target SynthConfigs from flat keys.

    Plain keys apply to both sides; ``source.<key>`` and ``target.<key>``
    override one side.
    """
    shared, per_side = {}, {"source": {}, "target": {}}
    for key, value in kv.items():
        side, dot, name = key.partition(".")
        if dot and side in per_side:
            per_side[side][name] = value
        else:
            shared[key] = value
    out = []
    for side, base in (("source", source_default()), ("target", target_default())):
        cfg = dataio.dataclass_from_kv(SynthConfig, {**shared, **per_side[side]}, base=base)
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        out.append(cfg)
    return tuple(out)


def cmd_gen(args):
    kv = dataio.parse_kv(Path(args.config).read_text(), args.config) if args.config else {}
    src_cfg, tgt_cfg = synth_configs(kv, args.seed)
    source, (train, query, gallery) = generate_pair(src_cfg, tgt_cfg)
    prefix = args.out
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    for name, ds in (("source", source), ("target", train), ("query", query), ("gallery", gallery)):
        dataio.save_dataset(ds, f"{prefix}_{name}")
        log.info("wrote %s_%s (%d samples)", prefix, name, len(ds))
    return 0


def cmd_pretrain(args):
    cfg = _pipeline_config(args)
    model = pretrain_baseline(dataio.load_dataset(args.source), cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataio.save_model(model, args.out)
    return 0


def _load_four(args):
    return tuple(dataio.load_dataset(s) for s in (args.source, args.target, args.query, args.gallery))


def cmd_run(args):
    cfg = _pipeline_config(args)
    source, target, query, gallery = _load_four(args)
    _, record = run_tcul(source, target, query, gallery, cfg, run_dir=args.out)
    print(json.dumps({"baseline": record.baseline, "final": {k: record.final[k] for k in ("rank1", "rank5", "map")}}))
    return 0


def cmd_eval(args):
    model = dataio.load_model(args.model)
    metrics = evaluate(model, dataio.load_dataset(args.query), dataio.load_dataset(args.gallery), metric=args.metric)
    print(json.dumps(metrics))
    return 0


def cmd_ablate(args):
    cfg = _pipeline_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = run_ablation(cfg, args.param, values, _load_four(args), threads=args.threads)
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_ablation_csv(rows, f)
    else:
        write_ablation_csv(rows, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcul", description="Unsupervised re-id with temporal sample selection")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="synthesize source/target/query/gallery datasets")
    g.add_argument("--config", help="key=value file of generator settings (source./target. prefixes allowed)")
    g.add_argument("--out", required=True, help="output stem prefix")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    pt = sub.add_parser("pretrain", parents=[common], help="train the baseline embedder on a labeled source set")
    pt.add_argument("--source", required=True)
    pt.add_argument("--out", required=True, help="model file")
    pt.add_argument("--config")
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_pretrain)

    def add_data(sp):
        for name in ("source", "target", "query", "gallery"):
            sp.add_argument(f"--{name}", required=True, help=f"{name} dataset stem")
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--selection", help="temporal | similarity:<t> | none")

    r = sub.add_parser("run", parents=[common], help="full pipeline; writes a run directory")
    add_data(r)
    r.add_argument("--out", required=True, help="run directory")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="score a model; metrics JSON on stdout")
    e.add_argument("--model", required=True)
    e.add_argument("--query", required=True)
    e.add_argument("--gallery", required=True)
    e.add_argument("--metric", default="normalized", choices=("normalized", "raw"))
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="sweep one parameter; CSV out")
    a.add_argument("--param", required=True, choices=ABLATION_PARAMS)
    a.add_argument("--values", required=True, help="comma separated values")
    add_data(a)
    a.add_argument("--out", help="CSV path (default stdout)")
    a.add_argument("--threads", type=int, help="worker threads (default TCUL_THREADS or 1)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TCULError, ValueError, OSError) as e:
        print(f"tcul: error: {e}", file=sys.stderr)
        return 2
