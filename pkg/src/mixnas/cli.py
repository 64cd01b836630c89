"""Command-line interface: search, train, eval, flops, report.

Exit codes: 0 success, 1 invalid input (bad config, missing file), 2
runtime failure. All commands are deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cost as C
from . import model as M
from . import supernet as S
from . import tasks as K
from .config import ArchConfig, ConfigError, TaskShape
from .kvconfig import Getter, RunConfigError, dumps, parse_file
from .pipeline import Budgets, PipelineError, run_pipeline
from .space import SearchSpace, get_space


class UsageError(ValueError):
    pass


def _load_space(name_or_path: str) -> SearchSpace:
    if os.path.exists(name_or_path):
        return SearchSpace.from_file(name_or_path)
    return get_space(name_or_path)


def _build_task(g: Getter):
    kind = g.str("task")
    if kind == "copy":
        return K.copy_task(
            vocab=g.int("vocab", 12),
            len_range=(g.int("len_min", 3), g.int("len_max", 8)),
            n_train=g.int("n_train", 2000),
            n_eval=g.int("n_eval", 200),
            seed=g.int("task_seed", 0),
        )
    if kind in ("cifar10", "cifar10-subset"):
        root = K.dataset_root(g.str("data", "") or None)
        subset = g.opt_int("subset_per_class")
        if kind == "cifar10-subset" and subset is None:
            subset = 100
        return K.load_cifar10(
            root,
            subset_per_class=subset,
            token_mode=g.str("token_mode", "patch"),
            patch=g.int("patch", 4),
        )
    raise UsageError(f"unknown task {kind!r} (expected copy | cifar10 | cifar10-subset)")


def _hparams(g: Getter) -> M.TrainHParams:
    return M.TrainHParams(
        lr=g.float("lr", 1e-3),
        weight_decay=g.float("weight_decay", 0.0),
        clip_norm=g.float("clip_norm", 1.0),
        label_smoothing=g.float("label_smoothing", 0.1),
        schedule=g.str("schedule", "inverse_sqrt"),
        warmup_steps=g.int("warmup_steps", 100),
        max_steps=g.int("max_steps", 10_000),
    )


def _budgets(g: Getter) -> Budgets:
    return Budgets(
        supernet_steps=g.int("supernet_steps", 20000),
        n_candidates=g.int("n_candidates", 64),
        generations=g.int("generations", 60),
        retrain_steps=g.int("retrain_steps", 2000),
        population=g.int("population", 16),
        tournament_k=g.int("tournament_k", 4),
        mutation_rate=g.float("mutation_rate", 0.3),
        keep_k=g.int("keep_k", 3),
        batch_size=g.int("batch_size", 8),
        eval_batches=g.opt_int("eval_batches"),
        latency_n=g.int("latency_n", 32),
        latency_repeats=g.int("latency_repeats", 5),
        flops_n=g.int("flops_n", 256),
        jobs=g.int("jobs", 1),
        latency_mode=g.str("latency_mode", "estimated"),
    )


def cmd_search(args) -> int:
    cfg = parse_file(args.config)
    g = Getter(cfg)
    space = _load_space(g.str("space"))
    task = _build_task(g)
    out_dir = g.str("out")
    seed = g.int("seed", 0)
    budgets = _budgets(g)
    if args.jobs is not None:
        budgets.jobs = args.jobs
    hp = _hparams(g)
    run_pipeline(
        space, task, budgets, seed, out_dir, hp=hp, resume=args.resume,
        run_config_text=dumps(cfg), verbose=not args.quiet,
    )
    return 0


def _config_from_args(args) -> ArchConfig:
    if getattr(args, "from_report", None):
        path = os.path.join(args.from_report, "report.json")
        with open(path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
        cfg = ArchConfig.from_text(report["final"]["config"])
    elif getattr(args, "config_text", None):
        with open(args.config_text, "r", encoding="utf-8") as fh:
            cfg = ArchConfig.from_text(fh.read())
    else:
        raise UsageError("provide --config-text FILE or --from-report DIR")
    return cfg.with_attention_override(args.attn_override).validate()


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    g = Getter(parse_file(args.task_config))
    task = _build_task(g)
    hp = _hparams(g)
    weights, losses = S.train_standalone(
        cfg, task, steps=args.steps, seed=args.seed, hp=hp,
        batch_size=g.int("batch_size", 8),
        log_every=max(1, args.steps // 10),
    )
    weights.save(args.out)
    metrics = S.evaluate_metrics(weights, cfg, task)
    print(f"final train loss {losses[-1]:.4f}")
    print(f"eval loss {metrics['loss']:.4f}  accuracy {metrics['accuracy']:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    weights = M.ModelWeights.load(args.ckpt)
    cfg = weights.config.with_attention_override(args.attn_override)
    g = Getter(parse_file(args.task_config))
    task = _build_task(g)
    metrics = S.evaluate_metrics(weights, cfg, task)
    n_src = args.n_src
    n_tgt = args.n_tgt if cfg.dec_layers else 0
    cost = C.estimate_flops(cfg, n_src, n_tgt=n_tgt, shape=task.shape())
    print(f"loss      {metrics['loss']:.6f}")
    print(f"accuracy  {metrics['accuracy']:.4f}")
    print(f"flops     {cost.total_flops}  (n_src={n_src}, n_tgt={n_tgt})")
    print(f"params    {cost.params}")
    return 0


def cmd_flops(args) -> int:
    with open(args.config_text, "r", encoding="utf-8") as fh:
        cfg = ArchConfig.from_text(fh.read()).validate()
    cfg = cfg.with_attention_override(args.attn_override)
    if cfg.dec_layers > 0:
        shape = TaskShape("seq2seq", vocab_size=args.vocab)
        report = C.estimate_flops(cfg, args.n_src, n_tgt=args.n_tgt, shape=shape)
    else:
        shape = TaskShape("classification", n_classes=args.classes, patch_dim=args.patch_dim)
        report = C.estimate_flops(cfg, args.n_src, shape=shape)
    width = max(len(k) for k in report.breakdown)
    for name, flops in report.breakdown.items():
        print(f"{name:<{width}}  {flops:>16}")
    print(f"{'total':<{width}}  {report.total_flops:>16}")
    print(f"{'params':<{width}}  {report.params:>16}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"csv written to {args.csv}")
    return 0


def cmd_report(args) -> int:
    path = os.path.join(args.dir, "report.json")
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    final = report["final"]
    print(f"schema            {report['schema']}")
    print(f"seed              {report['seed']}")
    print("stage timings (s)")
    for stage, secs in report["stage_timings_s"].items():
        print(f"  {stage:<12} {secs}")
    print("feature importance (loss)")
    for name, score in report["importance"]["loss"]:
        print(f"  {name:<16} {score:+.4f}")
    print("final architecture")
    for line in final["config"].strip().splitlines():
        print(f"  {line}")
    enc_attn = final["per_layer_attention"]["encoder"]
    linear_layers = [i + 1 for i, a in enumerate(enc_attn) if a == "linear"]
    print(f"encoder linear-attention layers: {linear_layers or 'none'}")
    print(f"eval metrics      {final['metrics']}")
    print(f"flops             {final['flops_total']} at n={final['flops_at_n']}")
    print(f"  all-softmax     {final['flops_all_softmax_override']}")
    print(f"  all-linear      {final['flops_all_linear_override']}")
    print(f"params            {final['params']}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixnas",
        description="Architecture search over transformers mixing softmax and linear attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the full search pipeline from a config file")
    p.add_argument("--config", required=True, help="key=value run config file")
    p.add_argument("--resume", action="store_true", help="reuse existing stage checkpoints")
    p.add_argument("--jobs", type=int, default=None, help="parallel candidate-eval workers")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("train", help="train one architecture from scratch")
    p.add_argument("--config-text", help="file holding a canonical architecture text")
    p.add_argument("--from-report", help="search output dir; trains its final config")
    p.add_argument("--attn-override", default="as-is", choices=["as-is", "all-softmax", "all-linear"])
    p.add_argument("--task-config", required=True, help="key=value task/training config")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint: loss, accuracy, FLOPS, params")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attn-override", default="as-is", choices=["as-is", "all-softmax", "all-linear"])
    p.add_argument("--task-config", required=True)
    p.add_argument("--n-src", type=int, default=256)
    p.add_argument("--n-tgt", type=int, default=256)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="print the FLOPS breakdown of an architecture")
    p.add_argument("--config-text", required=True)
    p.add_argument("--attn-override", default="as-is", choices=["as-is", "all-softmax", "all-linear"])
    p.add_argument("--n-src", type=int, required=True)
    p.add_argument("--n-tgt", type=int, default=0)
    p.add_argument("--vocab", type=int, default=C.DEFAULT_VOCAB)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--patch-dim", type=int, default=48)
    p.add_argument("--csv", help="also write the breakdown as CSV")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("report", help="summarize a finished search directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (
        UsageError,
        RunConfigError,
        ConfigError,
        K.DataError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'mixnas <command> --help' for usage", file=sys.stderr)
        return 1
    except (PipelineError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
