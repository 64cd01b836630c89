"""End-to-end search: supernet -> measurements -> rankers -> pruning ->
evolution -> retraining, with per-stage checkpoints for resume.

Stage outputs land in the run directory as versioned files; re-running
with ``resume=True`` skips any stage whose output already exists, so an
interrupted search continues where it stopped.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cost as C
from . import model as M
from . import ranker as R
from . import supernet as S
from .config import ArchConfig, AttentionKind
from .evolution import evolve
from .records import CandidateRecord, load_candidates, save_candidates
from .space import SearchSpace

REPORT_SCHEMA = "mixnas-report-v1"


class PipelineError(RuntimeError):
    pass


@dataclass
class Budgets:
    supernet_steps: int = 20000  # default follows the documented search recipe
    n_candidates: int = 64
    generations: int = 60
    retrain_steps: int = 2000
    population: int = 16
    tournament_k: int = 4
    mutation_rate: float = 0.3
    keep_k: int = 3
    batch_size: int = 8
    eval_batches: int | None = None
    latency_n: int = 32
    latency_repeats: int = 5
    flops_n: int = 256
    jobs: int = 1
    # "estimated" drives the in-loop 10% trim with the analytic cost model so
    # a fixed seed reproduces the same final config; "measured" puts the
    # wall-clock-fitted ranker in the loop (hardware-aware, noisy).
    latency_mode: str = "estimated"

    def validate(self):
        if self.supernet_steps < 1 or self.retrain_steps < 1:
            raise PipelineError("training budgets must be >= 1 step")
        if self.generations < 1 or self.population < 2:
            raise PipelineError("evolution needs generations >= 1 and population >= 2")
        if self.latency_mode not in ("estimated", "measured"):
            raise PipelineError(f"latency_mode must be estimated|measured, got {self.latency_mode}")
        return self


def _eval_one(args):
    weights, config, task, eval_batches = args
    loss = S.evaluate_subnet(weights, config, task, max_batches=eval_batches)
    return loss


def _flops_shape(task):
    shape = task.shape()
    if shape.kind == "seq2seq":
        return shape
    return shape


def run_pipeline(
    space: SearchSpace,
    task,
    budgets: Budgets,
    seed: int,
    out_dir: str,
    hp: M.TrainHParams | None = None,
    resume: bool = False,
    run_config_text: str = "",
    verbose: bool = True,
) -> dict:
    """Execute the full search; returns the report dict (also written to disk)."""
    budgets.validate()
    if budgets.n_candidates < 2:
        raise PipelineError(
            "n_candidates must be >= 2: the ranker stage needs candidate pairs"
        )
    hp = hp or M.TrainHParams()
    probe = S.maximal_config(space)
    if task.kind == "classification" and probe.dec_layers > 0:
        raise PipelineError("classification tasks pair with encoder-only spaces (dec_layers == 0)")
    if task.kind == "seq2seq" and probe.dec_layers == 0:
        raise PipelineError("seq2seq tasks need a space with decoder layers")
    os.makedirs(out_dir, exist_ok=True)
    shape = task.shape()
    timings: dict[str, float] = {}

    def say(msg):
        if verbose:
            print(msg, flush=True)

    def stage_path(name):
        return os.path.join(out_dir, name)

    # -- stage 1: supernet -----------------------------------------------------
    t0 = time.perf_counter()
    supernet_path = stage_path("supernet.ckpt")
    if resume and os.path.exists(supernet_path):
        say("[1/6] supernet: resuming from checkpoint")
        weights = M.ModelWeights.load(supernet_path)
    else:
        say(f"[1/6] supernet: training for {budgets.supernet_steps} steps")
        weights, _ = S.train_supernet(
            space, task, budgets.supernet_steps, seed, hp=hp,
            batch_size=budgets.batch_size,
            log_every=max(1, budgets.supernet_steps // 10) if verbose else 0,
        )
        weights.save(supernet_path)
    timings["supernet"] = time.perf_counter() - t0

    # -- stage 2: candidate measurements ----------------------------------------
    t0 = time.perf_counter()
    cand_path = stage_path("candidates.jsonl")
    if resume and os.path.exists(cand_path):
        say("[2/6] candidates: resuming from file")
        records = load_candidates(cand_path)
    else:
        say(f"[2/6] candidates: sampling and measuring {budgets.n_candidates} subnets")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA4D)))
        configs, seen = [], set()
        while len(configs) < budgets.n_candidates:
            cfg = space.sample(rng)
            key = cfg.to_text()
            if key in seen and len(seen) < space.enumerable_size():
                continue
            seen.add(key)
            configs.append(cfg)
        if budgets.jobs > 1:
            with ProcessPoolExecutor(max_workers=budgets.jobs) as pool:
                losses = list(
                    pool.map(
                        _eval_one,
                        [(weights, c, task, budgets.eval_batches) for c in configs],
                    )
                )
        else:
            losses = [
                _eval_one((weights, c, task, budgets.eval_batches)) for c in configs
            ]
        records = []
        for cfg, loss in zip(configs, losses):  # latency serialized under the lock
            lat = C.measure_latency(
                cfg, weights, n=budgets.latency_n, repeats=budgets.latency_repeats,
                shape=shape, seed=seed,
            )
            flops = C.estimate_flops(
                cfg, budgets.flops_n,
                n_tgt=budgets.latency_n if cfg.dec_layers else 0,
                shape=shape,
            )
            records.append(
                CandidateRecord(
                    config=cfg,
                    features=space.encode(cfg),
                    loss=loss,
                    latency_ms=lat.median_ms,
                    flops=float(flops.total_flops),
                    params=flops.params,
                )
            )
        save_candidates(cand_path, records)
    timings["candidates"] = time.perf_counter() - t0

    # -- stage 3: rankers --------------------------------------------------------
    t0 = time.perf_counter()
    say("[3/6] rankers: fitting pairwise surrogates for loss and latency")
    try:
        loss_ranker = R.fit_ranker(records, "loss", seed, space=space)
        latency_ranker = R.fit_ranker(records, "latency", seed, space=space)
    except R.InsufficientDataError as exc:
        raise PipelineError(
            f"ranker stage failed: {exc}; increase n_candidates or eval coverage"
        ) from exc
    timings["rankers"] = time.perf_counter() - t0

    # -- stage 4: importance + pruning --------------------------------------------
    t0 = time.perf_counter()
    say("[4/6] pruning: permutation importance and feature freezing")
    loss_importance = R.feature_importance(loss_ranker, records)
    latency_importance = R.feature_importance(latency_ranker, records)
    best_seen = min(records, key=lambda r: r.loss)
    keep_k = min(budgets.keep_k, len(space.features))
    pruned = R.prune_space(space, loss_importance, keep_k, best_seen.config)
    timings["importance"] = time.perf_counter() - t0

    # -- stage 5: evolution ---------------------------------------------------------
    t0 = time.perf_counter()
    say(f"[5/6] evolution: {budgets.generations} generations, population {budgets.population}")
    predict_loss = lambda cfg: -loss_ranker.score(space.encode(cfg))
    if budgets.latency_mode == "measured":
        predict_latency = lambda cfg: -latency_ranker.score(space.encode(cfg))
    else:
        predict_latency = lambda cfg: float(
            C.estimate_flops(
                cfg, budgets.latency_n,
                n_tgt=budgets.latency_n if cfg.dec_layers else 0,
                shape=shape,
            ).total_flops
        )
    evo = evolve(
        pruned,
        predict_loss,
        predict_latency=predict_latency,
        population=budgets.population,
        generations=budgets.generations,
        tournament_k=budgets.tournament_k,
        mutation_rate=budgets.mutation_rate,
        seed=seed,
    )
    final_config = evo.best_config
    timings["evolution"] = time.perf_counter() - t0

    # -- stage 6: retrain the winner from scratch -------------------------------------
    t0 = time.perf_counter()
    final_path = stage_path("final.ckpt")
    if resume and os.path.exists(final_path):
        say("[6/6] retrain: resuming from checkpoint")
        final_weights = M.ModelWeights.load(final_path)
        final_config = final_weights.config
    else:
        say(f"[6/6] retrain: {budgets.retrain_steps} steps from scratch")
        final_weights, _ = S.train_standalone(
            final_config, task, budgets.retrain_steps, seed, hp=hp,
            batch_size=budgets.batch_size,
        )
        final_weights.save(final_path)
    final_metrics = S.evaluate_metrics(final_weights, final_config, task)
    timings["retrain"] = time.perf_counter() - t0

    # -- report -------------------------------------------------------------------------
    n_tgt = budgets.latency_n if final_config.dec_layers else 0
    final_cost = C.estimate_flops(final_config, budgets.flops_n, n_tgt=n_tgt, shape=shape)
    soft_cost = C.estimate_flops(
        final_config.with_attention_override("all-softmax"),
        budgets.flops_n, n_tgt=n_tgt, shape=shape,
    )
    linear_cost = C.estimate_flops(
        final_config.with_attention_override("all-linear"),
        budgets.flops_n, n_tgt=n_tgt, shape=shape,
    )
    report = {
        "schema": REPORT_SCHEMA,
        "seed": seed,
        "run_config": run_config_text,
        "space": space.to_text(),
        "budgets": asdict(budgets),
        "stage_timings_s": {k: round(v, 3) for k, v in timings.items()},
        "ranker": {
            "loss": {
                "holdout_pairwise_accuracy": loss_ranker.holdout_accuracy,
                "pairs_seen": loss_ranker.pairs_seen,
            },
            "latency": {
                "holdout_pairwise_accuracy": latency_ranker.holdout_accuracy,
                "pairs_seen": latency_ranker.pairs_seen,
            },
        },
        "importance": {
            "loss": [[name, score] for name, score in loss_importance],
            "latency": [[name, score] for name, score in latency_importance],
        },
        "pruned_features": {
            name: (list(v) if isinstance(v, tuple) else v) for name, v in pruned.frozen.items()
        },
        "evolution": {
            "latency_filter_source": budgets.latency_mode,
            "trajectory": [[gen, val] for gen, val in evo.trajectory],
            "warnings": evo.warnings,
        },
        "final": {
            "config": final_config.to_text(),
            "per_layer_attention": {
                "encoder": [str(a) for a in final_config.enc_attn_types],
                "decoder": [str(a) for a in final_config.resolved_dec_attn_types()],
            },
            "metrics": final_metrics,
            "flops_total": final_cost.total_flops,
            "flops_at_n": budgets.flops_n,
            "params": final_cost.params,
            "flops_all_softmax_override": soft_cost.total_flops,
            "flops_all_linear_override": linear_cost.total_flops,
        },
        "candidates_file": "candidates.jsonl",
    }
    with open(stage_path("report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    _write_csvs(out_dir, records, loss_importance, latency_importance, evo)
    say(f"done: report written to {stage_path('report.json')}")
    return report


def _write_csvs(out_dir, records, loss_importance, latency_importance, evo):
    with open(os.path.join(out_dir, "candidates.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["# schema=mixnas-candidates-csv-v1"])
        w.writerow(["index", "loss", "latency_ms", "flops", "params"])
        for i, r in enumerate(records):
            w.writerow([i, r.loss, r.latency_ms, r.flops, r.params])
    with open(os.path.join(out_dir, "importance.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["# schema=mixnas-importance-csv-v1"])
        w.writerow(["target", "feature", "importance"])
        for name, score in loss_importance:
            w.writerow(["loss", name, score])
        for name, score in latency_importance:
            w.writerow(["latency", name, score])
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["# schema=mixnas-trajectory-csv-v1"])
        w.writerow(["generation", "best_predicted_loss"])
        for gen, val in evo.trajectory:
            w.writerow([gen, val])
