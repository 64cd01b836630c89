"""Weight-sharing supernet: train once, evaluate any subnet by slicing.

One uniformly sampled architecture is trained per step (single-path
scheme). Subnets read the leading rows/columns of the shared tensors, so
an update only ever touches the regions its sampled config used; all
other entries stay bit-identical.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import model as M
from .config import ArchConfig, AttentionKind, TaskShape
from .model import AdamState, ModelWeights, TrainHParams, TrainingDiverged, build, train_step
from .space import SearchSpace


def maximal_config(space: SearchSpace) -> ArchConfig:
    """A valid config at the largest dimensions of every feature.

    Head counts are picked as the largest domain value dividing the
    maximal embedding (attention kinds never affect shapes).
    """
    a = space.maximal_assignment()
    for f in space.features:
        if f.divides is None or f.scope != "per-layer":
            continue
        emb = int(a[f.divides])
        valid = [v for v in f.domain if emb % int(v) == 0]
        if not valid:
            raise ValueError(f"no head count in {f.domain} divides {emb}")
        best = max(valid)
        a[f.name] = tuple(best for _ in a[f.name])
    return space._assignment_to_config(a).validate()


def _seeded(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag)))


def _train_loop(
    weights: ModelWeights,
    shape: TaskShape,
    config_for_step: Callable[[np.random.Generator], ArchConfig],
    task,
    steps: int,
    seed: int,
    hp: TrainHParams,
    batch_size: int,
    log_every: int = 0,
) -> list[float]:
    stream = task.train_stream(batch_size, seed=seed)
    cfg_rng = _seeded(seed, 0x5B)
    opt = AdamState(weights)
    losses: list[float] = []
    for step in range(steps):
        cfg = config_for_step(cfg_rng)
        batch = next(stream)
        try:
            losses.append(train_step(weights, cfg, shape, batch, opt, hp))
        except TrainingDiverged as exc:
            exc.config = cfg
            raise
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            print(f"  step {step + 1}/{steps}  loss {recent:.4f}")
    return losses


def train_supernet(
    space: SearchSpace,
    task,
    steps: int,
    seed: int,
    hp: TrainHParams | None = None,
    batch_size: int = 8,
    log_every: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """Train shared weights over uniformly sampled subnets."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    hp = hp or TrainHParams()
    shape = task.shape()
    weights = build(maximal_config(space), shape, seed)
    losses = _train_loop(
        weights, shape, lambda rng: space.sample(rng), task, steps, seed, hp, batch_size,
        log_every=log_every,
    )
    return weights, losses


def train_standalone(
    config: ArchConfig,
    task,
    steps: int,
    seed: int,
    hp: TrainHParams | None = None,
    batch_size: int = 8,
    log_every: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """Train one architecture from scratch (exact-size tensors)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    hp = hp or TrainHParams()
    shape = task.shape()
    weights = build(config, shape, seed)
    losses = _train_loop(
        weights, shape, lambda rng: config, task, steps, seed, hp, batch_size,
        log_every=log_every,
    )
    return weights, losses


def slice_weights(weights: ModelWeights, config: ArchConfig) -> ModelWeights:
    """Copy the exact-size parameter set a config reads from shared weights."""
    shape = weights.shape
    sized = build(config, shape, seed=0)  # shapes only; values overwritten
    out = {}
    for name, arr in sized.tensors.items():
        region = tuple(slice(0, d) for d in arr.shape)
        out[name] = weights.tensors[name][region].copy()
    return ModelWeights(out, config, shape)


def evaluate_subnet(
    weights: ModelWeights,
    config: ArchConfig,
    task,
    split: str = "eval",
    batch_size: int = 16,
    max_batches: int | None = None,
) -> float:
    """Deterministic mean loss of a subnet on the fixed eval split."""
    return evaluate_metrics(weights, config, task, split, batch_size, max_batches)["loss"]


def evaluate_metrics(
    weights: ModelWeights,
    config: ArchConfig,
    task,
    split: str = "eval",
    batch_size: int = 16,
    max_batches: int | None = None,
) -> dict:
    """Loss and token/example accuracy on an eval split; no weight updates."""
    from . import tensor as T

    shape = task.shape()
    total_nll = 0.0
    total_correct = 0
    total_count = 0
    if task.kind == "seq2seq":
        batches = task.eval_batches(batch_size)
    else:
        batches = task.eval_batches(batch_size, split="test" if split in ("eval", "test") else split)
    for i, batch in enumerate(batches):
        if max_batches is not None and i >= max_batches:
            break
        if task.kind == "seq2seq":
            src, tgt_in, tgt_out = batch
            logits = M.forward(weights, config, shape, src, tgt_in)
            targets = tgt_out.reshape(-1)
        else:
            feats, labels = batch
            logits = M.forward(weights, config, shape, feats)
            targets = np.asarray(labels)
        nll = T.cross_entropy(logits, targets).item()
        preds = logits.data.argmax(axis=1)
        total_nll += nll * len(targets)
        total_correct += int((preds == targets).sum())
        total_count += len(targets)
    if total_count == 0:
        raise ValueError("empty evaluation split")
    return {
        "loss": total_nll / total_count,
        "accuracy": total_correct / total_count,
        "n": total_count,
    }
