"""Pairwise-ranking surrogate, permutation feature importance, space pruning.

Ranking candidate architectures is cast as binary classification of
ordered pairs: a pair is correctly ordered when the better (lower-target)
member scores higher. The scorer is linear in the feature vector and is
trained with a hinge loss on feature differences, which makes
antisymmetry exact and leaves the fit invariant under any order-preserving
rescaling of the targets (labels depend only on comparisons).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .records import CandidateRecord
from .space import SearchSpace

MAX_PAIRS = 100_000
HOLDOUT_FRACTION = 0.2


class InsufficientDataError(ValueError):
    """Fewer than two distinct target values: no pairs to rank."""


@dataclass
class RankerModel:
    """Linear scorer over feature vectors; higher score = better (lower target)."""

    weights: np.ndarray
    target: str
    seed: int
    pairs_seen: int
    holdout_accuracy: float
    feature_columns: dict[str, slice] | None = None
    feature_order: tuple[str, ...] = ()

    def score(self, features: np.ndarray) -> float:
        return float(self.weights @ np.asarray(features, dtype=np.float64))

    def score_many(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights


def _target_values(records: list[CandidateRecord], target: str) -> np.ndarray:
    attr = {"loss": "loss", "latency": "latency_ms", "flops": "flops"}.get(target)
    if attr is None:
        raise ValueError(f"unknown ranking target {target!r}")
    return np.array([getattr(r, attr) for r in records], dtype=np.float64)


def _oriented_pairs(targets: np.ndarray) -> list[tuple[int, int]]:
    """All (better, worse) index pairs in canonical index order; ties skipped."""
    n = len(targets)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if targets[i] < targets[j]:
                pairs.append((i, j))
            elif targets[j] < targets[i]:
                pairs.append((j, i))
    return pairs


def _pair_split(
    records: list[CandidateRecord], target: str, seed: int
) -> tuple[np.ndarray, list[tuple[int, int]], list[tuple[int, int]]]:
    targets = _target_values(records, target)
    if len(np.unique(targets)) < 2:
        raise InsufficientDataError(
            f"need at least 2 records with distinct {target} values, "
            f"got {len(records)} records with {len(np.unique(targets))} distinct"
        )
    pairs = _oriented_pairs(targets)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9A1E)))
    if len(pairs) > MAX_PAIRS:
        keep = rng.choice(len(pairs), size=MAX_PAIRS, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    perm = rng.permutation(len(pairs))
    n_hold = int(HOLDOUT_FRACTION * len(pairs))
    hold_idx = set(perm[:n_hold].tolist())
    train = [p for i, p in enumerate(pairs) if i not in hold_idx]
    hold = [p for i, p in enumerate(pairs) if i in hold_idx]
    if not train:
        train, hold = pairs, []
    return targets, train, hold


def _pair_diffs(records, pairs) -> np.ndarray:
    feats = np.stack([r.features for r in records])
    if not pairs:
        return np.zeros((0, feats.shape[1]))
    better = np.array([p[0] for p in pairs])
    worse = np.array([p[1] for p in pairs])
    return feats[better] - feats[worse]


def pairwise_accuracy(weights: np.ndarray, diffs: np.ndarray) -> float:
    if len(diffs) == 0:
        return 1.0
    return float((diffs @ weights > 0).mean())


def fit_ranker(
    records: list[CandidateRecord],
    target: str,
    seed: int,
    space: SearchSpace | None = None,
    iterations: int = 400,
    lr: float = 0.5,
    l2: float = 1e-4,
) -> RankerModel:
    """Fit the linear pairwise scorer with full-batch subgradient descent.

    The pair list is canonically ordered before splitting, so the fitted
    weights do not depend on how callers enumerate candidate pairs.
    """
    targets, train_pairs, hold_pairs = _pair_split(records, target, seed)
    d_train = _pair_diffs(records, train_pairs)
    d_hold = _pair_diffs(records, hold_pairs)

    w = np.zeros(d_train.shape[1])
    n = len(d_train)
    for _ in range(iterations):
        margins = d_train @ w
        active = margins < 1.0
        grad = -(d_train[active].sum(axis=0)) / n + l2 * w
        w -= lr * grad
    model = RankerModel(
        weights=w,
        target=target,
        seed=seed,
        pairs_seen=len(train_pairs),
        holdout_accuracy=pairwise_accuracy(w, d_hold),
        feature_columns=space.feature_columns() if space is not None else None,
        feature_order=tuple(f.name for f in space.features) if space is not None else (),
    )
    return model


def feature_importance(
    model: RankerModel,
    records: list[CandidateRecord],
    seed: int | None = None,
) -> list[tuple[str, float]]:
    """Permutation importance on held-out pairwise accuracy.

    Each feature's columns are shuffled across records with one shared
    permutation; importance is the resulting drop in held-out accuracy.
    The output is every feature name, sorted by importance with ties
    broken by declaration order.
    """
    if model.feature_columns is None:
        raise ValueError("model was fitted without a search space; importance unavailable")
    seed = model.seed if seed is None else seed
    _, _, hold_pairs = _pair_split(records, model.target, model.seed)
    if not hold_pairs:
        raise InsufficientDataError("no held-out pairs available for importance")
    feats = np.stack([r.features for r in records])
    base_diffs = _pair_diffs(records, hold_pairs)
    baseline = pairwise_accuracy(model.weights, base_diffs)
    better = np.array([p[0] for p in hold_pairs])
    worse = np.array([p[1] for p in hold_pairs])

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1199)))
    scores: list[tuple[str, float]] = []
    for name in model.feature_order:
        cols = model.feature_columns[name]
        perm = rng.permutation(len(records))
        shuffled = feats.copy()
        shuffled[:, cols] = feats[perm][:, cols]
        diffs = shuffled[better] - shuffled[worse]
        scores.append((name, baseline - pairwise_accuracy(model.weights, diffs)))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i][1], i))
    return [scores[i] for i in order]


def prune_space(
    space: SearchSpace,
    importance: list[tuple[str, float]],
    keep_k: int,
    best_config,
) -> SearchSpace:
    """Keep the keep_k most important features searchable; freeze the rest
    to the values they take in the best candidate seen so far."""
    if not (1 <= keep_k <= len(space.features)):
        raise ValueError(f"keep_k must be in [1, {len(space.features)}], got {keep_k}")
    ranked = [name for name, _ in importance]
    missing = [f.name for f in space.features if f.name not in ranked]
    if missing:
        raise ValueError(f"importance list missing features: {missing}")
    keep = set(ranked[:keep_k])
    assignment = space._config_to_assignment(best_config)
    frozen = {name: assignment[name] for name in ranked[keep_k:]}
    del keep  # clarity: everything not frozen stays searchable
    return space.freeze(frozen)
