"""Tournament-selection evolutionary search with age-based eviction.

Each generation: the population passes the published 10 percent latency
trim (on predicted latency) to form the tournament pool, the pool's best
candidate by predicted loss is mutated into a child, and the oldest
non-elite member is evicted. The best candidate ever seen is never
evicted, which makes the best-so-far trajectory monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ArchConfig
from .cost import latency_filter
from .space import SearchSpace


@dataclass
class _Member:
    config: ArchConfig
    loss: float
    latency_ms: float
    birth: int


@dataclass
class EvolutionResult:
    best: list[tuple[ArchConfig, float]]  # unique configs, ascending predicted loss
    trajectory: list[tuple[int, float]]  # (generation, best predicted loss so far)
    warnings: list[str] = field(default_factory=list)

    @property
    def best_config(self) -> ArchConfig:
        return self.best[0][0]


def evolve(
    space: SearchSpace,
    predict_loss: Callable[[ArchConfig], float],
    predict_latency: Callable[[ArchConfig], float] | None = None,
    population: int = 16,
    generations: int = 50,
    tournament_k: int = 4,
    mutation_rate: float = 0.3,
    seed: int = 0,
    top_k: int = 8,
) -> EvolutionResult:
    """Regularized evolution over a search space under a surrogate objective.

    ``predict_loss`` scores a config (lower is better). When
    ``predict_latency`` is given, each generation's tournament pool first
    drops the predicted-fastest and predicted-slowest 10 percent.
    """
    if population < 2:
        raise ValueError("population must be >= 2")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7E7)))
    warnings: list[str] = []

    def make(cfg: ArchConfig, birth: int) -> _Member:
        latency = predict_latency(cfg) if predict_latency else 0.0
        return _Member(cfg, float(predict_loss(cfg)), float(latency), birth)

    pop: list[_Member] = [make(space.sample(rng), 0) for _ in range(population)]
    seen: dict[str, _Member] = {m.config.to_text(): m for m in pop}
    best = min(pop, key=lambda m: m.loss)
    trajectory: list[tuple[int, float]] = [(0, best.loss)]

    for gen in range(1, generations + 1):
        pool = pop
        if predict_latency is not None:
            survivors = latency_filter(pop)
            if survivors:
                pool = survivors
            else:
                warnings.append(f"generation {gen}: latency filter emptied the population")
        k = min(tournament_k, len(pool))
        contenders = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
        winner = min(contenders, key=lambda m: (m.loss, m.birth))
        child = make(space.mutate(winner.config, rng, mutation_rate), gen)
        pop.append(child)
        seen.setdefault(child.config.to_text(), child)
        if child.loss < best.loss:
            best = child
        # age-based eviction, never the incumbent best
        oldest_first = sorted(range(len(pop)), key=lambda i: pop[i].birth)
        for idx in oldest_first:
            if pop[idx] is not best:
                pop.pop(idx)
                break
        trajectory.append((gen, best.loss))

    ranked = sorted(seen.values(), key=lambda m: (m.loss, m.birth))
    return EvolutionResult(
        best=[(m.config, m.loss) for m in ranked[:top_k]],
        trajectory=trajectory,
        warnings=warnings,
    )
