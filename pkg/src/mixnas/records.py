"""Candidate records: one evaluated architecture with its measurements.

Stored as line-delimited JSON; each line carries a schema tag so files
survive format evolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .config import ArchConfig

CANDIDATE_SCHEMA = "mixnas-candidate-v1"


@dataclass
class CandidateRecord:
    config: ArchConfig
    features: np.ndarray
    loss: float
    latency_ms: float
    flops: float
    params: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        for name in ("loss", "latency_ms", "flops"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {val}")

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "schema": CANDIDATE_SCHEMA,
                "config": self.config.to_text(),
                "features": self.features.tolist(),
                "loss": self.loss,
                "latency_ms": self.latency_ms,
                "flops": self.flops,
                "params": self.params,
            }
        )

    @classmethod
    def from_json_line(cls, line: str) -> "CandidateRecord":
        obj = json.loads(line)
        if obj.get("schema") != CANDIDATE_SCHEMA:
            raise ValueError(f"unexpected candidate schema {obj.get('schema')!r}")
        return cls(
            config=ArchConfig.from_text(obj["config"]),
            features=np.array(obj["features"], dtype=np.float64),
            loss=float(obj["loss"]),
            latency_ms=float(obj["latency_ms"]),
            flops=float(obj["flops"]),
            params=int(obj["params"]),
        )


def save_candidates(path, records: list[CandidateRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json_line() + "\n")


def load_candidates(path) -> list[CandidateRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(CandidateRecord.from_json_line(line))
    return out
