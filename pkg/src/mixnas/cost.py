"""Analytic FLOPS and parameter accounting, plus the wall-clock harness.

Counting conventions (all integer arithmetic, so totals are exact):

* a multiply-accumulate is 2 FLOPs; matmul [a x b][b x c] costs 2abc
* softmax costs 5 FLOPs per attended element (exp, subtract, sum share,
  divide, max bookkeeping); causal softmax attends N(N+1)/2 pairs
* ReLU costs 1 FLOP per element, layer norm 6 per element
* linear (cosine-reweighted) attention is counted from its linear-time
  decomposition: two accumulator pairs, each built in 2*N*d_h^2 and read
  out in 2*N*d_h^2 per head, plus the normalizer accumulators

Absolute magnitudes therefore depend on these conventions; ratios and
orderings between architectures do not, and only those are asserted
against published numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ArchConfig, AttentionKind, TaskShape

COST_SCHEMA = "mixnas-cost-v1"

# defaults used when estimating at published translation dimensions; the
# shared-BPE vocabulary assumption is documented in the README
DEFAULT_VOCAB = 32768
DEFAULT_CLASSES = 10
DEFAULT_PATCH_DIM = 48

SOFTMAX_FLOPS_PER_ELEMENT = 5
RELU_FLOPS_PER_ELEMENT = 1
NORM_FLOPS_PER_ELEMENT = 6


@dataclass
class CostReport:
    """FLOPS breakdown for one forward pass at fixed sequence lengths."""

    total_flops: int
    breakdown: dict[str, int]
    params: int
    n_src: int
    n_tgt: int

    def __post_init__(self):
        if self.total_flops != sum(self.breakdown.values()):
            raise ValueError("breakdown does not sum to total")

    def attention_core_flops(self) -> int:
        return sum(v for k, v in self.breakdown.items() if k.endswith(".core"))

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": COST_SCHEMA,
                "total_flops": self.total_flops,
                "breakdown": self.breakdown,
                "params": self.params,
                "n_src": self.n_src,
                "n_tgt": self.n_tgt,
            },
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["schema", COST_SCHEMA])
        writer.writerow(["n_src", self.n_src])
        writer.writerow(["n_tgt", self.n_tgt])
        writer.writerow(["params", self.params])
        writer.writerow(["component", "flops"])
        for name, flops in self.breakdown.items():
            writer.writerow([name, flops])
        writer.writerow(["total", self.total_flops])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        rows = list(csv.reader(io.StringIO(text)))
        header = dict(rows[:4])
        if header.get("schema") != COST_SCHEMA:
            raise ValueError(f"unexpected cost schema {header.get('schema')!r}")
        body = rows[5:]  # after the component header row
        breakdown = {}
        total = None
        for name, flops in body:
            if name == "total":
                total = int(flops)
            else:
                breakdown[name] = int(flops)
        return cls(
            total_flops=total,
            breakdown=breakdown,
            params=int(header["params"]),
            n_src=int(header["n_src"]),
            n_tgt=int(header["n_tgt"]),
        )


def _softmax_core(n_q: int, n_k: int, emb: int, heads: int, causal: bool) -> int:
    pairs = n_q * (n_q + 1) // 2 if causal else n_q * n_k
    scores = 2 * pairs * emb
    scale_ = pairs * heads
    soft = SOFTMAX_FLOPS_PER_ELEMENT * pairs * heads
    weighted = 2 * pairs * emb
    return scores + scale_ + soft + weighted


def _linear_core(n_q: int, n_k: int, emb: int, heads: int) -> int:
    d_h = emb // heads
    feature_map = RELU_FLOPS_PER_ELEMENT * (n_q + n_k) * emb
    reweight = 2 * (n_q + n_k) * emb  # cos and sin row scalings
    build = 4 * n_k * d_h * emb  # two accumulator pairs, 2*N*d_h^2 per head each
    readout = 4 * n_q * d_h * emb
    z_build = 2 * n_k * emb
    z_readout = 4 * n_q * emb
    combine = n_q * emb + n_q * heads
    divide = n_q * emb + n_q * heads
    return feature_map + reweight + build + readout + z_build + z_readout + combine + divide


def _attn_core(kind: AttentionKind, n_q: int, n_k: int, emb: int, heads: int, causal: bool) -> int:
    if kind == AttentionKind.SOFTMAX:
        return _softmax_core(n_q, n_k, emb, heads, causal)
    return _linear_core(n_q, n_k, emb, heads)


def _self_proj(n: int, emb: int) -> int:
    return 8 * n * emb * emb + 4 * n * emb


def _cross_proj(n_q: int, n_k: int, enc_dim: int, dec_dim: int, connect: int) -> int:
    q_out = 4 * n_q * dec_dim * dec_dim + 2 * n_q * dec_dim
    kv = 4 * n_k * enc_dim * dec_dim + 2 * n_k * dec_dim
    averaging = connect * n_k * enc_dim  # sum + scale of the attended encoder layers
    return q_out + kv + averaging


def _ffn(n: int, emb: int, ffn_dim: int) -> int:
    mats = 4 * n * emb * ffn_dim
    act = RELU_FLOPS_PER_ELEMENT * n * ffn_dim
    biases = n * ffn_dim + n * emb
    return mats + act + biases


def estimate_flops(
    config: ArchConfig,
    n_src: int,
    n_tgt: int = 0,
    shape: TaskShape | None = None,
) -> CostReport:
    """Closed-form FLOPS of one forward pass.

    ``n_src`` is the encoder length; ``n_tgt`` the decoder length (ignored
    for encoder-only configs). ``shape`` supplies vocabulary /
    classification head sizes; defaults assume the shared-BPE translation
    setting for seq2seq configs.
    """
    config.validate()
    if n_src < 1 or (config.dec_layers > 0 and n_tgt < 1):
        raise ValueError("sequence lengths must be positive")
    if shape is None:
        if config.dec_layers > 0:
            shape = TaskShape("seq2seq", vocab_size=DEFAULT_VOCAB)
        else:
            shape = TaskShape(
                "classification", n_classes=DEFAULT_CLASSES, patch_dim=DEFAULT_PATCH_DIM
            )

    br: dict[str, int] = {}
    e = config.enc_emb_dim
    norms = 0

    if shape.kind == "seq2seq":
        br["embeddings"] = 2 * n_src * e + 2 * n_tgt * config.dec_emb_dim
    else:
        br["embeddings"] = 2 * n_src * shape.patch_dim * e + 2 * n_src * e

    for i in range(config.enc_layers):
        br[f"enc.{i}.attn.proj"] = _self_proj(n_src, e)
        br[f"enc.{i}.attn.core"] = _attn_core(
            config.enc_attn_types[i], n_src, n_src, e, config.enc_heads[i], causal=False
        )
        br[f"enc.{i}.ffn"] = _ffn(n_src, e, config.enc_ffn_dims[i])
        norms += 2 * NORM_FLOPS_PER_ELEMENT * n_src * e + 2 * n_src * e
    norms += NORM_FLOPS_PER_ELEMENT * n_src * e  # final encoder norm

    if config.dec_layers > 0:
        d = config.dec_emb_dim
        dec_self = config.resolved_dec_attn_types()
        dec_cross = config.resolved_ende_attn_types()
        for i in range(config.dec_layers):
            br[f"dec.{i}.self.proj"] = _self_proj(n_tgt, d)
            br[f"dec.{i}.self.core"] = _attn_core(
                dec_self[i], n_tgt, n_tgt, d, config.dec_heads[i], causal=True
            )
            br[f"dec.{i}.cross.proj"] = _cross_proj(n_tgt, n_src, e, d, config.ende_connect)
            br[f"dec.{i}.cross.core"] = _attn_core(
                dec_cross[i], n_tgt, n_src, d, config.ende_heads[i], causal=False
            )
            br[f"dec.{i}.ffn"] = _ffn(n_tgt, d, config.dec_ffn_dims[i])
            norms += 3 * NORM_FLOPS_PER_ELEMENT * n_tgt * d + 3 * n_tgt * d
        norms += NORM_FLOPS_PER_ELEMENT * n_tgt * d
        br["head"] = 2 * n_tgt * d * shape.vocab_size + n_tgt * shape.vocab_size
    else:
        br["head"] = n_src * e + 2 * e * shape.n_classes + shape.n_classes

    br["norms"] = norms
    total = sum(br.values())
    return CostReport(
        total_flops=total,
        breakdown=br,
        params=parameter_count(config, shape),
        n_src=n_src,
        n_tgt=n_tgt if config.dec_layers > 0 else 0,
    )


def parameter_count(config: ArchConfig, shape: TaskShape) -> int:
    """Closed-form parameter count; must equal the built model's tensor sizes.

    Attention kinds are parameter-free swaps over shared Q/K/V/O
    projections, so the count is independent of attention types.
    """
    config.validate()
    e = config.enc_emb_dim
    total = 0
    if shape.kind == "seq2seq":
        total += shape.vocab_size * e  # source embedding
    else:
        total += shape.patch_dim * e + e  # patch projection + bias
    for i in range(config.enc_layers):
        total += 4 * (e * e + e)  # q, k, v, o
        total += e * config.enc_ffn_dims[i] + config.enc_ffn_dims[i]
        total += config.enc_ffn_dims[i] * e + e
        total += 2 * 2 * e  # two layer norms
    total += 2 * e  # final encoder norm

    if config.dec_layers > 0:
        d = config.dec_emb_dim
        total += shape.vocab_size * d  # target embedding
        for i in range(config.dec_layers):
            total += 4 * (d * d + d)  # self attention
            total += 2 * d * d + 2 * e * d + 4 * d  # cross: k/v project encoder width
            total += d * config.dec_ffn_dims[i] + config.dec_ffn_dims[i]
            total += config.dec_ffn_dims[i] * d + d
            total += 3 * 2 * d
        total += 2 * d
        total += d * shape.vocab_size + shape.vocab_size  # output head
    else:
        total += e * shape.n_classes + shape.n_classes
    return total


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

_benchmark_lock = threading.Lock()


@dataclass
class LatencyReport:
    median_ms: float
    dispersion: float  # IQR / median
    samples_ms: list[float] = field(default_factory=list)

    @property
    def unstable(self) -> bool:
        return self.dispersion > 0.2


def measure_callable(fn: Callable[[], object], repeats: int, warmup: int = 2) -> LatencyReport:
    """Median wall-clock of fn over repeats, after warmup runs.

    Runs under a global lock so concurrent benchmarks cannot inflate each
    other's dispersion.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    with _benchmark_lock:
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - start) * 1000.0)
    med = statistics.median(samples)
    q1, q3 = np.percentile(samples, [25, 75])
    dispersion = float((q3 - q1) / med) if med > 0 else 0.0
    return LatencyReport(median_ms=med, dispersion=dispersion, samples_ms=samples)


def measure_latency(
    config: ArchConfig,
    weights,
    n: int,
    repeats: int = 5,
    shape: TaskShape | None = None,
    seed: int = 0,
) -> LatencyReport:
    """Wall-clock median of one batch-1 forward pass at sequence length n."""
    from . import model as model_mod  # local import: cost stays importable standalone

    if shape is None:
        shape = model_mod.infer_shape_from_weights(weights, config)
    rng = np.random.default_rng(seed)
    if shape.kind == "seq2seq":
        src = rng.integers(3, shape.vocab_size, size=(1, n))
        tgt = rng.integers(3, shape.vocab_size, size=(1, max(1, n)))

        def run():
            model_mod.forward(weights, config, shape, src, tgt)

    else:
        feats = rng.standard_normal((1, n, shape.patch_dim))

        def run():
            model_mod.forward(weights, config, shape, feats)

    return measure_callable(run, repeats=repeats)


def latency_filter(records: list) -> list:
    """Drop the fastest and slowest floor(0.1 * P) records by latency.

    Survivors keep their original relative order. Ties are broken by
    original index so the result is deterministic.
    """
    if not records:
        raise ValueError("latency_filter needs a non-empty list")
    p = len(records)
    cut = math.floor(0.1 * p)
    if cut == 0:
        return list(records)
    order = sorted(range(p), key=lambda i: (records[i].latency_ms, i))
    keep = sorted(order[cut : p - cut])
    return [records[i] for i in keep]
