"""Attention kernels: quadratic softmax and linear-time kernelized variants.

All kernels take query/key/value matrices shaped [N x d] (one head of one
sequence) and compose tape-aware primitives from :mod:`mixnas.tensor`, so
gradients come for free. The linear paths never materialize an N x N
array: the non-causal forms aggregate ``phi(K)^T V`` (a d x d matrix)
first, and the causal form runs a fused prefix-sum kernel whose working
set stays O(N*d).

The cosine-reweighted kernel decomposes its position factor with the
product-to-sum identity cos(a-b) = cos a cos b + sin a sin b, giving two
accumulator pairs that each follow the plain linearized form.
"""

from __future__ import annotations

import math
import tracemalloc
from contextlib import contextmanager
from typing import Callable, NamedTuple

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    matmul,
    record_op,
    relu,
    row_divide,
    row_scale,
    scale,
    softmax_rows,
    transpose,
)

EPS_DEFAULT = 1e-6


class AttentionResult(NamedTuple):
    """Kernel output plus normalization metadata.

    ``degenerate`` is set when the pre-epsilon normalizer is below eps for
    every query row (e.g. an all-negative Q under the ReLU feature map);
    the returned output is the eps-stabilized value.
    """

    output: Tensor
    degenerate: bool


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"Q and K feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K and V sequence lengths differ: {k.shape} vs {v.shape}")


def causal_mask(n_q: int, n_k: int) -> np.ndarray:
    """0/1 mask allowing position i to attend to positions j <= i."""
    return (np.arange(n_k)[None, :] <= np.arange(n_q)[:, None]).astype(np.float64)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V; masked entries get weight exactly 0 when causal."""
    _check_qkv(q, k, v)
    d = q.shape[1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    mask = causal_mask(q.shape[0], k.shape[0]) if causal else None
    weights = softmax_rows(scores, mask=mask)
    return matmul(weights, v)


def _ones_column(n: int) -> Tensor:
    return Tensor(np.ones((n, 1)))


def linear_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    phi: Callable[[Tensor], Tensor] = relu,
    causal: bool = False,
    eps: float = EPS_DEFAULT,
    normalize: bool = True,
) -> AttentionResult:
    """Kernelized attention phi(Q) (phi(K)^T V), row-normalized.

    phi must be elementwise nonnegative so the normalizer is a sum of
    nonnegative weights; ReLU is the supported default. Cost is
    O(N * d * d') and no N x N array is ever formed.
    """
    _check_qkv(q, k, v)
    if causal:
        return causal_linear_attention(q, k, v, phi=phi, eps=eps, normalize=normalize)
    qp = phi(q)
    kp = phi(k)
    kt = transpose(kp)
    num = matmul(qp, matmul(kt, v))
    den = matmul(qp, matmul(kt, _ones_column(k.shape[0])))
    if not normalize:
        return AttentionResult(num, bool((den.data < eps).all()))
    out = row_divide(num, den, eps=eps)
    return AttentionResult(out, bool((den.data < eps).all()))


def _cos_sin_positions(n: int, m: int) -> tuple[Tensor, Tensor]:
    # column vectors cos(pi*i / (2m)), sin(pi*i / (2m)) for i = 0..n-1
    ang = (math.pi / 2.0) * (np.arange(n, dtype=np.float64) / m)
    return Tensor(np.cos(ang)[:, None]), Tensor(np.sin(ang)[:, None])


def cosformer_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    causal: bool = False,
    eps: float = EPS_DEFAULT,
    normalize: bool = True,
) -> AttentionResult:
    """ReLU-kernel linear attention with cosine position reweighting.

    Query i and key j are reweighted by cos(pi/2 * (i-j)/M) with
    M = max(N_q, N_k); since |i-j| < M the factor is strictly positive.
    The identity cos(x-y) = cos x cos y + sin x sin y splits the weighted
    sum into two linearized accumulator pairs, keeping the cost linear in
    sequence length.
    """
    _check_qkv(q, k, v)
    n_q, n_k = q.shape[0], k.shape[0]
    m = max(n_q, n_k)
    qp = relu(q)
    kp = relu(k)
    qcosw, qsinw = _cos_sin_positions(n_q, m)
    kcosw, ksinw = _cos_sin_positions(n_k, m)
    qc, qs = row_scale(qp, qcosw), row_scale(qp, qsinw)
    kc, ks = row_scale(kp, kcosw), row_scale(kp, ksinw)

    if causal:
        num = add(causal_dot(qc, kc, v), causal_dot(qs, ks, v))
        ones = _ones_column(n_k)
        den = add(causal_dot(qc, kc, ones), causal_dot(qs, ks, ones))
    else:
        num = add(matmul(qc, matmul(transpose(kc), v)), matmul(qs, matmul(transpose(ks), v)))
        ones = _ones_column(n_k)
        den = add(
            matmul(qc, matmul(transpose(kc), ones)),
            matmul(qs, matmul(transpose(ks), ones)),
        )
    degenerate = bool((den.data < eps).all())
    if not normalize:
        return AttentionResult(num, degenerate)
    return AttentionResult(row_divide(num, den, eps=eps), degenerate)


def causal_linear_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    phi: Callable[[Tensor], Tensor] = relu,
    eps: float = EPS_DEFAULT,
    normalize: bool = True,
) -> AttentionResult:
    """Prefix-sum linear attention: O_i = phi(Q_i) S_i / (phi(Q_i) z_i + eps)

    with S_i = sum_{j<=i} phi(K_j)^T V_j and z_i = sum_{j<=i} phi(K_j),
    evaluated by the fused cumulative kernel in O(N * d^2) time.
    """
    _check_qkv(q, k, v)
    if q.shape[0] != k.shape[0]:
        raise ContractError("causal attention requires equal query/key lengths")
    qp = phi(q)
    kp = phi(k)
    num = causal_dot(qp, kp, v)
    den = causal_dot(qp, kp, _ones_column(k.shape[0]))
    degenerate = bool((den.data < eps).all())
    if not normalize:
        return AttentionResult(num, degenerate)
    return AttentionResult(row_divide(num, den, eps=eps), degenerate)


def causal_dot(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Fused causal trilinear kernel: out_i = q_i . sum_{j<=i} k_j v_j^T.

    Forward and backward iterate over feature channels with reused
    buffers, so the working set stays O(N*d) instead of the O(N*d^2)
    a materialized cumulative outer-product stack would need.
    """
    if q.shape != k.shape:
        raise ShapeError(f"causal_dot: q/k shapes differ {q.shape} vs {k.shape}")
    if q.shape[0] != v.shape[0]:
        raise ShapeError("causal_dot: sequence lengths differ")
    n, dk = q.shape
    dv = v.shape[1]
    qd, kd, vd = q.data, k.data, v.data

    out = np.zeros((n, dv))
    buf = np.empty((n, dv))
    for c in range(dk):
        np.multiply(vd, kd[:, c : c + 1], out=buf)
        np.cumsum(buf, axis=0, out=buf)
        np.multiply(buf, qd[:, c : c + 1], out=buf)
        out += buf
    result = Tensor(out)

    def bwd(g):
        dq = np.empty((n, dk))
        dk_ = np.empty((n, dk))
        dv_ = np.zeros((n, dv))
        fwd_buf = np.empty((n, dv))
        rev_buf = np.empty((n, dv))
        for c in range(dk):
            # dq[:, c] = sum_e g * cumsum(k_c * v)
            np.multiply(vd, kd[:, c : c + 1], out=fwd_buf)
            np.cumsum(fwd_buf, axis=0, out=fwd_buf)
            np.multiply(fwd_buf, g, out=fwd_buf)
            dq[:, c] = fwd_buf.sum(axis=1)
            # R_c = reverse-cumsum of q_c * g; feeds both dk and dv
            np.multiply(g, qd[:, c : c + 1], out=rev_buf)
            rev_buf[:] = np.cumsum(rev_buf[::-1], axis=0)[::-1]
            np.multiply(rev_buf, vd, out=fwd_buf)
            dk_[:, c] = fwd_buf.sum(axis=1)
            np.multiply(rev_buf, kd[:, c : c + 1], out=rev_buf)
            dv_ += rev_buf
        return dq, dk_, dv_

    return record_op(result, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# quadratic reference forms (oracles) and the allocation-counting hook
# ---------------------------------------------------------------------------


def quadratic_linear_attention_reference(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool = False,
    eps: float = EPS_DEFAULT,
) -> np.ndarray:
    """O(N^2) ReLU-kernel attention computed via the explicit weight matrix."""
    qp = np.maximum(q, 0.0)
    kp = np.maximum(k, 0.0)
    w = qp @ kp.T
    if causal:
        w = w * causal_mask(q.shape[0], k.shape[0])
    return (w @ v) / (w.sum(axis=1, keepdims=True) + eps)


def quadratic_cosformer_reference(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool = False,
    eps: float = EPS_DEFAULT,
) -> np.ndarray:
    """Double-loop evaluation of the cosine-reweighted form (test oracle)."""
    n_q, n_k = q.shape[0], k.shape[0]
    m = max(n_q, n_k)
    qp = np.maximum(q, 0.0)
    kp = np.maximum(k, 0.0)
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        num = np.zeros(v.shape[1])
        den = 0.0
        for j in range(n_k):
            if causal and j > i:
                continue
            w = float(qp[i] @ kp[j]) * math.cos((math.pi / 2.0) * (i - j) / m)
            num += w * v[j]
            den += w
        out[i] = num / (den + eps)
    return out


class AllocationReport:
    """Peak traced allocation (bytes) over a measured region."""

    def __init__(self):
        self.peak_bytes = 0


@contextmanager
def track_peak_allocation():
    """Measure peak memory allocated inside the block via tracemalloc.

    numpy registers its buffer allocations with tracemalloc, so this hook
    sees attention-kernel temporaries. Used by the no-quadratic-memory
    tests; not meant for production paths (tracing is slow).
    """
    report = AllocationReport()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    try:
        yield report
    finally:
        _, peak = tracemalloc.get_traced_memory()
        report.peak_bytes = max(0, peak - base)
        if not was_tracing:
            tracemalloc.stop()
