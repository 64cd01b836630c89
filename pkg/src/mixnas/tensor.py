"""Dense float64 arrays with reverse-mode automatic differentiation.

The design is deliberately small: tensors are numpy arrays (row-major,
explicit shapes), a ``Tape`` records operations while active, and
``Tape.backward`` walks the record in reverse to accumulate gradients.
There is no broadcasting beyond bias-add, no views that alias gradients,
and everything is float64 so numeric oracles can assert tight tolerances.

Tapes are pushed onto a thread-local stack: computations on different
tapes in different threads never share state.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation was called outside its contract (non-shape)."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``requires_grad`` marks a leaf; ``grad`` is filled by ``Tape.backward``.
    ``meta`` carries operation metadata (e.g. degenerate-normalization
    flags from attention kernels) and is never touched by the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "meta", "_in_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.meta: dict | None = None
        self._in_graph = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation graph: an input of any node was
    recorded (or is a leaf) before the node itself.
    """

    def __init__(self):
        # node: (out, inputs, backward_fn); backward_fn(grad_out) -> per-input grads
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._recorded: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._recorded.add(id(out))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of a scalar loss; returns the leaf gradient map.

        Every reachable leaf tensor also gets its ``grad`` attribute set.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._recorded and not loss.requires_grad:
            raise ContractError("loss is not reachable from this tape")

        accum: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        if loss.requires_grad:
            leaf_grads[loss] = accum[id(loss)]

        for out, inputs, backward_fn in reversed(self._nodes):
            g_out = accum.get(id(out))
            if g_out is None:
                continue
            grads = backward_fn(g_out)
            for inp, g in zip(inputs, grads):
                if g is None:
                    continue
                if not (inp.requires_grad or inp._in_graph):
                    continue
                prev = accum.get(id(inp))
                if prev is None:
                    accum[id(inp)] = g.copy() if g.base is not None or g is g_out else g
                else:
                    prev += g
                if inp.requires_grad:
                    leaf_grads[inp] = accum[id(inp)]

        for leaf, g in leaf_grads.items():
            if g.shape != leaf.data.shape:
                raise ContractError(
                    f"gradient shape {g.shape} != value shape {leaf.data.shape}"
                )
            leaf.grad = g
        return leaf_grads


def record_op(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a node to the active tape if any input participates in the graph.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, each shaped like the corresponding input. Custom fused kernels
    (e.g. the causal linear-attention core) use this entry point.
    """
    tape = active_tape()
    if tape is None:
        return out
    if not any(t._in_graph for t in inputs):
        return out
    out._in_graph = True
    tape.record(out, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias added to every row of a matrix."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g

        return record_op(out, (a, b), bwd)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data)

        def bwd_bias(g):
            return g, g.sum(axis=0)

        return record_op(out, (a, b), bwd_bias)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return g, -g

    return record_op(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return record_op(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant (not differentiated w.r.t. c)."""
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return record_op(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul requires 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return record_op(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose requires a 2-D operand")
    out = Tensor(a.data.T.copy())

    def bwd(g):
        return (g.T.copy(),)

    return record_op(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken to be 0."""
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * (a.data > 0.0),)

    return record_op(out, (a,), bwd)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction.

    ``mask`` is an optional constant 0/1 array; masked entries get weight
    exactly 0.0 and the row max is taken over unmasked entries only, so
    masked inputs cannot perturb the output even at extreme magnitudes.
    Rows with every entry masked are a contract violation.
    """
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows requires a 2-D operand")
    x = a.data
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        if mask.shape != x.shape:
            raise ShapeError("softmax_rows: mask shape mismatch")
        if not (mask.sum(axis=1) > 0).all():
            raise ContractError("softmax_rows: a row is fully masked")
        neg = np.where(mask > 0, x, -np.inf)
        m = neg.max(axis=1, keepdims=True)
        e = np.exp(np.where(mask > 0, x - m, 0.0)) * mask
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return record_op(out, (a,), bwd)


def cumsum_rows(a: Tensor) -> Tensor:
    """Cumulative sum along the sequence axis (axis 0)."""
    out = Tensor(np.cumsum(a.data, axis=0))

    def bwd(g):
        return (np.cumsum(g[::-1], axis=0)[::-1].copy(),)

    return record_op(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and bias (1-D, length n)."""
    if a.data.ndim != 2:
        raise ShapeError("layer_norm requires a 2-D operand")
    n = a.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm: gain/bias must be 1-D of width n")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        gg = g * gain.data
        # d xhat -> d x for per-row normalization
        term = gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True)
        return term * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record_op(out, (a, gain, bias), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be 1-D")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ContractError("embedding: id out of vocabulary range")
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record_op(out, (table,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer targets.

    With label smoothing eps, the target distribution puts 1-eps+eps/C on
    the true class and eps/C elsewhere.
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy: logits [m x C] with m targets")
    m, c = logits.shape
    if t.min() < 0 or t.max() >= c:
        raise ContractError("cross_entropy: target class out of range")
    x = logits.data
    xm = x.max(axis=1, keepdims=True)
    lse = xm + np.log(np.exp(x - xm).sum(axis=1, keepdims=True))
    logp = x - lse
    eps = float(label_smoothing)
    q_true = 1.0 - eps + eps / c
    q_rest = eps / c
    nll = -(q_true - q_rest) * logp[np.arange(m), t] - q_rest * logp.sum(axis=1)
    out = Tensor(np.array(nll.mean()))

    def bwd(g):
        p = np.exp(logp)
        q = np.full((m, c), q_rest)
        q[np.arange(m), t] += q_true - q_rest
        return (float(g) * (p - q) / m,)

    return record_op(out, (logits,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.array(a.data.sum()))

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return record_op(out, (a,), bwd)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows of a matrix -> shape [1 x n] (sequence pooling)."""
    if a.data.ndim != 2:
        raise ShapeError("mean_rows requires a 2-D operand")
    m = a.shape[0]
    out = Tensor(a.data.mean(axis=0, keepdims=True))

    def bwd(g):
        return (np.repeat(g, m, axis=0) / m,)

    return record_op(out, (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: bad range [{start}:{stop}] for {a.shape}")
    out = Tensor(a.data[start:stop].copy())

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return record_op(out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return record_op(out, (a,), bwd)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows of nothing")
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError("concat_rows: column counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        grads, at = [], 0
        for s in sizes:
            grads.append(g[at : at + s].copy())
            at += s
        return grads

    return record_op(out, tuple(parts), bwd)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols of nothing")
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]

    def bwd(g):
        grads, at = [], 0
        for s in sizes:
            grads.append(g[:, at : at + s].copy())
            at += s
        return grads

    return record_op(out, tuple(parts), bwd)


def row_scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a [m x n] matrix by scalar s_i (s shaped [m x 1])."""
    if a.data.ndim != 2 or s.shape != (a.shape[0], 1):
        raise ShapeError(f"row_scale: need a [m x n] and s [m x 1], got {a.shape}, {s.shape}")
    out = Tensor(a.data * s.data)

    def bwd(g):
        return g * s.data, (g * a.data).sum(axis=1, keepdims=True)

    return record_op(out, (a, s), bwd)


def row_divide(a: Tensor, den: Tensor, eps: float = 0.0) -> Tensor:
    """Divide row i of a by (den_i + eps); den shaped [m x 1]."""
    if a.data.ndim != 2 or den.shape != (a.shape[0], 1):
        raise ShapeError(f"row_divide: need a [m x n] and den [m x 1], got {a.shape}, {den.shape}")
    d = den.data + eps
    out = Tensor(a.data / d)

    def bwd(g):
        return g / d, -(g * out.data).sum(axis=1, keepdims=True) / d

    return record_op(out, (a, den), bwd)
