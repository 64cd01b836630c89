"""Transformer encoder/decoder built from an ArchConfig.

Every parameter lives in a flat name -> ndarray map sized to the config it
was built for. The forward pass only ever reads the leading rows/columns
each layer actually needs, so the same code path serves standalone models
(exact-size tensors) and weight-sharing supernets (tensors sized to the
largest config, smaller subnets slicing into them).

Blocks are pre-norm residual; positions use fixed sinusoidal encodings;
decoder self-attention is causal. Per-layer attention kinds switch between
softmax and cosine-reweighted linear attention over the same Q/K/V/O
projections, so attention choice never changes parameter shapes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import cosformer_attention, softmax_attention
from .config import ArchConfig, AttentionKind, ConfigError, TaskShape

CHECKPOINT_MAGIC = b"MIXNASW1"


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, activation_norms: list[tuple[str, float]]):
        super().__init__(message)
        self.activation_norms = activation_norms


class ModelWeights:
    """Named parameter arrays plus the config/task they were built for."""

    def __init__(self, tensors: dict[str, np.ndarray], config: ArchConfig, shape: TaskShape):
        self.tensors = tensors
        self.config = config
        self.shape = shape

    def n_params(self) -> int:
        return sum(arr.size for arr in self.tensors.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            {k: v.copy() for k, v in self.tensors.items()}, self.config, self.shape
        )

    # -- checkpoint container: magic, canonical text header, raw LE payloads --

    def save(self, path) -> None:
        header = self.config.to_text() + _shape_to_text(self.shape)
        hbytes = header.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(hbytes)))
            fh.write(hbytes)
            fh.write(struct.pack("<I", len(self.tensors)))
            for name, arr in self.tensors.items():
                nbytes = name.encode("utf-8")
                fh.write(struct.pack("<H", len(nbytes)))
                fh.write(nbytes)
                fh.write(struct.pack("<B", arr.ndim))
                for dim in arr.shape:
                    fh.write(struct.pack("<Q", dim))
                fh.write(arr.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"not a checkpoint: bad magic {magic!r}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = fh.read(hlen).decode("utf-8")
            config = ArchConfig.from_text(header)
            shape = _shape_from_text(header)
            (count,) = struct.unpack("<I", fh.read(4))
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", fh.read(2))
                name = fh.read(nlen).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                dims = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
                size = int(np.prod(dims)) if dims else 1
                data = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(dims)
                tensors[name] = np.array(data, dtype=np.float64)
        return cls(tensors, config, shape)


def _shape_to_text(shape: TaskShape) -> str:
    return (
        f"task_kind = {shape.kind}\n"
        f"vocab_size = {shape.vocab_size}\n"
        f"n_classes = {shape.n_classes}\n"
        f"patch_dim = {shape.patch_dim}\n"
    )


def _shape_from_text(text: str) -> TaskShape:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if "=" in line:
            key, val = (p.strip() for p in line.split("=", 1))
            fields[key] = val
    return TaskShape(
        kind=fields["task_kind"],
        vocab_size=int(fields.get("vocab_size", 0)),
        n_classes=int(fields.get("n_classes", 0)),
        patch_dim=int(fields.get("patch_dim", 0)),
    )


def infer_shape_from_weights(weights: ModelWeights, config: ArchConfig) -> TaskShape:
    return weights.shape


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def build(config: ArchConfig, shape: TaskShape, seed: int) -> ModelWeights:
    """Deterministically initialize all parameters for a config.

    2-D weights get scaled-uniform (Xavier) init with gain from their fan;
    embedding tables use uniform with std 1/sqrt(width); biases start at
    zero and norm gains at one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}

    def xavier(name, rows, cols, gain=1.0):
        a = gain * np.sqrt(6.0 / (rows + cols))
        tensors[name] = rng.uniform(-a, a, size=(rows, cols))

    def table(name, rows, cols):
        a = np.sqrt(3.0 / cols)
        tensors[name] = rng.uniform(-a, a, size=(rows, cols))

    def bias(name, n):
        tensors[name] = np.zeros(n)

    def norm(prefix, n):
        tensors[f"{prefix}.g"] = np.ones(n)
        tensors[f"{prefix}.b"] = np.zeros(n)

    e = config.enc_emb_dim
    if shape.kind == "seq2seq":
        table("src_embed", shape.vocab_size, e)
    else:
        xavier("patch_embed.w", shape.patch_dim, e)
        bias("patch_embed.b", e)

    for i in range(config.enc_layers):
        p = f"enc.{i}"
        norm(f"{p}.ln1", e)
        for w in ("wq", "wk", "wv", "wo"):
            xavier(f"{p}.attn.{w}", e, e)
        for b in ("bq", "bk", "bv", "bo"):
            bias(f"{p}.attn.{b}", e)
        norm(f"{p}.ln2", e)
        f_dim = config.enc_ffn_dims[i]
        xavier(f"{p}.ffn.w1", e, f_dim)
        bias(f"{p}.ffn.b1", f_dim)
        xavier(f"{p}.ffn.w2", f_dim, e)
        bias(f"{p}.ffn.b2", e)
    norm("enc.final_ln", e)

    if config.dec_layers > 0:
        d = config.dec_emb_dim
        table("tgt_embed", shape.vocab_size, d)
        for i in range(config.dec_layers):
            p = f"dec.{i}"
            norm(f"{p}.ln1", d)
            for w in ("wq", "wk", "wv", "wo"):
                xavier(f"{p}.self.{w}", d, d)
            for b in ("bq", "bk", "bv", "bo"):
                bias(f"{p}.self.{b}", d)
            norm(f"{p}.ln2", d)
            xavier(f"{p}.cross.wq", d, d)
            xavier(f"{p}.cross.wk", e, d)
            xavier(f"{p}.cross.wv", e, d)
            xavier(f"{p}.cross.wo", d, d)
            for b in ("bq", "bk", "bv", "bo"):
                bias(f"{p}.cross.{b}", d)
            norm(f"{p}.ln3", d)
            f_dim = config.dec_ffn_dims[i]
            xavier(f"{p}.ffn.w1", d, f_dim)
            bias(f"{p}.ffn.b1", f_dim)
            xavier(f"{p}.ffn.w2", f_dim, d)
            bias(f"{p}.ffn.b2", d)
        norm("dec.final_ln", d)
        # near-zero head: untrained logits stay near-uniform (loss ~ ln C)
        xavier("head.w", d, shape.vocab_size, gain=0.01)
        bias("head.b", shape.vocab_size)
    else:
        xavier("head.w", e, shape.n_classes, gain=0.01)
        bias("head.b", shape.n_classes)

    return ModelWeights(tensors, config, shape)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


class _Leaves:
    """Hands out (sliced) parameter tensors; remembers regions for updates."""

    def __init__(self, weights: ModelWeights, training: bool):
        self.weights = weights
        self.training = training
        self.taken: dict[str, tuple[T.Tensor, tuple[slice, ...]]] = {}

    def get(self, name: str, *dims: int) -> T.Tensor:
        if name in self.taken:
            return self.taken[name][0]
        arr = self.weights.tensors[name]
        if dims:
            if len(dims) != arr.ndim:
                raise ConfigError([f"{name}: need {arr.ndim} dims, got {dims}"])
            for want, have in zip(dims, arr.shape):
                if want > have:
                    raise ConfigError([f"{name}: requested {dims} exceeds stored {arr.shape}"])
            region = tuple(slice(0, d) for d in dims)
        else:
            region = tuple(slice(0, d) for d in arr.shape)
        sub = arr[region]
        if self.training:
            leaf = T.Tensor(sub.copy(), requires_grad=True)
            self.taken[name] = (leaf, region)
            return leaf
        leaf = T.Tensor(sub)
        self.taken[name] = (leaf, region)
        return leaf


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    key = (n, dim)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(n)[:, None]
        i = np.arange(dim)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = pe
    return pe


def _attend(kind: AttentionKind, q, k, v, causal: bool):
    if kind == AttentionKind.SOFTMAX:
        return softmax_attention(q, k, v, causal=causal)
    return cosformer_attention(q, k, v, causal=causal).output


def _multi_head(kind, x_q, x_kv, heads, emb, causal, batch, n_q, n_kv, proj):
    """Project, split heads per sequence, attend, merge, project out."""
    q = T.add(T.matmul(x_q, proj["wq"]), proj["bq"])
    k = T.add(T.matmul(x_kv, proj["wk"]), proj["bk"])
    v = T.add(T.matmul(x_kv, proj["wv"]), proj["bv"])
    d_h = emb // heads
    seq_outs = []
    for b in range(batch):
        qb = T.slice_rows(q, b * n_q, (b + 1) * n_q)
        kb = T.slice_rows(k, b * n_kv, (b + 1) * n_kv)
        vb = T.slice_rows(v, b * n_kv, (b + 1) * n_kv)
        head_outs = []
        for h in range(heads):
            lo, hi = h * d_h, (h + 1) * d_h
            head_outs.append(
                _attend(
                    kind,
                    T.slice_cols(qb, lo, hi),
                    T.slice_cols(kb, lo, hi),
                    T.slice_cols(vb, lo, hi),
                    causal,
                )
            )
        seq_outs.append(T.concat_cols(head_outs) if heads > 1 else head_outs[0])
    merged = T.concat_rows(seq_outs) if batch > 1 else seq_outs[0]
    return T.add(T.matmul(merged, proj["wo"]), proj["bo"])


def _proj_group(leaves, prefix, rows, cols):
    return {
        "wq": leaves.get(f"{prefix}.wq", rows, cols),
        "wk": leaves.get(f"{prefix}.wk", rows, cols),
        "wv": leaves.get(f"{prefix}.wv", rows, cols),
        "wo": leaves.get(f"{prefix}.wo", cols, cols),
        "bq": leaves.get(f"{prefix}.bq", cols),
        "bk": leaves.get(f"{prefix}.bk", cols),
        "bv": leaves.get(f"{prefix}.bv", cols),
        "bo": leaves.get(f"{prefix}.bo", cols),
    }


def _cross_proj_group(leaves, prefix, enc_dim, dec_dim):
    return {
        "wq": leaves.get(f"{prefix}.wq", dec_dim, dec_dim),
        "wk": leaves.get(f"{prefix}.wk", enc_dim, dec_dim),
        "wv": leaves.get(f"{prefix}.wv", enc_dim, dec_dim),
        "wo": leaves.get(f"{prefix}.wo", dec_dim, dec_dim),
        "bq": leaves.get(f"{prefix}.bq", dec_dim),
        "bk": leaves.get(f"{prefix}.bk", dec_dim),
        "bv": leaves.get(f"{prefix}.bv", dec_dim),
        "bo": leaves.get(f"{prefix}.bo", dec_dim),
    }


def _ffn_block(leaves, prefix, x, emb, f_dim):
    w1 = leaves.get(f"{prefix}.w1", emb, f_dim)
    b1 = leaves.get(f"{prefix}.b1", f_dim)
    w2 = leaves.get(f"{prefix}.w2", f_dim, emb)
    b2 = leaves.get(f"{prefix}.b2", emb)
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)


def _norm_block(leaves, prefix, x, dim):
    return T.layer_norm(x, leaves.get(f"{prefix}.g", dim), leaves.get(f"{prefix}.b", dim))


def _note_norm(norms_out, name, t: T.Tensor):
    if norms_out is not None:
        norms_out.append((name, float(np.abs(t.data).mean())))


def _run_encoder(leaves, config, shape, src, norms_out):
    e = config.enc_emb_dim
    if shape.kind == "seq2seq":
        src = np.asarray(src, dtype=np.int64)
        batch, n_src = src.shape
        emb = T.embedding(leaves.get("src_embed", shape.vocab_size, e), src.reshape(-1))
        h = T.scale(emb, np.sqrt(e))
    else:
        feats = np.asarray(src, dtype=np.float64)
        batch, n_src, _ = feats.shape
        flat = T.Tensor(feats.reshape(batch * n_src, shape.patch_dim))
        h = T.add(
            T.matmul(flat, leaves.get("patch_embed.w", shape.patch_dim, e)),
            leaves.get("patch_embed.b", e),
        )
    pe = np.tile(sinusoidal_positions(n_src, e), (batch, 1))
    h = T.add(h, T.Tensor(pe))
    _note_norm(norms_out, "enc.embed", h)

    layer_outputs = []
    for i in range(config.enc_layers):
        p = f"enc.{i}"
        x = _norm_block(leaves, f"{p}.ln1", h, e)
        attn = _multi_head(
            config.enc_attn_types[i],
            x,
            x,
            config.enc_heads[i],
            e,
            causal=False,
            batch=batch,
            n_q=n_src,
            n_kv=n_src,
            proj=_proj_group(leaves, f"{p}.attn", e, e),
        )
        h = T.add(h, attn)
        x = _norm_block(leaves, f"{p}.ln2", h, e)
        h = T.add(h, _ffn_block(leaves, f"{p}.ffn", x, e, config.enc_ffn_dims[i]))
        _note_norm(norms_out, p, h)
        layer_outputs.append(h)
    return layer_outputs, batch, n_src


def _encoder_memory(leaves, config, layer_outputs):
    """Average of the last ende_connect layer outputs, final-normed."""
    e = config.enc_emb_dim
    c = config.ende_connect
    selected = layer_outputs[-c:]
    acc = selected[0]
    for extra in selected[1:]:
        acc = T.add(acc, extra)
    if c > 1:
        acc = T.scale(acc, 1.0 / c)
    return _norm_block(leaves, "enc.final_ln", acc, e)


def _run_decoder(leaves, config, shape, memory, batch, n_src, tgt, norms_out):
    d = config.dec_emb_dim
    e = config.enc_emb_dim
    tgt = np.asarray(tgt, dtype=np.int64)
    if tgt.shape[0] != batch:
        raise ConfigError(["decoder batch size differs from encoder batch size"])
    n_tgt = tgt.shape[1]
    emb = T.embedding(leaves.get("tgt_embed", shape.vocab_size, d), tgt.reshape(-1))
    h = T.scale(emb, np.sqrt(d))
    h = T.add(h, T.Tensor(np.tile(sinusoidal_positions(n_tgt, d), (batch, 1))))
    _note_norm(norms_out, "dec.embed", h)

    self_kinds = config.resolved_dec_attn_types()
    cross_kinds = config.resolved_ende_attn_types()
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        x = _norm_block(leaves, f"{p}.ln1", h, d)
        h = T.add(
            h,
            _multi_head(
                self_kinds[i], x, x, config.dec_heads[i], d, causal=True,
                batch=batch, n_q=n_tgt, n_kv=n_tgt,
                proj=_proj_group(leaves, f"{p}.self", d, d),
            ),
        )
        x = _norm_block(leaves, f"{p}.ln2", h, d)
        h = T.add(
            h,
            _multi_head(
                cross_kinds[i], x, memory, config.ende_heads[i], d, causal=False,
                batch=batch, n_q=n_tgt, n_kv=n_src,
                proj=_cross_proj_group(leaves, f"{p}.cross", e, d),
            ),
        )
        x = _norm_block(leaves, f"{p}.ln3", h, d)
        h = T.add(h, _ffn_block(leaves, f"{p}.ffn", x, d, config.dec_ffn_dims[i]))
        _note_norm(norms_out, p, h)
    h = _norm_block(leaves, "dec.final_ln", h, d)
    return h, n_tgt


def _run_model(leaves, config, shape, src, tgt, norms_out=None):
    layer_outputs, batch, n_src = _run_encoder(leaves, config, shape, src, norms_out)
    if config.dec_layers > 0:
        if tgt is None:
            raise ConfigError(["tgt_tokens required when dec_layers > 0"])
        memory = _encoder_memory(leaves, config, layer_outputs)
        h, n_tgt = _run_decoder(leaves, config, shape, memory, batch, n_src, tgt, norms_out)
        d = config.dec_emb_dim
        logits = T.add(
            T.matmul(h, leaves.get("head.w", d, shape.vocab_size)),
            leaves.get("head.b", shape.vocab_size),
        )
        return logits  # [batch * n_tgt, vocab]
    h = _norm_block(leaves, "enc.final_ln", layer_outputs[-1], config.enc_emb_dim)
    pooled = T.concat_rows(
        [T.mean_rows(T.slice_rows(h, b * n_src, (b + 1) * n_src)) for b in range(batch)]
    ) if batch > 1 else T.mean_rows(h)
    logits = T.add(
        T.matmul(pooled, leaves.get("head.w", config.enc_emb_dim, shape.n_classes)),
        leaves.get("head.b", shape.n_classes),
    )
    return logits  # [batch, n_classes]


def forward(weights: ModelWeights, config: ArchConfig, shape: TaskShape, src, tgt=None) -> T.Tensor:
    """Inference forward pass; returns logits ([B*N_tgt, V] or [B, C])."""
    config.validate()
    leaves = _Leaves(weights, training=False)
    return _run_model(leaves, config, shape, src, tgt)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class TrainHParams:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.998)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    schedule: str = "inverse_sqrt"  # inverse_sqrt | cosine | constant
    warmup_steps: int = 100
    warmup_init_lr: float = 1e-7
    min_lr: float = 1e-9
    max_steps: int = 10_000


def lr_at(step: int, hp: TrainHParams) -> float:
    """Learning rate for a 1-based step index."""
    if step <= hp.warmup_steps and hp.warmup_steps > 0:
        frac = step / hp.warmup_steps
        return hp.warmup_init_lr + frac * (hp.lr - hp.warmup_init_lr)
    if hp.schedule == "constant":
        return hp.lr
    if hp.schedule == "inverse_sqrt":
        return max(hp.min_lr, hp.lr * np.sqrt(hp.warmup_steps / step)) if hp.warmup_steps else hp.lr
    if hp.schedule == "cosine":
        span = max(1, hp.max_steps - hp.warmup_steps)
        frac = min(1.0, (step - hp.warmup_steps) / span)
        return hp.min_lr + 0.5 * (hp.lr - hp.min_lr) * (1.0 + np.cos(np.pi * frac))
    raise ValueError(f"unknown schedule {hp.schedule!r}")


class AdamState:
    """Per-tensor first/second moments, shaped like the stored weights."""

    def __init__(self, weights: ModelWeights):
        self.m = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
        self.step = 0


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if clip_norm > 0 and total > clip_norm:
        factor = clip_norm / total
        for g in grads.values():
            g *= factor
    return total


def train_step(
    weights: ModelWeights,
    config: ArchConfig,
    shape: TaskShape,
    batch,
    opt: AdamState,
    hp: TrainHParams,
) -> float:
    """One forward/backward/Adam update; returns the pre-step loss.

    Updates touch only the parameter regions the sampled config actually
    reads (supernet update locality). Weight decay is decoupled and only
    applied to matrices. Non-finite loss aborts with per-layer activation
    norms attached for diagnosis.
    """
    if shape.kind == "seq2seq":
        src, tgt_in, tgt_out = batch
        targets = np.asarray(tgt_out, dtype=np.int64).reshape(-1)
    else:
        src, labels = batch
        tgt_in = None
        targets = np.asarray(labels, dtype=np.int64)

    leaves = _Leaves(weights, training=True)
    with T.Tape() as tape:
        logits = _run_model(leaves, config, shape, src, tgt_in)
        loss = T.cross_entropy(logits, targets, label_smoothing=hp.label_smoothing)
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        norms: list[tuple[str, float]] = []
        _run_model(_Leaves(weights, training=False), config, shape, src, tgt_in, norms_out=norms)
        raise TrainingDiverged(
            f"non-finite loss {loss_val}; activation norms: {norms}", norms
        )
    tape.backward(loss)

    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, (leaf, _) in leaves.taken.items()
    }
    clip_gradients(grads, hp.clip_norm)

    opt.step += 1
    lr = lr_at(opt.step, hp)
    b1, b2 = hp.betas
    bc1 = 1.0 - b1**opt.step
    bc2 = 1.0 - b2**opt.step
    for name, (leaf, region) in leaves.taken.items():
        g = grads[name]
        m = opt.m[name][region]
        v = opt.v[name][region]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
        target = weights.tensors[name][region]
        if hp.weight_decay > 0 and target.ndim == 2 and not name.endswith((".g", ".b")):
            target -= lr * hp.weight_decay * target
        target -= lr * update
    return loss_val
