"""Desk-scale tasks: synthetic sequence reversal and CIFAR-10 classification.

The reversal task is the translation stand-in: the target is the source
sequence reversed, which a model cannot solve without content-based
cross-attention (plain copying could be done positionally).

CIFAR-10 is read from the published binary batch layout: each record is 1
label byte followed by 3072 CHW pixel bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .config import TaskShape

PAD, BOS, EOS = 0, 1, 2

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORD_BYTES = 1 + 3072
CIFAR_CLASSES = 10

DATA_ROOT_ENV = "MIXNAS_DATA"


class DataError(ValueError):
    """Malformed or missing dataset input."""


# ---------------------------------------------------------------------------
# sequence reversal task
# ---------------------------------------------------------------------------


@dataclass
class Seq2SeqTask:
    kind: str
    vocab_size: int
    train: list[np.ndarray]
    eval: list[np.ndarray]

    def shape(self) -> TaskShape:
        return TaskShape("seq2seq", vocab_size=self.vocab_size)

    @staticmethod
    def _to_batch(group: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = np.stack(group)
        rev = src[:, ::-1]
        eos_col = np.full((src.shape[0], 1), EOS, dtype=np.int64)
        bos_col = np.full((src.shape[0], 1), BOS, dtype=np.int64)
        tgt_out = np.concatenate([rev, eos_col], axis=1)
        tgt_in = np.concatenate([bos_col, rev], axis=1)
        return src, tgt_in, tgt_out

    def _buckets(self, split: list[np.ndarray]) -> dict[int, list[np.ndarray]]:
        buckets: dict[int, list[np.ndarray]] = {}
        for seq in split:
            buckets.setdefault(len(seq), []).append(seq)
        return buckets

    def train_stream(self, batch_size: int, seed: int):
        """Endless deterministic batch stream (same-length sequences per batch)."""
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C)))
        buckets = self._buckets(self.train)
        lengths = sorted(buckets)
        while True:
            length = lengths[int(rng.integers(len(lengths)))]
            pool = buckets[length]
            idx = rng.integers(len(pool), size=batch_size)
            yield self._to_batch([pool[i] for i in idx])

    def eval_batches(self, batch_size: int):
        """One deterministic pass over the eval split."""
        buckets = self._buckets(self.eval)
        for length in sorted(buckets):
            pool = buckets[length]
            for at in range(0, len(pool), batch_size):
                yield self._to_batch(pool[at : at + batch_size])


def copy_task(
    vocab: int,
    len_range: tuple[int, int],
    n_train: int,
    n_eval: int,
    seed: int,
) -> Seq2SeqTask:
    """Reversal task: source is random tokens, target is the source reversed.

    Token ids 0..2 are reserved (pad/bos/eos); content tokens start at 3.
    The eval split is resampled until no sequence also appears in training.
    """
    if vocab < 4:
        raise DataError("copy_task needs vocab >= 4 (3 reserved ids + content)")
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise DataError(f"bad length range {len_range}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0F4)))

    def draw() -> np.ndarray:
        length = int(rng.integers(lo, hi + 1))
        return rng.integers(3, vocab, size=length).astype(np.int64)

    train = [draw() for _ in range(n_train)]
    seen = {seq.tobytes() for seq in train}
    eval_split: list[np.ndarray] = []
    attempts = 0
    while len(eval_split) < n_eval:
        seq = draw()
        attempts += 1
        if attempts > 100 * n_eval + 1000:
            raise DataError("cannot draw a disjoint eval split; enlarge the task space")
        if seq.tobytes() in seen:
            continue
        eval_split.append(seq)
    return Seq2SeqTask("seq2seq", vocab, train, eval_split)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


@dataclass
class ClassificationTask:
    kind: str
    train_x: np.ndarray  # [n, 3, 32, 32] standardized
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    token_mode: str = "patch"  # patch | downsample
    patch: int = 4
    channel_mean: np.ndarray = field(default=None)
    channel_std: np.ndarray = field(default=None)

    @property
    def n_classes(self) -> int:
        return CIFAR_CLASSES

    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch if self.token_mode == "patch" else 3

    def shape(self) -> TaskShape:
        return TaskShape("classification", n_classes=self.n_classes, patch_dim=self.patch_dim())

    def tokens(self, images: np.ndarray) -> np.ndarray:
        if self.token_mode == "patch":
            return np.stack([patchify(img, self.patch) for img in images])
        return np.stack([downsample_tokens(img) for img in images])

    def train_stream(self, batch_size: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C)))
        n = len(self.train_x)
        while True:
            idx = rng.integers(n, size=batch_size)
            yield self.tokens(self.train_x[idx]), self.train_y[idx]

    def eval_batches(self, batch_size: int, split: str = "test"):
        xs, ys = (self.train_x, self.train_y) if split == "train" else (self.test_x, self.test_y)
        for at in range(0, len(xs), batch_size):
            yield self.tokens(xs[at : at + batch_size]), ys[at : at + batch_size]


def _parse_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        offset = (raw.size // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise DataError(
            f"{path}: malformed record length, {raw.size} bytes is not a multiple of "
            f"{CIFAR_RECORD_BYTES} (first bad byte at offset {offset})"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        at = int(bad[0])
        raise DataError(
            f"{path}: label byte {labels[at]} at record {at} (byte offset "
            f"{at * CIFAR_RECORD_BYTES}); valid labels are 0-9"
        )
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return pixels, labels


def _stratified_subset(
    x: np.ndarray, y: np.ndarray, per_class: int
) -> tuple[np.ndarray, np.ndarray]:
    keep: list[int] = []
    for cls in range(CIFAR_CLASSES):
        idx = np.nonzero(y == cls)[0]
        if len(idx) < per_class:
            raise DataError(f"class {cls} has only {len(idx)} examples, need {per_class}")
        keep.extend(idx[:per_class].tolist())
    keep = sorted(keep)
    return x[keep], y[keep]


def load_cifar10(
    path: str,
    subset_per_class: int | None = None,
    token_mode: str = "patch",
    patch: int = 4,
) -> ClassificationTask:
    """Load CIFAR-10 binary batches from a directory.

    Pixels are scaled to [0, 1] and standardized per channel with
    statistics of the (possibly subsetted) train split. The optional
    subset keeps the first ``subset_per_class`` records of each class in
    file order, so it is deterministic. The test split is subsetted at
    one tenth of the train rate (matching the official 5:1 ratio).
    """
    missing = [
        name
        for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES
        if not os.path.exists(os.path.join(path, name))
    ]
    if missing:
        raise DataError(f"missing CIFAR-10 files under {path}: {missing}")
    train_parts = [_parse_cifar_file(os.path.join(path, f)) for f in CIFAR_TRAIN_FILES]
    test_parts = [_parse_cifar_file(os.path.join(path, f)) for f in CIFAR_TEST_FILES]
    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])
    test_x = np.concatenate([p[0] for p in test_parts])
    test_y = np.concatenate([p[1] for p in test_parts])

    if subset_per_class is not None:
        train_x, train_y = _stratified_subset(train_x, train_y, subset_per_class)
        test_keep = max(1, subset_per_class // 5)
        test_x, test_y = _stratified_subset(test_x, test_y, test_keep)

    train_x /= 255.0
    test_x /= 255.0
    mean = train_x.mean(axis=(0, 2, 3), keepdims=True)
    std = train_x.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std < 1e-12, 1.0, std)
    train_x = (train_x - mean) / std
    test_x = (test_x - mean) / std
    if token_mode not in ("patch", "downsample"):
        raise DataError(f"unknown token mode {token_mode!r}")
    return ClassificationTask(
        "classification",
        train_x,
        train_y,
        test_x,
        test_y,
        token_mode=token_mode,
        patch=patch,
        channel_mean=mean.reshape(3),
        channel_std=std.reshape(3),
    )


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch tokens: [ (32/p)^2 tokens x 3*p*p features ].

    A lossless rearrangement: token count times feature width always
    equals 3*32*32.
    """
    if image.shape != (3, 32, 32):
        raise DataError(f"expected a 3x32x32 image, got {image.shape}")
    if patch < 1 or 32 % patch != 0:
        raise DataError(f"patch size {patch} does not divide 32")
    grid = 32 // patch
    # [3, g, p, g, p] -> [g, g, 3, p, p] -> [g*g, 3*p*p]
    view = image.reshape(3, grid, patch, grid, patch)
    tokens = view.transpose(1, 3, 0, 2, 4).reshape(grid * grid, 3 * patch * patch)
    return np.ascontiguousarray(tokens)


def downsample_tokens(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """Average-pool to a (32/f)^2 grid; one 3-channel token per cell.

    Fixed pooling stand-in for the learned convolutional downsampling that
    produces the published ~16x16 token grid.
    """
    if image.shape != (3, 32, 32):
        raise DataError(f"expected a 3x32x32 image, got {image.shape}")
    if 32 % factor != 0:
        raise DataError(f"factor {factor} does not divide 32")
    grid = 32 // factor
    pooled = image.reshape(3, grid, factor, grid, factor).mean(axis=(2, 4))
    return np.ascontiguousarray(pooled.transpose(1, 2, 0).reshape(grid * grid, 3))


def dataset_root(cli_value: str | None = None) -> str:
    """Dataset directory from CLI flag or the environment."""
    if cli_value:
        return cli_value
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return env
    raise DataError(f"no dataset root: pass --data or set ${DATA_ROOT_ENV}")
