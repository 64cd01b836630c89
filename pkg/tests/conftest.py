"""Shared fixtures: synthetic CIFAR-format data for loader and pipeline tests."""

import numpy as np
import pytest


def class_pattern(cls: int) -> np.ndarray:
    """A fixed, well-separated spatial pattern per class (uint8 scale)."""
    rng = np.random.default_rng(9000 + cls)
    u = rng.standard_normal((3, 32, 1))
    v = rng.standard_normal((3, 1, 32))
    pat = u * v
    pat = pat / np.abs(pat).max()
    return pat * 90.0


def write_synthetic_cifar(root, n_train_per_class=20, n_test_per_class=5, seed=0, noise=25.0):
    """Write class-separable images in the exact CIFAR-10 binary layout."""
    rng = np.random.default_rng(seed)

    def make_records(n_per_class, offset):
        blocks = []
        for cls in range(10):
            noise_block = rng.normal(0.0, noise, size=(n_per_class, 3, 32, 32))
            imgs = np.clip(128.0 + class_pattern(cls) + noise_block, 0, 255).astype(np.uint8)
            labels = np.full((n_per_class, 1), cls, dtype=np.uint8)
            blocks.append(
                np.concatenate([labels, imgs.reshape(n_per_class, 3072)], axis=1)
            )
        records = np.concatenate(blocks)
        order = rng.permutation(len(records))
        return records[order]

    per_file = max(1, n_train_per_class // 5)
    for i in range(1, 6):
        recs = make_records(per_file, i)
        (root / f"data_batch_{i}.bin").write_bytes(recs.tobytes())
    test = make_records(n_test_per_class, 99)
    (root / "test_batch.bin").write_bytes(test.tobytes())
    return root


@pytest.fixture
def cifar_dir(tmp_path):
    return write_synthetic_cifar(tmp_path)
