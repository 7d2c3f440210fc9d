"""Writers for small synthetic dataset files."""

import struct
from pathlib import Path

import numpy as np


def write_idx(path, arr: np.ndarray, magic: int) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def write_mnist(root, n_train=40, n_test=20, seed=0):
    """Class-dependent blobs so that a tiny model can learn something."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("t10k", n_test)):
        y = rng.integers(0, 10, n).astype(np.uint8)
        x = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(y):
            x[i, 2 * c:2 * c + 6, 4:24] = 250
        write_idx(root / f"{split}-images-idx3-ubyte", x, 0x00000803)
        write_idx(root / f"{split}-labels-idx1-ubyte", y, 0x00000801)
    return root


def write_cifar(root, n_per_batch=8, seed=0):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = rng.integers(0, 256, (n_per_batch, 3073)).astype(np.uint8)
        rec[:, 0] = rng.integers(0, 10, n_per_batch)
        (root / name).write_bytes(rec.tobytes())
    return root
