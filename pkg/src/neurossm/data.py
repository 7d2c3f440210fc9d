"""Dataset readers and sequentialization.

Images become token streams by a row-major pixel scan: MNIST gives 784
scalar tokens, CIFAR-10 1024 RGB tokens.  The permuted variant reorders the
784 positions with a Fisher-Yates shuffle driven by SplitMix64, which is
small enough to reimplement in any language:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)                       (all mod 2**64)

    for i = n-1 down to 1: j = next() mod (i + 1); swap(p[i], p[j])
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3072
IDENTITY_SEED = -1
DATA_ENV = "NEUROSSM_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60000),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10000),
}
CIFAR_FILES = {
    "train": ([f"data_batch_{i}.bin" for i in range(1, 6)], 50000),
    "test": (["test_batch.bin"], 10000),
}
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "smnist"  # smnist | psmnist | scifar
    permutation_seed: int = IDENTITY_SEED
    subset_size: int | None = None
    test_subset_size: int | None = None
    normalization: str = "scale01"  # scale01 | standardize

    def __post_init__(self):
        if self.name not in ("smnist", "psmnist", "scifar"):
            raise ValueError(f"unknown dataset {self.name!r}")
        if self.normalization not in ("scale01", "standardize"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        for n in (self.subset_size, self.test_subset_size):
            if n is not None and n < 1:
                raise ValueError("subset sizes must be positive")

    @property
    def input_dim(self) -> int:
        return 3 if self.name == "scifar" else 1

    @property
    def seq_len(self) -> int:
        return 1024 if self.name == "scifar" else 784

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SplitData:
    x_train: np.ndarray  # (n, I, L) float32
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


# ---------------------------------------------------------------- file formats

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise DataError(f"missing data file {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated dimensions at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise DataError(f"{path}: truncated payload at offset {header}: need {need} bytes, "
                        f"found {len(raw) - header}")
    return np.frombuffer(raw, np.uint8, need, header).reshape(dims)


def _check_labels(path, labels, offset) -> None:
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} out of range at offset {offset(bad[0])}")


def load_mnist(root, split: str = "train", check_count: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(n, 28, 28) uint8 images and (n,) labels from IDX files in ``root``."""
    img_name, lab_name, count = MNIST_FILES[split]
    root = Path(root)
    images = read_idx(root / img_name, IDX_IMAGES)
    labels = read_idx(root / lab_name, IDX_LABELS)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataError(f"{root / img_name}: expected 28x28 images, got {images.shape[1:]}")
    if len(images) != len(labels):
        raise DataError(f"{split}: {len(images)} images but {len(labels)} labels")
    if check_count and len(images) != count:
        raise DataError(f"{split}: expected {count} records, found {len(images)}")
    _check_labels(root / lab_name, labels, lambda i: 8 + i)
    return images, labels.astype(np.int64)


def load_cifar10(root, split: str = "train", check_count: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(n, 32, 32, 3) uint8 images and labels from CIFAR-10 binary batches."""
    names, count = CIFAR_FILES[split]
    images, labels = [], []
    for name in names:
        path = Path(root) / name
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD
            raise DataError(f"{path}: truncated record at offset {whole * CIFAR_RECORD}")
        rec = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD)
        _check_labels(path, rec[:, 0], lambda i: i * CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    x, y = np.concatenate(images), np.concatenate(labels)
    if check_count and len(x) != count:
        raise DataError(f"{split}: expected {count} records, found {len(x)}")
    return x, y


def verify_checksums(root) -> dict[str, bool]:
    out = {}
    for name, digest in MNIST_SHA256.items():
        try:
            out[name] = hashlib.sha256(_read_bytes(Path(root) / name)).hexdigest() == digest
        except DataError:
            out[name] = False
    return out


# ---------------------------------------------------------------- sequences

def splitmix64(seed: int):
    mask = (1 << 64) - 1
    state = seed & mask
    while True:
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        yield z ^ (z >> 31)


def permutation(n: int, seed: int) -> np.ndarray:
    """Fixed permutation of range(n); the identity for the sentinel seed -1."""
    p = np.arange(n)
    if seed == IDENTITY_SEED:
        return p
    gen = splitmix64(seed)
    for i in range(n - 1, 0, -1):
        j = next(gen) % (i + 1)
        p[i], p[j] = p[j], p[i]
    return p


def inverse_permutation(p: np.ndarray) -> np.ndarray:
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


def sequentialize(images: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Images (..., 28, 28) or (..., 32, 32, 3) to token streams (..., I, L), row-major."""
    images = np.asarray(images)
    if spec.name == "scifar":
        if images.shape[-3:] != (32, 32, 3):
            raise DataError(f"expected 32x32x3 images, got {images.shape[-3:]}")
        return np.swapaxes(images.reshape(*images.shape[:-3], 1024, 3), -1, -2)
    if images.shape[-2:] != (28, 28):
        raise DataError(f"expected 28x28 images, got {images.shape[-2:]}")
    seq = images.reshape(*images.shape[:-2], 1, 784)
    if spec.name == "psmnist":
        seq = seq[..., permutation(784, spec.permutation_seed)]
    return seq


def normalize(train: np.ndarray, test: np.ndarray, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Global statistics of the training split applied to both splits."""
    train = train.astype(np.float32)
    test = test.astype(np.float32)
    if method == "scale01":
        lo, hi = float(train.min()), float(train.max())
        span = hi - lo if hi > lo else 1.0
        return (train - lo) / span, np.clip((test - lo) / span, 0.0, 1.0)
    mu, sd = float(train.mean()), float(train.std())
    sd = sd if sd > 0 else 1.0
    return (train - mu) / sd, (test - mu) / sd


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise DataError(f"no data directory: pass --data-dir or set {DATA_ENV}")
    return Path(root)


def load_dataset(spec: DatasetSpec, root=None, check_count: bool = True) -> SplitData:
    root = data_root(root)
    loader = load_cifar10 if spec.name == "scifar" else load_mnist
    xtr, ytr = loader(root, "train", check_count)
    xte, yte = loader(root, "test", check_count)
    xtr, ytr = xtr[:spec.subset_size], ytr[:spec.subset_size]
    xte, yte = xte[:spec.test_subset_size], yte[:spec.test_subset_size]
    tr, te = normalize(sequentialize(xtr, spec), sequentialize(xte, spec), spec.normalization)
    return SplitData(np.ascontiguousarray(tr), ytr, np.ascontiguousarray(te), yte)
