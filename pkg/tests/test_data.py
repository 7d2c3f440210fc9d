import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import write_cifar, write_idx, write_mnist
from neurossm import data
from neurossm.data import DataError, DatasetSpec


def test_splitmix64_reference_values():
    # first outputs for seed 0 of the public reference implementation
    g = data.splitmix64(0)
    assert [next(g) for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_permutation_is_a_deterministic_bijection():
    p = data.permutation(784, 1234)
    assert sorted(p.tolist()) == list(range(784))
    assert p.sum() == 783 * 784 // 2
    assert np.array_equal(p, data.permutation(784, 1234))
    assert not np.array_equal(p, data.permutation(784, 1235))
    assert np.array_equal(data.permutation(784, data.IDENTITY_SEED), np.arange(784))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 63), st.integers(1, 300))
def test_inverse_permutation_restores_order(seed, n):
    p = data.permutation(n, seed)
    x = np.arange(n) * 7
    assert np.array_equal(x[p][data.inverse_permutation(p)], x)


def test_psmnist_identity_seed_equals_smnist():
    img = np.random.default_rng(0).integers(0, 255, (3, 28, 28))
    a = data.sequentialize(img, DatasetSpec("smnist"))
    b = data.sequentialize(img, DatasetSpec("psmnist", permutation_seed=data.IDENTITY_SEED))
    assert np.array_equal(a, b) and a.shape == (3, 1, 784)
    c = data.sequentialize(img, DatasetSpec("psmnist", permutation_seed=9))
    assert np.array_equal(c[..., data.inverse_permutation(data.permutation(784, 9))], a)


def test_sequentialize_is_row_major():
    img = np.arange(784).reshape(28, 28)
    assert data.sequentialize(img, DatasetSpec())[0].tolist() == list(range(784))
    rgb = np.arange(32 * 32 * 3).reshape(32, 32, 3)
    seq = data.sequentialize(rgb, DatasetSpec("scifar"))
    assert seq.shape == (3, 1024)
    assert seq[:, 33].tolist() == rgb[1, 1].tolist()
    with pytest.raises(DataError):
        data.sequentialize(np.zeros((32, 32)), DatasetSpec())


def test_scale01_is_global():
    tr = np.array([[10.0, 20.0], [30.0, 50.0]])
    a, b = data.normalize(tr, np.array([[50.0, 10.0]]), "scale01")
    assert a.min() == 0 and a.max() == 1 and a[0, 1] == pytest.approx(0.25)
    assert b.tolist() == [[1.0, 0.0]]
    s, _ = data.normalize(tr, tr, "standardize")
    assert abs(s.mean()) < 1e-6 and s.std() == pytest.approx(1, rel=1e-5)


def test_idx_roundtrip_and_errors(tmp_path):
    root = write_mnist(tmp_path / "m", n_train=12, n_test=5)
    x, y = data.load_mnist(root, "train", check_count=False)
    assert x.shape == (12, 28, 28) and y.shape == (12,)
    with pytest.raises(DataError, match="expected 60000"):
        data.load_mnist(root, "train")
    bad = tmp_path / "bad"
    bad.mkdir()
    write_idx(bad / "t", np.zeros((2, 28, 28)), 0x00000801)
    with pytest.raises(DataError, match="bad magic 0x00000801 at offset 0"):
        data.read_idx(bad / "t", data.IDX_IMAGES)
    raw = (root / "train-images-idx3-ubyte").read_bytes()
    (bad / "trunc").write_bytes(raw[:-5])
    with pytest.raises(DataError, match="truncated payload at offset 16"):
        data.read_idx(bad / "trunc", data.IDX_IMAGES)
    write_idx(root / "t10k-labels-idx1-ubyte", np.array([1, 2, 11, 3, 4]), 0x00000801)
    with pytest.raises(DataError, match="label 11 out of range at offset 10"):
        data.load_mnist(root, "test", check_count=False)


def test_gzip_files_are_read(tmp_path):
    import gzip

    root = write_mnist(tmp_path / "m", n_train=4, n_test=2)
    for f in root.iterdir():
        (root / (f.name + ".gz")).write_bytes(gzip.compress(f.read_bytes()))
        f.unlink()
    x, _ = data.load_mnist(root, "train", check_count=False)
    assert x.shape == (4, 28, 28)


def test_cifar_loader(tmp_path):
    root = write_cifar(tmp_path / "c", n_per_batch=3)
    x, y = data.load_cifar10(root, "train", check_count=False)
    assert x.shape == (15, 32, 32, 3) and y.max() <= 9
    raw = (root / "test_batch.bin").read_bytes()
    (root / "test_batch.bin").write_bytes(raw[:-1])
    with pytest.raises(DataError, match="truncated record at offset 6146"):
        data.load_cifar10(root, "test", check_count=False)


def test_load_dataset_is_deterministic_and_subsets(tmp_path):
    root = write_mnist(tmp_path / "m", n_train=30, n_test=10)
    spec = DatasetSpec("psmnist", permutation_seed=3, subset_size=20, test_subset_size=5)
    a = data.load_dataset(spec, root, check_count=False)
    b = data.load_dataset(spec, root, check_count=False)
    assert a.x_train.shape == (20, 1, 784) and a.x_test.shape == (5, 1, 784)
    assert a.x_train.tobytes() == b.x_train.tobytes()
    assert a.x_train.min() >= 0 and a.x_train.max() <= 1


def test_missing_data_dir(monkeypatch):
    monkeypatch.delenv(data.DATA_ENV, raising=False)
    with pytest.raises(DataError):
        data.data_root(None)
    with pytest.raises(DataError, match="missing data file"):
        data.load_mnist("/nonexistent/dir")


def test_real_mnist_counts_and_checksums(mnist_dir):
    x, y = data.load_mnist(mnist_dir, "test")
    assert x.shape == (10000, 28, 28) and set(np.unique(y)) == set(range(10))
    assert all(data.verify_checksums(mnist_dir).values())


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec("imagenet")
    with pytest.raises(ValueError):
        DatasetSpec(subset_size=0)
    assert DatasetSpec("scifar").input_dim == 3 and DatasetSpec("scifar").seq_len == 1024
