import pickle
import tarfile

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from antigan.data import (
    EmptyClassError,
    LabeledDataset,
    MissingSourceError,
    UnknownDatasetError,
    denormalize,
    load_dataset,
    normalize,
    partition_clients,
    sample_class,
    write_idx,
)

from conftest import DATA_ROOT, make_dataset, needs_mnist


@pytest.fixture
def fake_mnist(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    for split, n in (("train", 30), ("t10k", 12)):
        imgs = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        imgs[0] = 0
        imgs[0, 10, 10] = 255
        write_idx(d / f"{split}-images-idx3-ubyte.gz", imgs)
        write_idx(d / f"{split}-labels-idx1-ubyte", (np.arange(n) % 10).astype(np.uint8))
    return tmp_path


def _cifar_batch(rng, n, key=b"labels", k=10):
    return {b"data": rng.integers(0, 256, size=(n, 3072), dtype=np.uint8), key: list(rng.integers(0, k, n))}


@pytest.fixture
def fake_cifar(tmp_path):
    rng = np.random.default_rng(1)
    d = tmp_path / "cifar-10-batches-py"
    d.mkdir()
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        with open(d / name, "wb") as fh:
            pickle.dump(_cifar_batch(rng, 8), fh)
    # cifar-100 as a tarball
    src = tmp_path / "src" / "cifar-100-python"
    src.mkdir(parents=True)
    for name in ("train", "test"):
        batch = _cifar_batch(rng, 9, b"fine_labels", 100)
        batch[b"coarse_labels"] = [x % 20 for x in batch[b"fine_labels"]]
        with open(src / name, "wb") as fh:
            pickle.dump(batch, fh)
    with tarfile.open(tmp_path / "cifar-100-python.tar.gz", "w:gz") as tar:
        tar.add(src, arcname="cifar-100-python")
    return tmp_path


def test_mnist_is_padded_to_32_with_background(fake_mnist):
    ds = load_dataset("mnist", "train", root=fake_mnist)
    assert ds.images.shape == (30, 1, 32, 32)
    assert ds.num_classes == 10
    first = ds.images[0, 0]
    # raw 0 -> -1 everywhere except the single 255 pixel, shifted by the 2-pixel pad
    assert first[12, 12] == 1.0
    assert (first == -1.0).sum() == 32 * 32 - 1


def test_mnist_limit_and_range(fake_mnist):
    ds = load_dataset("mnist", "test", limit=5, root=fake_mnist)
    assert len(ds) == 5
    assert ds.images.min() >= -1 and ds.images.max() <= 1


def test_cifar10_loads_from_directory(fake_cifar):
    ds = load_dataset("cifar10", "train", root=fake_cifar)
    assert ds.images.shape == (40, 3, 32, 32)
    test = load_dataset("cifar10", "test", limit=3, root=fake_cifar)
    assert len(test) == 3 and test.channels == 3 and test.num_classes == 10
    assert -1 <= test.images.min() and test.images.max() <= 1


def test_cifar100_fine_and_coarse_from_tarball(fake_cifar):
    fine = load_dataset("cifar100", "train", root=fake_cifar)
    coarse = load_dataset("cifar100", "train", root=fake_cifar, coarse_labels=True)
    assert fine.num_classes == 100 and coarse.num_classes == 20
    np.testing.assert_array_equal(coarse.labels, fine.labels % 20)


def test_missing_and_unknown(tmp_path):
    with pytest.raises(MissingSourceError):
        load_dataset("mnist", "train", root=tmp_path)
    with pytest.raises(MissingSourceError):
        load_dataset("cifar10", "train", root=tmp_path)
    with pytest.raises(UnknownDatasetError):
        load_dataset("svhn", "train", root=tmp_path)


def test_env_var_sets_root(fake_mnist, monkeypatch):
    monkeypatch.setenv("ANTIGAN_DATA_ROOT", str(fake_mnist))
    assert len(load_dataset("mnist", "test")) == 12


def test_loads_are_bit_deterministic(fake_mnist):
    a = load_dataset("mnist", "train", root=fake_mnist)
    b = load_dataset("mnist", "train", root=fake_mnist)
    assert a.images.tobytes() == b.images.tobytes()


@needs_mnist
def test_real_mnist_subset_loads():
    ds = load_dataset("mnist", "train", limit=1, root=DATA_ROOT)
    assert ds.images.min() >= -1 and ds.images.max() <= 1
    assert ds.channels == 1 and ds.num_classes == 10


@needs_mnist
def test_full_mnist_train_split_has_60000():
    ds = load_dataset("mnist", "train", root=DATA_ROOT)
    if len(ds) != 60000:
        pytest.skip(f"only a {len(ds)}-image MNIST subset is installed")
    assert ds.channels == 1 and ds.num_classes == 10


def test_normalize_endpoints():
    np.testing.assert_array_equal(normalize(np.array([0, 255], dtype=np.uint8)), [-1.0, 1.0])


@given(st.lists(st.integers(0, 255), min_size=1, max_size=200))
def test_normalize_round_trip(values):
    raw = np.array(values, dtype=np.uint8)
    np.testing.assert_array_equal(denormalize(normalize(raw)), raw)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 32, 32), np.float32), [0, 2], 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 32, 32), np.float32), [0], 2)


def test_partition_even_split():
    ds = make_dataset(10)
    parts = partition_clients(ds, 2, seed=7)
    assert [len(p) for p in parts] == [5, 5]
    a, b = (set(p.meta["indices"].tolist()) for p in parts)
    assert not a & b and a | b == set(range(10))


def test_partition_remainder():
    parts = partition_clients(make_dataset(11), 2, seed=7)
    assert sorted(len(p) for p in parts) == [5, 6]


def test_partition_deterministic():
    ds = make_dataset(30)
    p1 = partition_clients(ds, 3, seed=7)
    p2 = partition_clients(ds, 3, seed=7)
    for a, b in zip(p1, p2):
        np.testing.assert_array_equal(a.meta["indices"], b.meta["indices"])


def test_partition_errors():
    with pytest.raises(ValueError):
        partition_clients(make_dataset(3), 4, seed=0)
    with pytest.raises(ValueError):
        partition_clients(make_dataset(3), 1, seed=0)


@given(n=st.integers(2, 200), k=st.integers(2, 12), seed=st.integers(0, 10**6))
def test_partition_covers_exactly(n, k, seed):
    if k > n:
        return
    parts = partition_clients(make_dataset(n), k, seed)
    idx = np.concatenate([p.meta["indices"] for p in parts])
    assert sorted(idx.tolist()) == list(range(n))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1


def test_sample_class_singleton(rng):
    ds = make_dataset(5, num_classes=10, labels=[0, 1, 3, 1, 0])
    for _ in range(20):
        idx, img = sample_class(ds, 3, rng)
        assert idx == 2
        np.testing.assert_array_equal(img, ds.images[2])


def test_sample_class_empty(rng):
    with pytest.raises(EmptyClassError):
        sample_class(make_dataset(6, num_classes=10, labels=[0, 1] * 3), 5, rng)


def test_sample_class_is_uniform(rng):
    labels = [3, 4] * 5  # balanced two-class set, class 3 at even indices
    ds = make_dataset(10, num_classes=5, labels=labels)
    draws = [sample_class(ds, 3, rng)[0] for _ in range(10000)]
    counts = np.array([draws.count(i) for i in range(0, 10, 2)])
    assert counts.sum() == 10000
    sigma = np.sqrt(10000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 2000) < 3 * sigma)
    assert stats.chisquare(counts).pvalue > 1e-3
