"""Dataset ingestion, normalization, client partitioning and class sampling.

Images are kept as float32 arrays shaped (N, C, 32, 32) with pixels in
[-1, 1]. Raw archives are read from a data root given explicitly, through
``ANTIGAN_DATA_ROOT``, or ``./data``.
"""
from __future__ import annotations

import gzip
import os
import pickle
import tarfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "ANTIGAN_DATA_ROOT"
IMAGE_SIZE = 32
SUPPORTED = ("mnist", "cifar10", "cifar100")


class DatasetError(Exception):
    pass


class MissingSourceError(DatasetError, FileNotFoundError):
    pass


class UnknownDatasetError(DatasetError, ValueError):
    pass


class EmptyClassError(DatasetError, ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images paired with integer labels.

    ``provenance`` names the role of the data ("real", "generated", "mixed")
    and ``private`` marks records the defender must never release.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = "real"
    private: bool = False
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be rank-4 (N, C, H, W), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels length must equal image count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices], meta=dict(self.meta))

    def of_class(self, label: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def classes_present(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))


def normalize(raw: np.ndarray) -> np.ndarray:
    return (np.asarray(raw, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize(images: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, rounding to the nearest byte."""
    return np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


# --- MNIST -------------------------------------------------------------------

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] != 0x08:
        raise DatasetError(f"{path} is not an unsigned-byte IDX file")
    ndim = buf[3]
    dims = [int.from_bytes(buf[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    data = np.frombuffer(buf, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload size does not match header {dims}")
    return data.reshape(dims)


def write_idx(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _find(root: Path, dirs, stem: str) -> Path:
    for d in dirs:
        for suffix in ("", ".gz"):
            p = root / d / (stem + suffix)
            if p.exists():
                return p
    raise MissingSourceError(f"could not find {stem}[.gz] under {root} (looked in {list(dirs)})")


def _load_mnist_raw(root: Path, split: str):
    dirs = ("mnist", "MNIST/raw", ".")
    img_stem, lbl_stem = _MNIST_FILES[split]
    images = read_idx(_find(root, dirs, img_stem))
    labels = read_idx(_find(root, dirs, lbl_stem))
    pad = (IMAGE_SIZE - images.shape[1]) // 2
    # pad with raw 0, which normalizes to the -1 background
    images = np.pad(images, ((0, 0), (pad, pad), (pad, pad)))[:, None]
    return images, labels, 10


# --- CIFAR -------------------------------------------------------------------

def _unpickle_members(root: Path, folder: str, archive: str, members):
    out = []
    base = root / folder
    if base.is_dir():
        for m in members:
            p = base / m
            if not p.exists():
                raise MissingSourceError(f"missing {p}")
            with open(p, "rb") as fh:
                out.append(pickle.load(fh, encoding="bytes"))
        return out
    tar_path = root / archive
    if not tar_path.exists():
        raise MissingSourceError(f"neither {base} nor {tar_path} exists")
    with tarfile.open(tar_path, "r:gz") as tar:
        for m in members:
            fh = tar.extractfile(f"{folder}/{m}")
            if fh is None:
                raise MissingSourceError(f"{tar_path} has no member {folder}/{m}")
            out.append(pickle.load(fh, encoding="bytes"))
    return out


def _load_cifar10_raw(root: Path, split: str):
    members = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    batches = _unpickle_members(root, "cifar-10-batches-py", "cifar-10-python.tar.gz", members)
    images = np.concatenate([np.asarray(b[b"data"], dtype=np.uint8) for b in batches])
    labels = np.concatenate([np.asarray(b[b"labels"]) for b in batches])
    return images.reshape(-1, 3, 32, 32), labels, 10


def _load_cifar100_raw(root: Path, split: str, coarse: bool):
    (batch,) = _unpickle_members(root, "cifar-100-python", "cifar-100-python.tar.gz", [split])
    key = b"coarse_labels" if coarse else b"fine_labels"
    images = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
    return images, np.asarray(batch[key]), 20 if coarse else 100


def load_dataset(name: str, split: str = "train", limit: int | None = None, root=None,
                 coarse_labels: bool = False) -> LabeledDataset:
    """Load ``name`` ("mnist", "cifar10", "cifar100") as a normalized dataset.

    The first ``limit`` records in file order are kept, so results are
    deterministic for identical source files.
    """
    if name not in SUPPORTED:
        raise UnknownDatasetError(f"unknown dataset {name!r}; expected one of {SUPPORTED}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = data_root(root)
    if name == "mnist":
        raw, labels, k = _load_mnist_raw(root, split)
    elif name == "cifar10":
        raw, labels, k = _load_cifar10_raw(root, split)
    else:
        raw, labels, k = _load_cifar100_raw(root, split, coarse_labels)
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    return LabeledDataset(normalize(raw), labels, k, provenance="real", name=f"{name}/{split}")


def partition_clients(ds: LabeledDataset, num_clients: int, seed: int) -> list[LabeledDataset]:
    """IID split into ``num_clients`` disjoint shards whose sizes differ by at most one."""
    if num_clients < 2:
        raise ValueError("num_clients must be at least 2")
    if num_clients > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples across {num_clients} clients")
    order = np.random.default_rng(seed).permutation(len(ds))
    shards = np.array_split(order, num_clients)
    out = []
    for k, idx in enumerate(shards):
        idx = np.sort(idx)
        part = ds.subset(idx)
        part.meta["indices"] = idx
        part.meta["client"] = k
        out.append(part)
    return out


def sample_class(ds: LabeledDataset, label: int, rng: np.random.Generator):
    """Uniformly draw one example of class ``label``; returns ``(index, image)``."""
    candidates = np.flatnonzero(ds.labels == label)
    if candidates.size == 0:
        raise EmptyClassError(f"no examples of class {label}")
    idx = int(candidates[rng.integers(candidates.size)])
    return idx, ds.images[idx]
