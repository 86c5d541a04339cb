"""Datasets, non-IID partitioning, and the local shard registry.

The sorted-label partitioner reproduces the classic pathological non-IID
setup: sort by label, cut into contiguous shards, hand one shard per client.
Shards are immutable once registered and can be persisted to disk in the same
binary container used for model parameters.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ParameterSet, deserialize_parameters, serialize_parameters

__all__ = [
    "Dataset",
    "Partition",
    "PartitionPlan",
    "ShardNotFoundError",
    "ShardRegistry",
    "synthetic_classification",
    "partition_sorted_label",
    "partition_per_user",
    "partition_iid",
    "split_train_test",
]


class ShardNotFoundError(KeyError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64 in [0, classes)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("features must be a non-empty (N, d) array")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must be one integer per example")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class Partition:
    shard_id: str
    train: Dataset
    test: Dataset

    @property
    def cardinality(self) -> int:
        return len(self.train)

    @property
    def test_cardinality(self) -> int:
        return len(self.test)


@dataclass(frozen=True)
class PartitionPlan:
    strategy: str  # "sorted_label_shards" | "per_user" | "iid_uniform"
    shard_count: int
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("sorted_label_shards", "per_user", "iid_uniform"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.shard_count < 1:
            raise ValueError("shard_count must be >= 1")


def synthetic_classification(
    n: int,
    d: int = 32,
    classes: int = 10,
    seed: int = 0,
    cluster_spread: float = 4.0,
    cluster_seed: int | None = None,
) -> Dataset:
    """Gaussian class clusters with unit noise; near-separable by design.

    `cluster_seed` fixes the class means independently of the sampling seed,
    so train and test sets drawn with different seeds share a distribution.
    """
    means_rng = np.random.default_rng(seed if cluster_seed is None else cluster_seed)
    means = means_rng.normal(size=(classes, d))
    means *= cluster_spread / np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    features = means[labels] + rng.normal(size=(n, d))
    return Dataset(features, labels)


def _shard_sizes(n: int, shard_count: int) -> list[int]:
    # Remainder examples go one-per-shard from the front.
    base, extra = divmod(n, shard_count)
    return [base + 1 if k < extra else base for k in range(shard_count)]


def partition_sorted_label(ds: Dataset, shard_count: int) -> list[Partition]:
    """Stable sort by label, then contiguous shards (the raw shards carry all
    examples as `train`; apply split_train_test for a held-out slice)."""
    n = len(ds)
    if shard_count > n:
        raise ValueError(f"shard_count {shard_count} exceeds dataset size {n}")
    order = np.argsort(ds.labels, kind="stable")
    groups = []
    offset = 0
    for size in _shard_sizes(n, shard_count):
        groups.append(order[offset : offset + size])
        offset += size
    return [
        Partition(f"shard-{k:04d}", ds.subset(idx), _EMPTY)
        for k, idx in enumerate(groups)
    ]


def partition_per_user(ds: Dataset, user_sizes: list[int], seed: int = 0) -> list[Partition]:
    """Unbalanced per-user shards: a seeded permutation sliced to the given sizes."""
    if any(s < 1 for s in user_sizes):
        raise ValueError("user sizes must be positive")
    total = int(sum(user_sizes))
    if total > len(ds):
        raise ValueError(f"user sizes sum to {total}, dataset has {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    groups = []
    offset = 0
    for size in user_sizes:
        groups.append(order[offset : offset + size])
        offset += size
    return [
        Partition(f"user-{k:04d}", ds.subset(idx), _EMPTY)
        for k, idx in enumerate(groups)
    ]


def partition_iid(ds: Dataset, shard_count: int, seed: int = 0) -> list[Partition]:
    n = len(ds)
    if shard_count > n:
        raise ValueError(f"shard_count {shard_count} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    groups = []
    offset = 0
    for size in _shard_sizes(n, shard_count):
        groups.append(order[offset : offset + size])
        offset += size
    return [
        Partition(f"iid-{k:04d}", ds.subset(idx), _EMPTY)
        for k, idx in enumerate(groups)
    ]


def partition(ds: Dataset, plan: PartitionPlan, user_sizes: list[int] | None = None):
    if plan.strategy == "sorted_label_shards":
        return partition_sorted_label(ds, plan.shard_count)
    if plan.strategy == "iid_uniform":
        return partition_iid(ds, plan.shard_count, plan.seed)
    if user_sizes is None:
        raise ValueError("per_user strategy needs explicit user_sizes")
    return partition_per_user(ds, user_sizes, plan.seed)


class _EmptyDataset:
    # Raw shards have no test split yet; Dataset itself forbids N == 0.
    features = np.empty((0, 0))
    labels = np.empty((0,), dtype=np.int64)

    def __len__(self):
        return 0


_EMPTY = _EmptyDataset()


def split_train_test(p: Partition, test_fraction: float, seed: int = 0) -> Partition:
    """Carve a held-out test slice out of a raw shard; deterministic per seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = p.cardinality
    if n < 2:
        raise ValueError(f"shard {p.shard_id} too small to split ({n} examples)")
    n_test = max(1, round(test_fraction * n))
    if n_test >= n:
        n_test = n - 1
    order = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    return Partition(p.shard_id, p.train.subset(np.sort(train_idx)), p.train.subset(np.sort(test_idx)))


def _dataset_to_bytes(ds: Dataset) -> bytes:
    container = ParameterSet(
        (("features", ds.features), ("labels", ds.labels.astype(np.float64)))
    )
    return serialize_parameters(container)


def _dataset_from_bytes(blob: bytes) -> Dataset:
    container = deserialize_parameters(blob)
    return Dataset(container["features"], container["labels"].astype(np.int64))


class ShardRegistry:
    """In-process shard store keyed by id; read-mostly and thread-safe.

    `latency_hook`, when set, is called with the shard id on every fetch so a
    fabric handler can charge simulated download time.
    """

    def __init__(self):
        self._shards: dict[str, Partition] = {}
        self._lock = threading.Lock()
        self.latency_hook = None

    def register(self, p: Partition):
        with self._lock:
            if p.shard_id in self._shards:
                raise ValueError(f"shard {p.shard_id!r} already registered")
            self._shards[p.shard_id] = p

    def register_all(self, parts):
        for p in parts:
            self.register(p)

    def serve_shard(self, shard_id: str) -> Partition:
        with self._lock:
            try:
                shard = self._shards[shard_id]
            except KeyError:
                raise ShardNotFoundError(shard_id) from None
        if self.latency_hook is not None:
            self.latency_hook(shard_id)
        return shard

    def list_shards(self) -> list[str]:
        with self._lock:
            return sorted(self._shards)

    def save(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for shard_id in self.list_shards():
            p = self._shards[shard_id]
            train_blob = _dataset_to_bytes(p.train)
            test_blob = _dataset_to_bytes(p.test) if p.test_cardinality else b""
            (directory / f"{shard_id}.train.bin").write_bytes(train_blob)
            if test_blob:
                (directory / f"{shard_id}.test.bin").write_bytes(test_blob)
            manifest = {
                "shard_id": shard_id,
                "cardinality": p.cardinality,
                "test_cardinality": p.test_cardinality,
                "checksum": hashlib.sha256(train_blob + test_blob).hexdigest(),
            }
            (directory / f"{shard_id}.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "ShardRegistry":
        directory = Path(directory)
        registry = cls()
        for manifest_path in sorted(directory.glob("*.json")):
            manifest = json.loads(manifest_path.read_text())
            shard_id = manifest["shard_id"]
            train_blob = (directory / f"{shard_id}.train.bin").read_bytes()
            test_path = directory / f"{shard_id}.test.bin"
            test_blob = test_path.read_bytes() if test_path.exists() else b""
            digest = hashlib.sha256(train_blob + test_blob).hexdigest()
            if digest != manifest["checksum"]:
                raise ValueError(f"checksum mismatch for shard {shard_id!r}")
            train = _dataset_from_bytes(train_blob)
            test = _dataset_from_bytes(test_blob) if test_blob else _EMPTY
            registry.register(Partition(shard_id, train, test))
        return registry
