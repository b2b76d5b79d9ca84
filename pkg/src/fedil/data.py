"""Datasets, the labeled/unlabeled split and client partitioning."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Example:
    id: int
    features: np.ndarray
    true_label: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of examples; ``labels`` are ground truth."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(self.ids, np.int64))
        object.__setattr__(self, "features", _frozen(self.features, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        if not (len(self.ids) == len(self.features) == len(self.labels)):
            raise ConfigurationError("ids, features and labels differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ConfigurationError("example ids are not unique")
        if len(self.features) and not np.all(np.isfinite(self.features)):
            raise ConfigurationError("non-finite feature values")

    def __len__(self):
        return len(self.ids)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> Example:
        return Example(int(self.ids[i]), self.features[i], int(self.labels[i]))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.ids[rows], self.features[rows], self.labels[rows],
                       self.num_classes, self.image_shape)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", *[f"x{j}" for j in range(self.input_dim)]])
            for i in range(len(self)):
                writer.writerow([int(self.ids[i]), int(self.labels[i]), *map(repr, self.features[i].tolist())])
        return path


@dataclass(frozen=True, eq=False)
class LabeledSet:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.ids)


class UnlabeledShard:
    """A client's slice of the unlabeled pool.

    Ground-truth labels are deliberately not stored here: nothing reachable
    from a shard can reveal them.
    """

    __slots__ = ("client_id", "ids", "features", "image_shape", "_row")

    def __init__(self, client_id: int, ids, features, image_shape=None):
        self.client_id = int(client_id)
        self.ids = _frozen(ids, np.int64)
        self.features = _frozen(features, np.float64)
        if self.features.ndim != 2:
            self.features = _frozen(self.features.reshape(len(self.ids), -1), np.float64)
        self.image_shape = image_shape
        self._row = {int(e): r for r, e in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def row_of(self, example_id: int) -> int:
        return self._row[int(example_id)]

    def resolve(self, example_id: int) -> Example:
        """Original (un-augmented) example for ``example_id``."""
        return Example(int(example_id), self.features[self._row[int(example_id)]])

    def __repr__(self):
        return f"UnlabeledShard(client_id={self.client_id}, n={len(self)})"


@dataclass(frozen=True)
class PartitionPlan:
    gamma: float
    num_clients: int
    regime: str = "iid"
    class_fraction: float = 1.0
    seed: int = 0

    def validate(self, dataset_size: int, num_classes: int):
        if not 0 < self.gamma < 1:
            raise ConfigurationError(f"label rate must be in (0, 1), got {self.gamma}")
        if self.regime not in ("iid", "non-iid"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if not 0 < self.class_fraction <= 1:
            raise ConfigurationError(f"class_fraction must be in (0, 1], got {self.class_fraction}")
        if self.gamma * dataset_size < num_classes:
            raise ConfigurationError(
                f"gamma*|D| = {self.gamma * dataset_size:g} is below the class count {num_classes}"
            )

    def apply(self, dataset: Dataset) -> tuple[LabeledSet, list[UnlabeledShard]]:
        self.validate(len(dataset), dataset.num_classes)
        labeled, pool = split_by_label_rate(dataset, self.gamma, self.seed)
        if self.regime == "iid":
            shards = partition_iid(pool, self.num_clients, self.seed)
        else:
            shards = partition_noniid(pool, self.num_clients, self.class_fraction, self.seed)
        return labeled, shards


def _apportion(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportional to ``counts``,
    giving every non-empty class at least one slot when ``total`` allows."""
    n = counts.sum()
    exact = counts * total / n
    quota = np.floor(exact).astype(np.int64)
    rest = total - quota.sum()
    order = np.lexsort((np.arange(len(counts)), -(exact - quota)))
    quota[order[:rest]] += 1
    present = counts > 0
    if total >= present.sum():
        for c in np.flatnonzero(present & (quota == 0)):
            donor = int(np.argmax(quota))
            quota[donor] -= 1
            quota[c] += 1
    return quota


def split_by_label_rate(dataset: Dataset, gamma: float, seed: int) -> tuple[LabeledSet, Dataset]:
    """Stratified split into the server's labeled set and the unlabeled pool."""
    if not 0 < gamma < 1:
        raise ConfigurationError(f"label rate must be in (0, 1), got {gamma}")
    n_labeled = int(math.floor(gamma * len(dataset) + 0.5))
    if gamma * len(dataset) < 1 or n_labeled < 1:
        raise ConfigurationError(f"gamma*|D| = {gamma * len(dataset):g} leaves no labeled example")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    quota = _apportion(counts, n_labeled)
    chosen = []
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == c)
        chosen.append(rng.permutation(rows)[:quota[c]])
    chosen = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(dataset)), chosen)
    lab = dataset.subset(chosen)
    labeled = LabeledSet(lab.ids, lab.features, lab.labels, dataset.num_classes)
    return labeled, dataset.subset(rest)


def partition_iid(pool: Dataset, num_clients: int, seed: int) -> list[UnlabeledShard]:
    if num_clients < 1 or num_clients > len(pool):
        raise ConfigurationError(f"cannot split {len(pool)} examples across {num_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    order = rng.permutation(len(pool))
    return [UnlabeledShard(k, pool.ids[np.sort(rows)], pool.features[np.sort(rows)], pool.image_shape)
            for k, rows in enumerate(np.array_split(order, num_clients))]


def classes_per_shard(class_fraction: float, num_classes: int) -> int:
    # round() first so 0.2 * 10 does not become 3 through float noise
    return max(1, math.ceil(round(class_fraction * num_classes, 9)))


def partition_noniid(pool: Dataset, num_clients: int, class_fraction: float, seed: int) -> list[UnlabeledShard]:
    """Each shard holds examples from exactly ``ceil(class_fraction * C)`` classes.

    Classes are dealt to shards round-robin over a seeded class order; the
    examples of each class are then split evenly among the shards holding it.
    """
    C = pool.num_classes
    if not 0 < class_fraction <= 1:
        raise ConfigurationError(f"class_fraction must be in (0, 1], got {class_fraction}")
    k = classes_per_shard(class_fraction, C)
    if num_clients < 1:
        raise ConfigurationError("need at least one client")
    if num_clients * k < C:
        raise ConfigurationError(
            f"{num_clients} shards x {k} classes cannot cover {C} classes"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    class_order = rng.permutation(C)
    shard_classes = [[int(class_order[(s * k + j) % C]) for j in range(k)] for s in range(num_clients)]
    holders = {c: [s for s in range(num_clients) if c in shard_classes[s]] for c in range(C)}
    rows_of = {s: [] for s in range(num_clients)}
    for c in range(C):
        rows = rng.permutation(np.flatnonzero(pool.labels == c))
        if len(rows) < len(holders[c]):
            raise ConfigurationError(
                f"class {c} has {len(rows)} examples for {len(holders[c])} shards"
            )
        for s, part in zip(holders[c], np.array_split(rows, len(holders[c]))):
            rows_of[s].append(part)
    shards = []
    for s in range(num_clients):
        rows = np.sort(np.concatenate(rows_of[s]))
        shards.append(UnlabeledShard(s, pool.ids[rows], pool.features[rows], pool.image_shape))
    return shards


def holdout_split(dataset: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Remove ``per_class`` examples of every class as a test set."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    test_rows = []
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == c)
        test_rows.append(rng.permutation(rows)[:per_class])
    test_rows = np.sort(np.concatenate(test_rows))
    train_rows = np.setdiff1d(np.arange(len(dataset)), test_rows)
    return dataset.subset(train_rows), dataset.subset(test_rows)


def gen_synthetic(num_classes: int, n_per_class: int, dim: int, separation: float, seed: int) -> Dataset:
    """Unit-covariance Gaussian clusters whose means are pairwise
    ``separation`` apart (exactly when ``num_classes <= dim``)."""
    if num_classes < 2 or dim < 2:
        raise ConfigurationError("need num_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 505]))
    if num_classes <= dim:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        directions = basis[:, :num_classes].T
    else:
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (separation / np.sqrt(2.0))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(np.arange(len(labels)), features[order], labels[order], num_classes)


def _read_idx_header(raw: bytes, path, magic: int, ndims: int):
    need = 4 + 4 * ndims
    if len(raw) < need:
        raise FormatError(f"{path}: header needs {need} bytes, file has {len(raw)}", offset=len(raw))
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack_from(f">{ndims}I", raw, 4), need


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    (count, rows, cols), off = _read_idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    expected = count * rows * cols
    if len(img_raw) - off != expected:
        raise FormatError(
            f"{images_path}: expected {expected} pixel bytes, found {len(img_raw) - off}",
            offset=off + min(expected, len(img_raw) - off),
        )
    (n_labels,), loff = _read_idx_header(lab_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab_raw) - loff != n_labels:
        raise FormatError(
            f"{labels_path}: expected {n_labels} label bytes, found {len(lab_raw) - loff}",
            offset=loff + min(n_labels, len(lab_raw) - loff),
        )
    if n_labels != count:
        raise FormatError(f"image count {count} does not match label count {n_labels}", offset=4)
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=off).reshape(count, rows * cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=loff).astype(np.int64)
    if count and labels.max() > 9:
        raise FormatError(f"{labels_path}: label {labels.max()} outside 0-9", offset=loff + int(np.argmax(labels)))
    return Dataset(np.arange(count), pixels.astype(np.float64) / 255.0, labels, 10, (rows, cols))
