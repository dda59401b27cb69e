"""Bags, datasets, feature normalization and the on-disk dataset formats.

Two text formats are supported:

``mil-csv``
    ``#dim=<d>`` header, then one instance per row:
    ``<bag_id>,<label>,<f1>,...,<fd>``.  Rows of a bag are contiguous.

``mil-sparse``
    ``#dim=<d>`` header, then one instance per line:
    ``<bag_id> <label> <idx>:<val> ...`` with 1-based indices; missing
    indices are zero.

Labels are ``-1``, ``1`` or ``?`` (unlabeled).  A multiclass file adds a
``#classes=<name>,<name>,...`` header, after which the label field holds a
class name (or ``?``) and bags carry the integer class index.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("mil-csv", "mil-sparse")


class DataError(ValueError):
    """Malformed or inconsistent dataset."""


class DataFormatError(DataError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line


@dataclass(frozen=True)
class Bag:
    """A labeled set of instances (rows of ``instances``)."""

    id: str
    instances: np.ndarray
    label: int | None = None

    def __post_init__(self):
        x = np.array(self.instances, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError(f"bag {self.id!r} has no instances")
        if not np.all(np.isfinite(x)):
            raise DataError(f"bag {self.id!r} contains non-finite features")
        x.flags.writeable = False
        object.__setattr__(self, "instances", x)

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    @property
    def dimension(self) -> int:
        return self.instances.shape[1]

    def with_label(self, label) -> "Bag":
        return Bag(self.id, self.instances, label)


@dataclass(frozen=True)
class Dataset:
    bags: tuple
    dimension: int
    class_names: tuple | None = None

    def __post_init__(self):
        bags = tuple(self.bags)
        object.__setattr__(self, "bags", bags)
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        seen = set()
        for bag in bags:
            if bag.dimension != self.dimension:
                raise DataError(
                    f"bag {bag.id!r} has dimension {bag.dimension}, expected {self.dimension}")
            if bag.id in seen:
                raise DataError(f"duplicate bag id {bag.id!r}")
            seen.add(bag.id)

    def __len__(self):
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    def __getitem__(self, i):
        return self.bags[i]

    @property
    def n_instances(self) -> int:
        return sum(b.size for b in self.bags)

    @property
    def is_multiclass(self) -> bool:
        return self.class_names is not None

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.bags]

    def labels(self) -> np.ndarray:
        if any(b.label is None for b in self.bags):
            raise DataError("dataset contains unlabeled bags")
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def instances(self) -> np.ndarray:
        """All instances pooled across bags, in bag order."""
        if not self.bags:
            return np.empty((0, self.dimension))
        return np.concatenate([b.instances for b in self.bags], axis=0)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.bags[i] for i in indices), self.dimension, self.class_names)

    def with_bags(self, bags: Sequence[Bag], class_names=...) -> "Dataset":
        names = self.class_names if class_names is ... else class_names
        return Dataset(tuple(bags), self.dimension, names)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.dimension).encode())
        for bag in self.bags:
            h.update(b"\x00" + bag.id.encode() + b"\x00" + repr(bag.label).encode())
            h.update(np.ascontiguousarray(bag.instances).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        std = np.array(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("mean and std must be vectors of equal length")
        if not np.all(std > 0):
            raise DataError("normalization std entries must be positive")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, d: int) -> "NormalizationStats":
        return cls(np.zeros(d), np.ones(d))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_normalization(dataset: Dataset) -> NormalizationStats:
    """Per-dimension mean and standard deviation over every instance.

    Dimensions whose standard deviation is below 1e-12 get 1.0 so the
    transform stays defined.
    """
    if len(dataset) == 0:
        raise DataError("cannot fit normalization on an empty dataset")
    x = dataset.instances()
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return NormalizationStats(mean, std)


def apply_normalization(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    if stats.dimension != dataset.dimension:
        raise DataError(
            f"normalization has dimension {stats.dimension}, dataset has {dataset.dimension}")
    bags = [Bag(b.id, stats.transform(b.instances), b.label) for b in dataset.bags]
    return dataset.with_bags(bags)


def stratified_fold_indices(labels: Sequence, folds: int, seed: int) -> list[np.ndarray]:
    """Held-out index sets of a stratified k-fold partition.

    Each class is shuffled and dealt round-robin over the folds; the dealing
    position carries over between classes so fold sizes differ by at most
    one.  Indices inside a fold are sorted.
    """
    labels = np.asarray(labels)
    if folds < 2:
        raise DataError("folds must be at least 2")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise DataError("stratified split needs at least two classes")
    if counts.min() < folds:
        small = classes[np.argmin(counts)]
        raise DataError(
            f"class {small} has {counts.min()} bags, fewer than the {folds} folds requested")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = (offset + np.arange(len(idx))) % folds
        offset = (offset + len(idx)) % folds
    return [np.flatnonzero(assignment == f) for f in range(folds)]


def stratified_split(dataset: Dataset, folds: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Stratified k-fold split into ``(train, held_out)`` pairs."""
    held = stratified_fold_indices(dataset.labels(), folds, seed)
    everything = np.arange(len(dataset))
    out = []
    for h in held:
        train = np.setdiff1d(everything, h)
        out.append((dataset.subset(train), dataset.subset(h)))
    return out


def stratified_holdout_indices(labels: Sequence, fraction: float, seed: int):
    """Single stratified split: ``fraction`` of every class goes to validation."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise DataError(f"class {c} has fewer than 2 bags; cannot hold any out")
        idx = idx[rng.permutation(len(idx))]
        n_val = min(len(idx) - 1, max(1, int(round(fraction * len(idx)))))
        val.extend(idx[:n_val].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


# ---------------------------------------------------------------------------
# file formats


def _parse_header(line: str, key: str):
    body = line[1:].strip()
    if not body.startswith(key + "="):
        return None
    return body[len(key) + 1:]


def _parse_label(tok: str, class_names, path, lineno):
    tok = tok.strip()
    if tok == "?":
        return None
    if class_names is not None:
        try:
            return class_names.index(tok)
        except ValueError:
            raise DataFormatError(f"unknown class label {tok!r}", path, lineno) from None
    if tok in ("1", "+1", "1.0", "+1.0"):
        return 1
    if tok in ("-1", "-1.0"):
        return -1
    raise DataFormatError(f"unknown label {tok!r} (expected -1, 1 or ?)", path, lineno)


def _parse_float(tok: str, path, lineno) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise DataFormatError(f"bad number {tok!r}", path, lineno) from None
    if not math.isfinite(v):
        raise DataFormatError(f"non-finite value {tok!r}", path, lineno)
    return v


class _BagAccumulator:
    def __init__(self, path, dim, class_names):
        self.path = path
        self.dim = dim
        self.class_names = class_names
        self.bags: list[Bag] = []
        self.closed: set[str] = set()
        self.cur_id = None
        self.cur_label = None
        self.rows: list = []

    def add(self, bag_id, label, row, lineno):
        if bag_id != self.cur_id:
            self.flush()
            if bag_id in self.closed:
                raise DataFormatError(f"rows of bag {bag_id!r} are not contiguous", self.path, lineno)
            self.cur_id, self.cur_label = bag_id, label
        elif label != self.cur_label:
            raise DataFormatError(f"conflicting labels within bag {bag_id!r}", self.path, lineno)
        self.rows.append(row)

    def flush(self):
        if self.cur_id is None:
            return
        self.bags.append(Bag(self.cur_id, np.array(self.rows), self.cur_label))
        self.closed.add(self.cur_id)
        self.cur_id, self.rows = None, []

    def dataset(self) -> Dataset:
        self.flush()
        if not self.bags:
            raise DataFormatError("file contains no bags", self.path)
        return Dataset(tuple(self.bags), self.dim, self.class_names)


def _read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield lineno, raw.rstrip("\r\n")


def load_dataset(path, format: str = "mil-csv") -> Dataset:
    """Read a dataset file; bag and instance order follow the file."""
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    dim = None
    class_names = None
    acc = None
    for lineno, line in _read_lines(path):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            d = _parse_header(stripped, "dim")
            c = _parse_header(stripped, "classes")
            if (d is not None or c is not None) and acc is not None:
                raise DataFormatError("header after data rows", path, lineno)
            if d is not None:
                try:
                    dim = int(d)
                except ValueError:
                    raise DataFormatError(f"bad dimension {d!r}", path, lineno) from None
                if dim < 1:
                    raise DataFormatError("dimension must be positive", path, lineno)
            elif c is not None:
                class_names = tuple(s.strip() for s in c.split(","))
                if len(class_names) < 2 or len(set(class_names)) != len(class_names):
                    raise DataFormatError("#classes needs at least two distinct names", path, lineno)
            continue
        if dim is None:
            raise DataFormatError("missing #dim=<d> header before data", path, lineno)
        if acc is None:
            acc = _BagAccumulator(path, dim, class_names)
        if format == "mil-csv":
            bag_id, label, row = _parse_csv_row(stripped, dim, class_names, path, lineno)
        else:
            bag_id, label, row = _parse_sparse_row(stripped, dim, class_names, path, lineno)
        acc.add(bag_id, label, row, lineno)
    if acc is None:
        raise DataFormatError("file contains no bags", path)
    return acc.dataset()


def _parse_csv_row(line, dim, class_names, path, lineno):
    parts = line.split(",")
    if len(parts) < 3:
        raise DataFormatError("expected <bag_id>,<label>,<features...>", path, lineno)
    bag_id = parts[0].strip()
    if not bag_id:
        raise DataFormatError("empty bag id", path, lineno)
    label = _parse_label(parts[1], class_names, path, lineno)
    feats = parts[2:]
    if len(feats) != dim:
        raise DataFormatError(
            f"dimension mismatch: row has {len(feats)} features, header declares {dim}", path, lineno)
    return bag_id, label, [_parse_float(t, path, lineno) for t in feats]


def _parse_sparse_row(line, dim, class_names, path, lineno):
    parts = line.split()
    if len(parts) < 2:
        raise DataFormatError("expected <bag_id> <label> <idx>:<val> ...", path, lineno)
    bag_id = parts[0]
    label = _parse_label(parts[1], class_names, path, lineno)
    row = [0.0] * dim
    for tok in parts[2:]:
        idx, sep, val = tok.partition(":")
        if not sep:
            raise DataFormatError(f"bad feature token {tok!r}", path, lineno)
        try:
            i = int(idx)
        except ValueError:
            raise DataFormatError(f"bad feature index {idx!r}", path, lineno) from None
        if not 1 <= i <= dim:
            raise DataFormatError(
                f"dimension mismatch: index {i} outside 1..{dim}", path, lineno)
        row[i - 1] = _parse_float(val, path, lineno)
    return bag_id, label, row


def _format_label(label, class_names) -> str:
    if label is None:
        return "?"
    if class_names is not None:
        return class_names[label]
    return str(int(label))


def save_dataset(dataset: Dataset, path, format: str = "mil-csv") -> None:
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}")
    for bag in dataset.bags:
        if "," in bag.id or any(ch.isspace() for ch in bag.id):
            raise DataError(f"bag id {bag.id!r} cannot be written (contains separator)")
    lines = [f"#dim={dataset.dimension}"]
    if dataset.class_names is not None:
        lines.append("#classes=" + ",".join(dataset.class_names))
    for bag in dataset.bags:
        lab = _format_label(bag.label, dataset.class_names)
        for row in bag.instances:
            if format == "mil-csv":
                lines.append(",".join([bag.id, lab] + [repr(float(v)) for v in row]))
            else:
                toks = [f"{i + 1}:{float(v)!r}" for i, v in enumerate(row) if v != 0.0]
                lines.append(" ".join([bag.id, lab] + toks))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def binarize(dataset: Dataset, positive: int) -> Dataset:
    """One-vs-rest relabeling of a multiclass dataset."""
    bags = [b.with_label(1 if b.label == positive else -1) for b in dataset.bags]
    return dataset.with_bags(bags, class_names=None)
