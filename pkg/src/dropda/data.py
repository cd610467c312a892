"""Synthetic source/target datasets, CSV round-tripping and paired batching."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dropda.errors import DimensionError, ParseError, ValidationError

SOURCE, TARGET = "source", "target"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    domain: str
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got {self.features.shape}")
        if self.domain not in (SOURCE, TARGET):
            raise ValidationError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.labels is not None:
            if self.labels.shape != (len(self.features),):
                raise DimensionError(f"{len(self.features)} rows but {self.labels.shape} labels")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValidationError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def unlabeled(self) -> "Dataset":
        return replace(self, labels=None)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.domain == other.domain and self.n_classes == other.n_classes
                and np.array_equal(self.features, other.features) and same_labels)


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "rotation"
    angle: float = 0.0  # degrees
    offset: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("rotation", "translation"):
            raise ValidationError(f"unknown shift kind {self.kind!r}")


def make_two_moons(n: int, noise: float, rng: np.random.Generator) -> Dataset:
    """Two interleaved unit half-circles; class 0 is the upper moon.

    Angles are evenly spaced per class, Gaussian noise of std ``noise`` is
    added, and row order is shuffled.
    """
    if n < 2:
        raise ValidationError(f"need at least 2 points, got {n}")
    if noise < 0:
        raise ValidationError("noise must be non-negative")
    n0 = n - n // 2
    n1 = n // 2
    t0 = np.linspace(0.0, math.pi, n0)
    t1 = np.linspace(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], SOURCE, 2)


def make_blobs(n: int, n_classes: int, means, std: float, rng: np.random.Generator) -> Dataset:
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or len(means) != n_classes:
        raise ValidationError(f"expected {n_classes} class means, got array of shape {means.shape}")
    if std < 0:
        raise ValidationError("std must be non-negative")
    if n < n_classes:
        raise ValidationError(f"need at least one point per class, got n={n}")
    # balanced up to a remainder spread over the first classes
    counts = [n // n_classes + (c < n % n_classes) for c in range(n_classes)]
    y = np.repeat(np.arange(n_classes), counts)
    x = means[y] + rng.normal(0.0, 1.0, size=(n, means.shape[1])) * std
    order = rng.permutation(n)
    return Dataset(x[order], y[order], SOURCE, n_classes)


def rotation_matrix(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def apply_shift(ds: Dataset, spec: ShiftSpec) -> Dataset:
    """Shifted copy tagged as target. Labels are kept; call ``unlabeled()`` for training."""
    if spec.kind == "rotation":
        if ds.dim != 2:
            raise ValidationError(f"rotation needs 2-D features, got {ds.dim}")
        x = ds.features @ rotation_matrix(spec.angle).T
    else:
        offset = np.asarray(spec.offset, dtype=np.float64)
        if offset.shape != (ds.dim,):
            raise DimensionError(f"offset of length {offset.size} for {ds.dim}-D features")
        x = ds.features + offset
    return replace(ds, features=x, domain=TARGET)


def save_csv(ds: Dataset, path) -> None:
    """Header ``f0,...,f{d-1},label,domain``; label is empty when absent."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label", "domain"])
        for i, row in enumerate(ds.features):
            label = "" if ds.labels is None else str(int(ds.labels[i]))
            w.writerow([repr(float(v)) for v in row] + [label, ds.domain])


def load_csv(path, n_classes: int | None = None, require_labels: bool | None = None) -> Dataset:
    """Read a file written by ``save_csv``.

    ``require_labels`` defaults to True for source files. ``n_classes``
    defaults to ``max(label) + 1``.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 3 or header[-2:] != ["label", "domain"]:
        raise ParseError(f"{path}:1: header must end with 'label,domain', got {header}")
    dim = len(header) - 2
    feats, labels, domains = [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 2:
            raise ParseError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:dim]])
            labels.append(int(row[dim]) if row[dim] != "" else None)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        domains.add(row[dim + 1])
    if not feats:
        raise ParseError(f"{path}: no data rows")
    if len(domains) != 1:
        raise ParseError(f"{path}: mixed domain column {sorted(domains)}")
    domain = domains.pop()
    present = [v is not None for v in labels]
    if any(present) and not all(present):
        raise ValidationError(f"{path}: label column is only partially filled")
    has_labels = all(present)
    if require_labels is None:
        require_labels = domain == SOURCE
    if require_labels and not has_labels:
        raise ValidationError(f"{path}: labels are required but the label column is empty")
    y = np.array(labels, dtype=np.int64) if has_labels else None
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y is not None else 0
    return Dataset(np.array(feats, dtype=np.float64), y, domain, n_classes)


@dataclass
class DomainBatch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray

    @property
    def n_source(self):
        return len(self.source_x)

    @property
    def inputs(self) -> np.ndarray:
        return np.vstack([self.source_x, self.target_x])

    @property
    def domain_labels(self) -> np.ndarray:
        return np.concatenate([np.zeros(len(self.source_x)), np.ones(len(self.target_x))])


def batches_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return max(n_source, n_target) // batch_size


def batch_iter(source: Dataset, target: Dataset, batch_size: int, rng: np.random.Generator,
               shuffle: bool = True):
    """One epoch of paired batches.

    The epoch length follows the larger dataset; the smaller one is cycled.
    Trailing partial batches are dropped.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValidationError("source and target must be non-empty")
    if source.labels is None:
        raise ValidationError("source dataset needs labels")
    if batch_size < 1 or batch_size > min(len(source), len(target)):
        raise ValidationError(
            f"batch_size {batch_size} must be in [1, {min(len(source), len(target))}]")
    n_batches = batches_per_epoch(len(source), len(target), batch_size)
    total = n_batches * batch_size

    def order(n):
        idx = rng.permutation(n) if shuffle else np.arange(n)
        reps = -(-total // n)
        return np.tile(idx, reps)[:total]

    s_idx, t_idx = order(len(source)), order(len(target))
    for b in range(n_batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        yield DomainBatch(source.features[s_idx[sl]], source.labels[s_idx[sl]],
                          target.features[t_idx[sl]])
