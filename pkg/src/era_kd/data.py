"""Synthetic Gaussian-cluster classification data, CSV I/O and batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIOError, InputError, SpecError


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    input_dim: int
    samples_per_class: int
    cluster_means: np.ndarray = field(repr=False)
    cluster_scale: float = 1.0
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.cluster_means, dtype=np.float64)
        object.__setattr__(self, "cluster_means", means)
        if self.num_classes < 2 or self.input_dim < 1 or self.samples_per_class < 1:
            raise SpecError("num_classes >= 2, input_dim >= 1 and samples_per_class >= 1 required")
        if means.shape != (self.num_classes, self.input_dim):
            raise SpecError(f"cluster_means must be {self.num_classes}x{self.input_dim}, got {means.shape}")
        if not self.cluster_scale > 0:
            raise SpecError(f"cluster_scale must be > 0, got {self.cluster_scale}")
        if not 0.0 <= self.label_noise < 1.0:
            raise SpecError(f"label_noise must lie in [0, 1), got {self.label_noise}")
        if len({row.tobytes() for row in means}) != self.num_classes:
            raise SpecError("cluster means must be pairwise distinct")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InputError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("labels must be non-negative class indices")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.split)


def random_means(num_classes: int, input_dim: int, radius: float, seed: int) -> np.ndarray:
    """Class centres drawn uniformly on a sphere of the given radius."""
    rng = np.random.default_rng([seed, 7919])
    raw = rng.standard_normal((num_classes, input_dim))
    return radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Sample Gaussian clusters and split each class 80/20 into train/test."""
    rng = np.random.default_rng(spec.seed)
    M, n = spec.num_classes, spec.samples_per_class
    n_train = (4 * n) // 5
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(M):
        x = spec.cluster_means[c] + spec.cluster_scale * rng.standard_normal((n, spec.input_dim))
        y = np.full(n, c, dtype=np.int64)
        if spec.label_noise > 0:
            flip = rng.random(n) < spec.label_noise
            y[flip] = rng.integers(0, M, size=int(flip.sum()))
        perm = rng.permutation(n)
        train_x.append(x[perm[:n_train]])
        train_y.append(y[perm[:n_train]])
        test_x.append(x[perm[n_train:]])
        test_y.append(y[perm[n_train:]])
    out = []
    for xs, ys, split in ((train_x, train_y, "train"), (test_x, test_y, "test")):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        out.append(Dataset(x[order], y[order], split))
    return out[0], out[1]


def save_csv(ds: Dataset, path, header: bool = True) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if header:
            cols = [f"f{i + 1}" for i in range(ds.input_dim)] + ["label"]
            fh.write("# " + ",".join(cols) + "\n")
        for row, label in zip(ds.features, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv(path, input_dim: int | None = None, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Parse ``f1,...,fd,label`` rows; an optional first line may start with ``#``.

    ``input_dim``/``num_classes`` act as an optional schema.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    start = 1 if lines and lines[0].startswith("#") else 0
    feats, labels = [], []
    width = input_dim
    for lineno, row in enumerate(csv.reader(lines[start:]), start=start + 1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            values = [float(cell) for cell in row[:-1]]
            label = int(row[-1])
        except ValueError:
            raise DataIOError(f"{path}:{lineno}: malformed row {','.join(row)!r}", line=lineno) from None
        if width is None:
            width = len(values)
        if len(values) != width or width == 0:
            raise DataIOError(f"{path}:{lineno}: expected {width} features, got {len(values)}", line=lineno)
        if not np.isfinite(values).all():
            raise DataIOError(f"{path}:{lineno}: non-finite feature value", line=lineno)
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataIOError(f"{path}:{lineno}: label {label} out of range", line=lineno)
        feats.append(values)
        labels.append(label)
    if not labels:
        raise InputError(f"{path}: no samples")
    return Dataset(np.array(feats), np.array(labels), split)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(len(ds))
    return [(ds.features[perm[i:i + batch_size]], ds.labels[perm[i:i + batch_size]])
            for i in range(0, len(ds), batch_size)]


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of the class-mean classifier fitted on ``train``."""
    classes = np.unique(train.labels)
    centres = np.stack([train.features[train.labels == c].mean(axis=0) for c in classes])
    d = ((test.features[:, None, :] - centres[None]) ** 2).sum(axis=2)
    pred = classes[d.argmin(axis=1)]
    return float((pred == test.labels).mean())
