"""Labeled synthetic point sets and their CSV format."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VAL_FRACTION = 0.1
# largest absolute coordinate after rescaling; leaves headroom below tanh's bound
SCALE_TARGET = 0.9


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"
    # multiplier applied to the generated coordinates
    scale: float = 1.0

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.samples.ndim != 2:
            raise ValueError("samples must be an n x D array")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _split_and_scale(points: np.ndarray, labels: np.ndarray, rng: np.random.Generator, scale: bool = True):
    peak = np.abs(points).max()
    factor = SCALE_TARGET / peak if scale and peak > 0 else 1.0
    points = points * factor
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = max(1, int(round(VAL_FRACTION * idx.size)))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    tr, va = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))
    return (
        LabeledDataset(points[tr], labels[tr], "train", factor),
        LabeledDataset(points[va], labels[va], "val", factor),
    )


def _check_common(C: int, n_per_class: int) -> None:
    if C < 2:
        raise ValueError(f"need at least 2 classes, got C={C}")
    if n_per_class < 4:
        raise ValueError(f"need at least 4 samples per class, got n_per_class={n_per_class}")


def make_gaussian_mixture(
    C: int = 8,
    n_per_class: int = 500,
    ring_radius: float = 2.0,
    sigma: float = 0.05,
    seed: int = 0,
    dim: int = 2,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Isotropic Gaussians centred evenly on a circle, split 90/10 per class.

    Extra dimensions beyond the first two carry centre coordinate 0.
    """
    _check_common(C, n_per_class)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(C) / C
    centres = np.zeros((C, dim))
    centres[:, 0] = ring_radius * np.cos(angles)
    centres[:, 1] = ring_radius * np.sin(angles)
    labels = np.repeat(np.arange(C), n_per_class)
    points = centres[labels] + sigma * rng.standard_normal((labels.size, dim))
    return _split_and_scale(points, labels, rng)


def make_rings(C: int = 4, n_per_class: int = 500, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Concentric circles of radius (c+1)/C with radial noise 0.02."""
    _check_common(C, n_per_class)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), n_per_class)
    theta = rng.uniform(0.0, 2.0 * np.pi, labels.size)
    radius = (labels + 1) / C + 0.02 * rng.standard_normal(labels.size)
    points = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    return _split_and_scale(points, labels, rng)


def _header(dim: int) -> list[str]:
    return [f"x{i}" for i in range(dim)] + ["label"]


def save_csv(dataset: LabeledDataset, path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_header(dataset.dim))
    for row, label in zip(dataset.samples, dataset.labels):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def load_csv(path: str | Path, split: str | None = None) -> LabeledDataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2 or header != _header(len(header) - 1):
        raise ValueError(f"{path}: bad header {header!r}; expected x0,...,x(D-1),label")
    dim = len(header) - 1
    samples, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 1:
            raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
        try:
            samples.append([float(v) for v in row[:dim]])
            label = int(row[dim])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if label < 0:
            raise ValueError(f"{path}:{lineno}: negative label {label}")
        labels.append(label)
    if not samples:
        raise ValueError(f"{path}: no data rows")
    if split is None:
        split = "val" if "val" in path.stem else "train"
    return LabeledDataset(np.array(samples), np.array(labels), split)
