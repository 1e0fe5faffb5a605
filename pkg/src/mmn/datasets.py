"""Paired (x, y) datasets: generation, splitting and CSV persistence."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .simulators import (ConfigurationError, ProblemSpec, builtin_handle, sample_prior,
                         simulate)

SPLITS = ("train", "val", "test")
PAPER_SIZES = {"sine": (8000, 2000, 1000), "arm": (8000, 2000, 1000), "shell": (40000, 5000, 500)}
DESK_SIZES = (2000, 500, 500)


class DatasetLoadError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass
class Dataset:
    problem: str
    X: np.ndarray
    Y: np.ndarray
    split: np.ndarray  # array of str, one of SPLITS per row
    provenance: str = "real"  # or "forward-generated"
    seed: int | None = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.X) != len(self.Y) or len(self.X) != len(self.split):
            raise ValueError("X, Y and split must have the same number of rows")
        self.split = np.asarray(self.split, dtype=object)

    def __len__(self):
        return len(self.X)

    def part(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        mask = self.split == name
        return self.X[mask], self.Y[mask]

    def sizes(self) -> Tuple[int, int, int]:
        return tuple(int(np.sum(self.split == s)) for s in SPLITS)

    def metadata(self) -> dict:
        return {"problem": self.problem, "provenance": self.provenance, "seed": self.seed,
                "dim_x": int(self.X.shape[1]), "dim_y": int(self.Y.shape[1]),
                "sizes": list(self.sizes()), **self.meta}

    def equals(self, other: "Dataset") -> bool:
        return (self.metadata() == other.metadata()
                and np.array_equal(self.X, other.X) and np.array_equal(self.Y, other.Y)
                and list(self.split) == list(other.split))


def split_labels(sizes) -> np.ndarray:
    return np.array([s for s, n in zip(SPLITS, sizes) for _ in range(n)], dtype=object)


def generate_dataset(problem: ProblemSpec, sizes=DESK_SIZES, seed: int = 0) -> Dataset:
    """Sample x from the prior, simulate y, and assign contiguous train/val/test blocks."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or sizes[0] < 1 or min(sizes) < 0:
        raise ConfigurationError(f"invalid split sizes {sizes}; train split must be non-empty")
    if problem.binding == "external":
        raise ConfigurationError("external problems are generated via generate_external_dataset")
    X = sample_prior(problem, sum(sizes), seed)
    Y = simulate(builtin_handle(problem), X)
    return Dataset(problem.name, X, Y, split_labels(sizes), "real", seed)


def generate_external_dataset(problem: ProblemSpec, handle, sizes, seed: int) -> Dataset:
    sizes = tuple(int(s) for s in sizes)
    if sizes[0] < 1:
        raise ConfigurationError("train split must be non-empty")
    X = sample_prior(problem, sum(sizes), seed)
    Y = simulate(handle, X)
    return Dataset(problem.name, X, Y, split_labels(sizes), "real", seed)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dataset_to_text(ds: Dataset) -> str:
    dx, dy = ds.X.shape[1], ds.Y.shape[1]
    lines = ["# " + json.dumps(ds.metadata(), sort_keys=True)]
    lines.append(",".join([f"x_{i}" for i in range(dx)] + [f"y_{j}" for j in range(dy)] + ["split"]))
    for x, y, s in zip(ds.X, ds.Y, ds.split):
        lines.append(",".join([_fmt(v) for v in x] + [_fmt(v) for v in y] + [s]))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> str:
    """Write ``ds`` as CSV; returns the sha256 of the file contents."""
    data = dataset_to_text(ds).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    meta = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        try:
            meta.update(json.loads(lines[i][1:]))
        except json.JSONDecodeError as exc:
            raise DatasetLoadError(f"malformed metadata line: {exc}", i + 1) from None
        i += 1
    if i >= len(lines) or not lines[i].strip():
        raise DatasetLoadError("missing header")
    cols = lines[i].split(",")
    if cols[-1] != "split":
        raise DatasetLoadError("malformed header: last column must be 'split'", i + 1)
    dx = sum(c.startswith("x_") for c in cols)
    dy = sum(c.startswith("y_") for c in cols)
    expected = [f"x_{k}" for k in range(dx)] + [f"y_{k}" for k in range(dy)] + ["split"]
    if cols != expected or dx == 0 or dy == 0:
        raise DatasetLoadError(f"malformed header {lines[i]!r}", i + 1)
    header_row = i + 1
    rows, labels = [], []
    for lineno, line in enumerate(lines[i + 1:], header_row + 1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != dx + dy + 1:
            raise DatasetLoadError(f"expected {dx + dy + 1} fields, got {len(cells)}", lineno)
        try:
            vals = [float(c) for c in cells[:-1]]
        except ValueError:
            raise DatasetLoadError("non-numeric cell", lineno) from None
        if not np.all(np.isfinite(vals)):
            raise DatasetLoadError("non-finite value", lineno)
        if cells[-1] not in SPLITS:
            raise DatasetLoadError(f"unknown split label {cells[-1]!r}", lineno)
        rows.append(vals)
        labels.append(cells[-1])
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), dx + dy)
    extra = {k: v for k, v in meta.items()
             if k not in ("problem", "provenance", "seed", "dim_x", "dim_y", "sizes")}
    return Dataset(meta.get("problem", "unknown"), arr[:, :dx], arr[:, dx:],
                   np.array(labels, dtype=object), meta.get("provenance", "real"),
                   meta.get("seed"), extra)
