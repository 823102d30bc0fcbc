from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FormatError
from ..numerics import seeded_rng


@dataclass
class Dataset:
    """Labeled images (N, C, H, W) in [0, 1]; ``test_mask`` marks held-out items."""

    x: np.ndarray
    y: np.ndarray
    test_mask: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.y) != len(self.test_mask):
            raise ValueError(
                f"dataset {self.name}: {len(self.x)} images, {len(self.y)} labels, {len(self.test_mask)} split flags"
            )

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def with_holdout(self, fraction: float, seed: int) -> Dataset:
        """Mark a seeded per-class fraction of items as test."""
        rng = seeded_rng(seed, "dataset/holdout")
        mask = np.zeros(len(self.y), dtype=bool)
        for c in np.unique(self.y):
            idx = np.flatnonzero(self.y == c)
            n_test = int(round(fraction * len(idx)))
            mask[rng.permutation(idx)[:n_test]] = True
        return Dataset(self.x, self.y, mask, self.n_classes, self.name)

    @staticmethod
    def join(train: Dataset, test: Dataset) -> Dataset:
        if train.input_shape != test.input_shape:
            raise FormatError(f"train images {train.input_shape} vs test images {test.input_shape}")
        return Dataset(
            np.concatenate([train.x, test.x]),
            np.concatenate([train.y, test.y]),
            np.concatenate([np.zeros(len(train), bool), np.ones(len(test), bool)]),
            max(train.n_classes, test.n_classes),
            train.name,
        )


@dataclass
class Experience:
    task_id: int
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        allowed = set(self.classes)
        for split, y in (("train", self.train_y), ("test", self.test_y)):
            bad = sorted(set(np.unique(y).tolist()) - allowed)
            if bad:
                raise ValueError(f"experience {self.task_id}: {split} labels {bad} not in {self.classes}")

    def local_labels(self, y: np.ndarray) -> np.ndarray:
        """Map global labels to head indices."""
        lut = {c: j for j, c in enumerate(self.classes)}
        try:
            return np.array([lut[int(v)] for v in y], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} outside task {self.task_id} classes {self.classes}") from None


def make_split_stream(dataset: Dataset, n_tasks: int, classes_per_task: int, seed: int) -> list[Experience]:
    """Partition classes into disjoint tasks; task ids are 1..n_tasks."""
    classes = np.unique(dataset.y)
    need = n_tasks * classes_per_task
    if n_tasks < 1 or classes_per_task < 1:
        raise ValueError("n_tasks and classes_per_task must be >= 1")
    if need > len(classes):
        raise ValueError(
            f"split stream needs {n_tasks} x {classes_per_task} = {need} classes, dataset has {len(classes)}"
        )
    order = seeded_rng(seed, "stream/classes").permutation(classes)
    stream = []
    for k in range(n_tasks):
        cls = tuple(sorted(int(c) for c in order[k * classes_per_task : (k + 1) * classes_per_task]))
        sel = np.isin(dataset.y, cls)
        tr, te = sel & ~dataset.test_mask, sel & dataset.test_mask
        stream.append(
            Experience(k + 1, cls, dataset.x[tr], dataset.y[tr], dataset.x[te], dataset.y[te])
        )
    return stream
