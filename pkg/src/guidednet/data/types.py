"""Volume containers and the labelled/unlabelled dataset split."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Volume:
    """Image intensities (float64 in memory) with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3-D array, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelMap:
    """Class ids stored as uint8."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label map must be 3-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("label values must fit in uint8")
        self.data = arr.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape

    def check_classes(self, num_classes):
        if self.data.size and int(self.data.max()) >= num_classes:
            raise ValueError(f"label value {int(self.data.max())} >= num_classes {num_classes}")


class HiddenLabels:
    """Ground truth for the unlabelled pool, reachable only through :meth:`reveal`.

    Each reveal is counted so a training run can assert it never looked.
    Indexing or iterating the container directly is refused.
    """

    def __init__(self, labels):
        self._labels = list(labels)
        self.reveal_count = 0

    def __len__(self):
        return len(self._labels)

    def __getitem__(self, item):
        raise PermissionError("hidden labels are evaluation-only; call reveal(purpose='evaluation')")

    def __iter__(self):
        raise PermissionError("hidden labels are evaluation-only; call reveal(purpose='evaluation')")

    def reveal(self, purpose):
        if purpose != "evaluation":
            raise PermissionError(f"hidden labels may only be revealed for evaluation, not {purpose!r}")
        self.reveal_count += 1
        return list(self._labels)


@dataclass
class DatasetSplit:
    labeled_images: list
    labeled_labels: list
    unlabeled_images: list
    hidden: HiddenLabels = field(default_factory=lambda: HiddenLabels([]))
    labeled_ids: list = field(default_factory=list)
    unlabeled_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.labeled_images) != len(self.labeled_labels):
            raise ValueError("each labelled image needs exactly one label map")
        if not self.labeled_ids:
            self.labeled_ids = list(range(len(self.labeled_images)))
        if not self.unlabeled_ids:
            n = len(self.labeled_images)
            self.unlabeled_ids = list(range(n, n + len(self.unlabeled_images)))
        if set(self.labeled_ids) & set(self.unlabeled_ids):
            raise ValueError("labelled and unlabelled sets overlap")

    @property
    def num_labeled(self):
        return len(self.labeled_images)

    @property
    def num_unlabeled(self):
        return len(self.unlabeled_images)
