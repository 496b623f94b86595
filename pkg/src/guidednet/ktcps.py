"""Knowledge-transfer cross pseudo supervision.

Each model's argmax becomes the other's target.  Per-class weights come
from how many voxels of each class the models already get right on the
labelled half, smoothed over time with an exponential moving average.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, dice_ce_loss

EPS = 1e-6
DELTA = 1e-3
HARDNESS_FLOOR = 0.1
MOMENTUM = 0.99
WEIGHT_MODES = ("literal", "hardness", "none")


def pseudo_labels(probs):
    """Per-voxel argmax over the class axis; ties go to the lowest index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1)


def matched_counts(pred_labels, gt_labels, num_classes):
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {gt.shape}")
    hit = gt[pred == gt].astype(np.intp)
    return np.bincount(hit.ravel(), minlength=num_classes)[:num_classes]


def ratios_from_counts(counts, eps=EPS, delta=DELTA):
    """``(R, all_zero)``: counts normalised by their max and clamped to ``[eps, 1 - delta]``."""
    counts = np.asarray(counts, dtype=np.float64)
    top = counts.max() if counts.size else 0.0
    if top <= 0:
        return np.full(counts.shape, eps), True
    return np.clip(counts / top, eps, 1.0 - delta), False


def matched_ratios(pred_labels, gt_labels, num_classes, eps=EPS, delta=DELTA):
    return ratios_from_counts(matched_counts(pred_labels, gt_labels, num_classes), eps, delta)


def class_weights(ratios, mode="literal", floor=HARDNESS_FLOOR):
    """Raw per-class weights from clamped ratios.

    ``literal``: ``max_j log R_j / log R_k`` (best-learned class gets 1).
    ``hardness``: ``max(h_k / max_j h_j, floor)`` with ``h = -log R``
    (worst-learned class gets 1).  ``none`` returns ones.
    """
    R = np.asarray(ratios, dtype=np.float64)
    if mode == "none":
        return np.ones_like(R)
    logs = np.log(R)
    if mode == "literal":
        return logs.max() / logs
    if mode == "hardness":
        h = -logs
        return np.maximum(h / h.max(), floor)
    raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")


def ema(prev, raw, momentum=MOMENTUM):
    return momentum * np.asarray(prev, dtype=np.float64) + (1.0 - momentum) * np.asarray(raw, dtype=np.float64)


@dataclass
class ClassWeightState:
    """Running per-class weights for both models."""

    num_classes: int
    mode: str = "literal"
    momentum: float = MOMENTUM
    omega_a: np.ndarray = field(default=None)
    omega_b: np.ndarray = field(default=None)
    counts_a: np.ndarray = field(default=None)
    counts_b: np.ndarray = field(default=None)
    ratios_a: np.ndarray = field(default=None)
    ratios_b: np.ndarray = field(default=None)
    raw_a: np.ndarray = field(default=None)
    raw_b: np.ndarray = field(default=None)
    all_zero_flag: bool = False

    def __post_init__(self):
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.mode!r}; expected one of {WEIGHT_MODES}")
        K = self.num_classes
        for name in ("omega_a", "omega_b", "raw_a", "raw_b"):
            if getattr(self, name) is None:
                setattr(self, name, np.ones(K))
        for name in ("counts_a", "counts_b"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(K, dtype=np.int64))
        for name in ("ratios_a", "ratios_b"):
            if getattr(self, name) is None:
                setattr(self, name, np.ones(K))

    def update(self, pred_a, pred_b, gt_labels):
        """Refresh counts, ratios, raw weights and the smoothed weights from labelled predictions."""
        if self.mode == "none":
            return self
        K = self.num_classes
        self.counts_a = matched_counts(pred_a, gt_labels, K)
        self.counts_b = matched_counts(pred_b, gt_labels, K)
        self.ratios_a, zero_a = ratios_from_counts(self.counts_a)
        self.ratios_b, zero_b = ratios_from_counts(self.counts_b)
        self.all_zero_flag = zero_a or zero_b
        self.raw_a = class_weights(self.ratios_a, self.mode)
        self.raw_b = class_weights(self.ratios_b, self.mode)
        self.omega_a = ema(self.omega_a, self.raw_a, self.momentum)
        self.omega_b = ema(self.omega_b, self.raw_b, self.momentum)
        return self

    def arrays(self):
        return [self.omega_a, self.omega_b]

    def load_arrays(self, arrays):
        a, b = arrays
        if a.shape != (self.num_classes,) or b.shape != (self.num_classes,):
            raise ValueError(f"weight vectors must have length {self.num_classes}")
        self.omega_a = np.array(a, dtype=np.float64)
        self.omega_b = np.array(b, dtype=np.float64)


def loss_ktcps(probs_a, probs_b, omega_a, omega_b, targets_a=None, targets_b=None):
    """``L_s(p_A, y_B; w_B) + L_s(p_B, y_A; w_A)`` over the combined batch.

    ``targets_a``/``targets_b`` default to the argmax of the respective
    model's predictions; either way they carry no gradient.
    """
    y_a = pseudo_labels(probs_a) if targets_a is None else np.asarray(targets_a)
    y_b = pseudo_labels(probs_b) if targets_b is None else np.asarray(targets_b)
    return dice_ce_loss(probs_a, y_b, class_weights=omega_b) + dice_ce_loss(probs_b, y_a, class_weights=omega_a)


def loss_cps(probs_a, probs_b):
    """Unweighted cross pseudo supervision."""
    y_a, y_b = pseudo_labels(probs_a), pseudo_labels(probs_b)
    return dice_ce_loss(probs_a, y_b) + dice_ce_loss(probs_b, y_a)
