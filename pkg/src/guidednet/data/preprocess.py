"""Intensity clipping, spacing resampling and percentile normalisation.

The pipeline order is clip, then resample, then normalise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import LabelMap, Volume

HU_WINDOW = (-325.0, 325.0)
TARGET_SPACING = (1.25, 1.25, 2.5)
PERCENTILES = (0.5, 99.5)


def clip_hu(volume, lo=HU_WINDOW[0], hi=HU_WINDOW[1]):
    if not lo < hi:
        raise ValueError(f"clip window must satisfy lo < hi, got ({lo}, {hi})")
    return Volume(np.clip(volume.data, lo, hi), volume.spacing)


def resampled_dims(dims, spacing, target):
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(dims, spacing, target))


def _source_coords(n_in, n_out, s, t):
    """Source coordinates of each output voxel centre along one axis."""
    c = (np.arange(n_out) + 0.5) * (t / s) - 0.5
    return np.clip(c, 0.0, n_in - 1.0)


def _lerp_axis(data, coords, axis):
    # a + t (b - a) reproduces constants and integer positions exactly
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, data.shape[axis] - 1)
    shape = [1] * data.ndim
    shape[axis] = -1
    t = (coords - lo).reshape(shape)
    a, b = np.take(data, lo, axis=axis), np.take(data, hi, axis=axis)
    return a + t * (b - a)


def resample_spacing(volume, target=TARGET_SPACING):
    """Trilinear resampling for images; nearest neighbour for label maps."""
    target = tuple(float(t) for t in target)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target spacing must be three positive numbers, got {target}")
    is_label = isinstance(volume, LabelMap)
    if target == tuple(volume.spacing):
        data = volume.data.copy()
    else:
        out = resampled_dims(volume.dims, volume.spacing, target)
        data = volume.data if is_label else volume.data.astype(np.float64)
        for axis, (n_in, n_out, s, t) in enumerate(zip(volume.dims, out, volume.spacing, target)):
            coords = _source_coords(n_in, n_out, s, t)
            if is_label:
                data = np.take(data, np.floor(coords + 0.5).astype(np.intp), axis=axis)
            else:
                data = _lerp_axis(data, coords, axis)
    if is_label:
        return LabelMap(np.asarray(data).astype(np.uint8), target)
    return Volume(data, target)


@dataclass
class NormalizeResult:
    volume: Volume
    degenerate: bool


def percentile_normalize(volume, percentiles=PERCENTILES):
    """``(x - p_lo) / (p_hi - p_lo)`` with linearly interpolated percentiles.

    A constant volume (``p_hi == p_lo``) maps to zeros and is flagged.
    """
    lo, hi = np.percentile(volume.data, percentiles)
    if hi == lo:
        return NormalizeResult(Volume(np.zeros_like(volume.data), volume.spacing), True)
    return NormalizeResult(Volume((volume.data - lo) / (hi - lo), volume.spacing), False)


def preprocess(volume, label=None, window=HU_WINDOW, target=TARGET_SPACING):
    """Full chain for one case; returns ``(volume, label_or_None)``."""
    v = clip_hu(volume, *window)
    v = resample_spacing(v, target)
    v = percentile_normalize(v).volume
    lab = None if label is None else resample_spacing(label, target)
    return v, lab


def preprocess_split(split, window=HU_WINDOW, target=TARGET_SPACING):
    """Apply :func:`preprocess` to every case of a split (hidden labels untouched)."""
    from .types import DatasetSplit

    li, ll = [], []
    for img, lab in zip(split.labeled_images, split.labeled_labels):
        v, y = preprocess(img, lab, window, target)
        li.append(v)
        ll.append(y)
    ui = [preprocess(img, None, window, target)[0] for img in split.unlabeled_images]
    return DatasetSplit(li, ll, ui, split.hidden, list(split.labeled_ids), list(split.unlabeled_ids))
