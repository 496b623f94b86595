"""Random crop/flip augmentation and mixed labelled/unlabelled batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_array(x):
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)


def crop_origin(dims, crop, rng):
    crop = tuple(int(c) for c in crop)
    if any(c > d for c, d in zip(crop, dims)) or any(c < 1 for c in crop):
        raise ValueError(f"crop {crop} does not fit inside volume dims {tuple(dims)}")
    return tuple(int(rng.integers(0, d - c + 1)) for c, d in zip(crop, dims))


def apply_crop_flip(arr, origin, crop, flips):
    sl = tuple(slice(o, o + c) for o, c in zip(origin, crop))
    out = arr[sl]
    axes = tuple(i for i, f in enumerate(flips) if f)
    if axes:
        out = np.flip(out, axis=axes)
    return np.ascontiguousarray(out)


def augment(volume, labels, rng, crop=None, flip_prob=0.5):
    """Random crop plus independent per-axis flips, applied identically to both inputs.

    ``labels`` may be None (unlabelled case).  Returns plain arrays.
    """
    v = _as_array(volume)
    crop = v.shape if crop is None else tuple(crop)
    origin = crop_origin(v.shape, crop, rng)
    flips = tuple(bool(f) for f in rng.random(3) < flip_prob)
    out_v = apply_crop_flip(v, origin, crop, flips)
    if labels is None:
        return out_v, None
    y = _as_array(labels)
    if y.shape != v.shape:
        raise ValueError(f"volume {v.shape} and labels {y.shape} differ in shape")
    return out_v, apply_crop_flip(y, origin, crop, flips)


@dataclass
class Batch:
    x_l: np.ndarray  # [n_l,1,D,H,W]
    y_l: np.ndarray  # [n_l,D,H,W]
    x_u: np.ndarray  # [n_u,1,D,H,W]
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray

    @property
    def x(self):
        """Labelled then unlabelled crops stacked along the batch axis."""
        return np.concatenate([self.x_l, self.x_u], axis=0)


def sample_batch(split, rng, n_l=2, n_u=None, crop=(16, 16, 16), flip_prob=0.5):
    """Draw ``n_l`` labelled and ``n_u`` (default ``n_l``) unlabelled crops with replacement."""
    n_u = n_l if n_u is None else n_u
    if n_l < 1 or n_u < 1:
        raise ValueError(f"batch needs at least one crop from each pool, got n_l={n_l}, n_u={n_u}")
    if split.num_labeled == 0 or split.num_unlabeled == 0:
        raise ValueError(
            f"cannot sample from an empty pool (labelled={split.num_labeled}, unlabelled={split.num_unlabeled})"
        )
    li = rng.integers(0, split.num_labeled, size=n_l)
    ui = rng.integers(0, split.num_unlabeled, size=n_u)
    xs, ys = [], []
    for i in li:
        v, y = augment(split.labeled_images[i], split.labeled_labels[i], rng, crop, flip_prob)
        xs.append(v)
        ys.append(y)
    xu = [augment(split.unlabeled_images[i], None, rng, crop, flip_prob)[0] for i in ui]
    return Batch(
        x_l=np.stack(xs)[:, None].astype(np.float64),
        y_l=np.stack(ys).astype(np.int64),
        x_u=np.stack(xu)[:, None].astype(np.float64),
        labeled_idx=li,
        unlabeled_idx=ui,
    )
