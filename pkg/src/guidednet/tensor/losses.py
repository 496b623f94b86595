"""Segmentation loss kernels on probability maps ``[B,K,D,H,W]``."""
import numpy as np

from .autograd import LOG_FLOOR, as_tensor, log, reduce_mean, reduce_sum

DICE_SMOOTH = 1e-5


def one_hot(labels, num_classes):
    """Integer map ``[B,D,H,W]`` -> float one-hot ``[B,K,D,H,W]``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"class index out of range: labels span [{labels.min()}, {labels.max()}] but K={num_classes}"
        )
    eye = np.eye(num_classes, dtype=np.float64)
    return np.moveaxis(eye[labels.astype(np.intp)], -1, 1)


def _target_map(target, probs):
    """Accept an integer class map or a per-class probability map."""
    if hasattr(target, "data") and not isinstance(target, np.ndarray):
        target = target.data
    target = np.asarray(target)
    K = probs.shape[1]
    if target.ndim == probs.ndim - 1:
        return one_hot(target, K)
    if target.shape != probs.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {probs.shape}")
    return target.astype(np.float64)


def cross_entropy(probs, target, voxel_weights=None, floor=LOG_FLOOR):
    """Mean over voxels of ``-sum_k t_k log p_k`` with a floor-guarded log.

    ``voxel_weights`` (shape ``[B,D,H,W]``) scales each voxel's term; the
    mean is still taken over the voxel count.
    """
    probs = as_tensor(probs)
    t = _target_map(target, probs)
    nll = -reduce_sum(log(probs, floor) * t, axis=1)
    if voxel_weights is not None:
        nll = nll * np.asarray(voxel_weights, dtype=np.float64)
    return reduce_mean(nll)


def soft_dice_loss(probs, target, class_weights=None, smooth=DICE_SMOOTH):
    """Soft Dice loss averaged over samples and foreground classes.

    Per sample and class: ``1 - (2 sum p t + eps) / (sum p + sum t + eps)``.
    ``class_weights`` (length K) scales each class's term before averaging.
    """
    probs = as_tensor(probs)
    t = _target_map(target, probs)
    fg = probs[:, 1:]
    tf = t[:, 1:]
    axes = tuple(range(2, probs.ndim))
    inter = reduce_sum(fg * tf, axis=axes)
    denom = reduce_sum(fg, axis=axes) + tf.sum(axis=axes)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    loss = 1.0 - dice
    if class_weights is not None:
        loss = loss * np.asarray(class_weights, dtype=np.float64)[None, 1:]
    return reduce_mean(loss)


def dice_ce_loss(probs, target, class_weights=None):
    """``L_s = (Dice + CE) / 2``; weights index the target class per voxel."""
    if class_weights is None:
        return 0.5 * (soft_dice_loss(probs, target) + cross_entropy(probs, target))
    probs = as_tensor(probs)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    t = _target_map(target, probs)
    voxel_w = np.tensordot(class_weights, t, axes=([0], [1]))
    return 0.5 * (
        soft_dice_loss(probs, t, class_weights=class_weights)
        + cross_entropy(probs, t, voxel_weights=voxel_w)
    )


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    d = a - b
    return reduce_mean(d * d)
