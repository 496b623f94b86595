"""Class-conditional Gaussian mixture over voxel features.

One diagonal Gaussian per class is fitted directly from labelled voxels
every step (no EM).  Its posterior gives a second, feature-space opinion on
each voxel's class that is used to rectify pseudo-labels on unlabelled data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    clamp,
    concat,
    cross_entropy,
    exp,
    log,
    make_op,
    mse,
    reshape,
    softmax,
    sqrt,
    stack,
    take_rows,
    transpose,
)

SIGMA_FLOOR = 1e-3
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GmmState:
    """Per-class feature statistics.

    ``means`` and ``stds`` are ``K x C`` tensors; after an update they are
    differentiable functions of the features they were computed from.
    """

    means: Tensor
    stds: Tensor
    prior: np.ndarray
    seen: np.ndarray
    last_update_skipped: bool = field(default=False)

    @classmethod
    def fresh(cls, num_classes, feature_dim):
        return cls(
            means=Tensor(np.zeros((num_classes, feature_dim))),
            stds=Tensor(np.ones((num_classes, feature_dim))),
            prior=np.full(num_classes, 1.0 / num_classes),
            seen=np.zeros(num_classes, dtype=bool),
        )

    @property
    def num_classes(self):
        return self.means.shape[0]

    @property
    def feature_dim(self):
        return self.means.shape[1]

    def detached(self):
        return replace(self, means=self.means.detach(), stds=self.stds.detach())

    def num_seen(self):
        return int(self.seen.sum())


@dataclass
class PosteriorMap:
    probs: Tensor  # [B,K,D,H,W]
    hard: np.ndarray  # [B,D,H,W], argmax with lowest-index ties


def flatten_voxels(x):
    """``[B,C,D,H,W]`` -> ``[B*D*H*W, C]`` (differentiable)."""
    x = as_tensor(x)
    B, C = x.shape[:2]
    return reshape(transpose(x, (0, 2, 3, 4, 1)), (-1, C))


def _unflatten(rows, spatial):
    """``[N,K]`` rows back to ``[B,K,D,H,W]``."""
    B = spatial[0]
    K = rows.shape[1]
    vol = reshape(rows, (B,) + tuple(spatial[1:]) + (K,))
    return transpose(vol, (0, 4, 1, 2, 3))


def update_statistics(state, features, labels, probs, sigma_floor=SIGMA_FLOOR, detach=False):
    """Recompute class means and spreads from labelled voxels.

    ``features`` is ``[B,C,D,H,W]``, ``labels`` ``[B,D,H,W]`` and ``probs``
    ``[B,K,D,H,W]`` (the model's class scores, used as spread weights).
    Means are plain averages over each class's voxels; spreads are
    score-weighted standard deviations, floored.  Both stay on the tape,
    through the features and through tensor-valued scores, unless
    ``detach`` is set.  Classes absent from ``labels`` keep their previous
    statistics.
    """
    features = as_tensor(features)
    labels = np.asarray(labels)
    probs = as_tensor(probs)
    scores = probs.data
    K = state.num_classes
    if features.shape[1] != state.feature_dim:
        raise ValueError(f"feature dim {features.shape[1]} != state dim {state.feature_dim}")
    if labels.shape != features.shape[:1] + features.shape[2:] or scores.shape[1] != K:
        raise ValueError(
            f"misaligned inputs: features {features.shape}, labels {labels.shape}, scores {scores.shape}"
        )

    flat_labels = labels.reshape(-1)
    present = [k for k in range(K) if np.any(flat_labels == k)]
    if not any(k > 0 for k in present):
        return replace(state, last_update_skipped=True)

    F = flatten_voxels(features)
    S = flatten_voxels(probs)
    if detach:
        F, S = F.detach(), S.detach()
    old_means, old_stds = state.means.data, state.stds.data
    mean_rows, std_rows = [], []
    seen = state.seen.copy()
    for k in range(K):
        if k not in present:
            mean_rows.append(Tensor(old_means[k]))
            std_rows.append(Tensor(old_stds[k]))
            continue
        idx = np.flatnonzero(flat_labels == k)
        fk = take_rows(F, idx)
        mu = fk.mean(axis=0)
        w = take_rows(S, idx)[:, k:k + 1]
        if idx.size < 2 or w.data.sum() <= 0:
            sigma = Tensor(np.full(state.feature_dim, sigma_floor))
        else:
            resid = fk - mu
            var = (resid * resid * w).sum(axis=0) / w.sum()
            sigma = sqrt(clamp(var, lo=sigma_floor ** 2))
        mean_rows.append(mu)
        std_rows.append(sigma)
        seen[k] = True
    return GmmState(
        means=stack(mean_rows, axis=0),
        stds=stack(std_rows, axis=0),
        prior=state.prior.copy(),
        seen=seen,
        last_update_skipped=False,
    )


def gaussian_log_density(F, means, stds):
    """``[N,K]`` diagonal Gaussian log densities of rows ``F[N,C]`` under each class.

    A single fused op: differentiable in the features, the means and the
    spreads, without materialising the intermediate graph of the broadcast.
    """
    F, means, stds = as_tensor(F), as_tensor(means), as_tensor(stds)
    C = F.shape[1]
    inv = 1.0 / stds.data  # [K,C]
    z = (F.data[:, None, :] - means.data[None, :, :]) * inv[None]  # [N,K,C]
    out = -0.5 * np.einsum("nkc,nkc->nk", z, z) - (np.log(stds.data).sum(axis=1) + C * _HALF_LOG_2PI)[None, :]

    def backward(g):
        gz = g[:, :, None] * z * inv[None]  # g * z / sd, the gradient w.r.t. the mean
        gF = -gz.sum(axis=1) if F.requires_grad else None
        gmu = gz.sum(axis=0) if means.requires_grad else None
        gsd = None
        if stds.requires_grad:
            gsd = (np.einsum("nk,nkc->kc", g, z * z) - g.sum(axis=0)[:, None]) * inv
        return gF, gmu, gsd

    return make_op(out, (F, means, stds), backward, "gaussian_log_density")


def log_joint(state, F):
    """``[N,K]`` log prior + diagonal Gaussian log density; unseen classes at -inf."""
    ll = gaussian_log_density(F, state.means, state.stds)
    prior_term = np.where(state.seen, np.log(np.where(state.seen, state.prior, 1.0)), -np.inf)
    return ll + prior_term[None, :]


def posterior(state, features):
    """Posterior class distribution for every voxel of ``features[B,C,D,H,W]``."""
    if state.num_seen() < 2:
        raise ValueError("posterior undefined: fewer than 2 classes have been observed")
    features = as_tensor(features)
    F = flatten_voxels(features)
    rows = softmax(log_joint(state, F), axis=1)
    probs = _unflatten(rows, (features.shape[0],) + features.shape[2:])
    return PosteriorMap(probs=probs, hard=probs.data.argmax(axis=1))


def loss_gt(post, labels):
    """Cross-entropy of the soft posterior against ground truth."""
    return cross_entropy(post.probs, labels)


def loss_self(post, probs):
    """Per-voxel, per-class binary cross-entropy between posterior and model scores."""
    G = post.probs
    P = as_tensor(probs)
    term = G * log(P) + (1.0 - G) * log(1.0 - P)
    return -term.mean()


def loss_max(state):
    """Mean pairwise ``exp(-||mu_k - mu_v||^2)`` over seen classes (unordered pairs)."""
    K = state.num_classes
    seen = np.flatnonzero(state.seen)
    if seen.size < 2:
        return Tensor(0.0)
    i, j = np.triu_indices(seen.size, k=1)
    mu = take_rows(state.means, seen)
    diff = take_rows(mu, i) - take_rows(mu, j)
    sq = (diff * diff).sum(axis=1)
    return exp(-sq).sum() * (2.0 / (K * (K - 1)))


def cgmm_losses_labeled(post, labels, probs, state):
    return loss_gt(post, labels), loss_self(post, probs), loss_max(state)


def cgmm_losses_unlabeled(post_a, post_b, probs_a, probs_b):
    """Consistency between the two models' posteriors, and rectification.

    Rectification supervises each model's softmax with the hard CGMM
    prediction from its own features; those targets carry no gradient.
    """
    l_cons = mse(post_a.probs, post_b.probs)
    l_rect = cross_entropy(probs_a, post_a.hard) + cross_entropy(probs_b, post_b.hard)
    return l_cons, l_rect


def compose_cgmm_loss(l_self, l_gt, l_max, l_cons, l_rectify, lambda_c=1.0):
    """Return ``(L_train, L_cgmm)``."""
    parts = {"L_self": l_self, "L_gt": l_gt, "L_max": l_max, "L_cons": l_cons, "L_rectify": l_rectify}
    for name, v in parts.items():
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite CGMM loss term {name}={float(val)}")
    l_train = as_tensor(l_self) + l_gt + l_max + lambda_c * as_tensor(l_cons)
    return l_train, l_train + l_rectify


def feature_center_distance(state, features_unlabeled, pseudo_labels):
    """Per-class distance between labelled centres and pseudo-labelled unlabelled centres.

    Returns a length-K float array with NaN for classes that are unseen in
    ``state`` or have no pseudo-labelled voxels.
    """
    F = flatten_voxels(features_unlabeled).data
    lab = np.asarray(pseudo_labels).reshape(-1)
    means = state.means.data
    out = np.full(state.num_classes, np.nan)
    for k in range(state.num_classes):
        sel = lab == k
        if not state.seen[k] or not sel.any():
            continue
        out[k] = float(np.linalg.norm(F[sel].mean(axis=0) - means[k]))
    return out


def concat_posteriors(maps):
    return PosteriorMap(
        probs=concat([m.probs for m in maps], axis=0),
        hard=np.concatenate([m.hard for m in maps], axis=0),
    )
