"""Procedural multi-organ phantoms.

Each foreground class is one solid shape dropped at a random position and
orientation: ellipsoids and spheres for the easy organs, and a warped torus
for the "complex" one.  Class 1 is the largest and the last class the
smallest, so the set shows the same size imbalance as abdominal CT.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import DatasetSplit, HiddenLabels, LabelMap, Volume

SHAPE_KINDS = ("sphere", "ellipsoid", "complex")
DEFAULT_SPACING = (1.25, 1.25, 2.5)
_ELLIPSOID_AXES = (1.3, 1.0, 1.0 / 1.3)
_TORUS_RATIO = 2.5  # major / tube radius
_TORUS_WARP = 0.8  # out-of-plane warp amplitude / tube radius
_MAX_PLACEMENTS = 200
_MAX_LAYOUTS = 20


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    fraction: float
    mean: float
    noise_std: float = 25.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"shape kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if not 0 < self.fraction < 1:
            raise ValueError(f"volume fraction must lie in (0, 1), got {self.fraction}")


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a family of phantoms; ``shapes[k-1]`` describes class ``k``."""

    shapes: tuple
    dims: tuple = (32, 32, 32)
    background_mean: float = -30.0
    background_std: float = 25.0
    spacing: tuple = DEFAULT_SPACING
    seed: int = 0

    @property
    def num_classes(self):
        return len(self.shapes) + 1

    def validate(self):
        if not self.shapes:
            raise ValueError("phantom needs at least one foreground class")
        total = sum(s.fraction for s in self.shapes)
        if total >= 1:
            raise ValueError(f"foreground fractions sum to {total:.3f}; must be < 1")
        fr = [s.fraction for s in self.shapes]
        if any(a < b for a, b in zip(fr, fr[1:])):
            raise ValueError(f"class fractions must be non-increasing (class 1 largest), got {fr}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")


def default_phantom_spec(num_classes=4, dims=(32, 32, 32), noise_std=15.0, seed=0):
    """Imbalanced recipe: a large ellipsoid, a warped torus, then ever smaller spheres."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    kinds = ["ellipsoid", "complex"]
    fractions = [0.06, 0.03]
    means = [90.0, 160.0]
    while len(kinds) < num_classes - 1:
        kinds.append("sphere")
        fractions.append(fractions[-1] * 0.6)
        means.append(220.0 - 150.0 * (len(means) - 2))
    shapes = tuple(
        ShapeSpec(kind=k, fraction=f, mean=m, noise_std=noise_std)
        for k, f, m in zip(kinds[: num_classes - 1], fractions, means)
    )
    return PhantomSpec(shapes=shapes, dims=tuple(dims), background_std=noise_std, seed=seed)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _shape_extent(shape, n_voxels):
    """Characteristic radii and the bounding radius for a shape of ``n_voxels``."""
    if shape.kind == "sphere":
        r = (3.0 * n_voxels / (4.0 * math.pi)) ** (1.0 / 3.0)
        return (r,), r
    if shape.kind == "ellipsoid":
        r = (3.0 * n_voxels / (4.0 * math.pi)) ** (1.0 / 3.0)
        axes = tuple(a * r for a in _ELLIPSOID_AXES)
        return axes, max(axes)
    # torus volume 2 pi^2 R r^2 with R = ratio * r; the warp is a shear so it keeps volume
    r = (n_voxels / (2.0 * math.pi ** 2 * _TORUS_RATIO)) ** (1.0 / 3.0)
    R, warp = _TORUS_RATIO * r, _TORUS_WARP * r
    return (R, r, warp), math.hypot(R + r, r + warp)


def _shape_mask(shape, n_voxels, rng):
    """Voxelised shape on a tight cube, randomly rotated and sub-voxel shifted."""
    radii, bound = _shape_extent(shape, n_voxels)
    half = int(math.ceil(bound)) + 1
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1) - rng.uniform(-0.5, 0.5, size=3)
    local = g @ _random_rotation(rng)
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    if shape.kind == "sphere":
        mask = x * x + y * y + z * z <= radii[0] ** 2
    elif shape.kind == "ellipsoid":
        a, b, c = radii
        mask = (x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2 <= 1.0
    else:
        R, r, warp = radii
        theta = np.arctan2(y, x)
        rho = np.hypot(x, y)
        zw = z - warp * np.sin(2.0 * theta)
        mask = (rho - R) ** 2 + zw ** 2 <= r * r
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise ValueError(f"{shape.kind} with fraction {shape.fraction} is smaller than one voxel")
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    return mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]


def _place_shapes(spec, rng):
    """Labels with every class placed without overlap, or None if a class did not fit."""
    dims = tuple(spec.dims)
    total = float(np.prod(dims))
    labels = np.zeros(dims, dtype=np.uint8)
    for k, shape in enumerate(spec.shapes, start=1):
        placed = False
        for attempt in range(_MAX_PLACEMENTS):
            if attempt % 20 == 0:  # fresh orientation every few tries
                mask = _shape_mask(shape, shape.fraction * total, rng)
                if any(m > d for m, d in zip(mask.shape, dims)):
                    raise ValueError(
                        f"class {k} ({shape.kind}, fraction {shape.fraction}) needs extent {mask.shape} "
                        f"but the volume is only {dims}"
                    )
            o = [int(rng.integers(0, d - m + 1)) for m, d in zip(mask.shape, dims)]
            window = labels[o[0]:o[0] + mask.shape[0], o[1]:o[1] + mask.shape[1], o[2]:o[2] + mask.shape[2]]
            if not np.any(window[mask]):
                window[mask] = k
                placed = True
                break
        if not placed:
            return None
    return labels


def generate_volume(spec, index):
    """One ``(Volume, LabelMap)`` pair, a pure function of ``(spec.seed, index)``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    dims = tuple(spec.dims)
    for _ in range(_MAX_LAYOUTS):
        labels = _place_shapes(spec, rng)
        if labels is not None:
            break
    else:
        raise ValueError(
            f"could not place all {len(spec.shapes)} shapes without overlap in {dims} "
            f"after {_MAX_LAYOUTS} layouts; reduce the volume fractions"
        )
    means = np.array([spec.background_mean] + [s.mean for s in spec.shapes])
    stds = np.array([spec.background_std] + [s.noise_std for s in spec.shapes])
    noise = rng.standard_normal(dims)
    image = means[labels] + stds[labels] * noise
    return Volume(image, spec.spacing), LabelMap(labels, spec.spacing)


def generate_phantom(spec, count, num_labeled=None):
    """Generate ``count`` volumes; the first ``num_labeled`` (default half) keep their labels."""
    if count < 1:
        raise ValueError("count must be >= 1")
    num_labeled = count // 2 if num_labeled is None else int(num_labeled)
    if not 0 <= num_labeled <= count:
        raise ValueError(f"num_labeled must lie in [0, {count}], got {num_labeled}")
    pairs = [generate_volume(spec, i) for i in range(count)]
    return DatasetSplit(
        labeled_images=[p[0] for p in pairs[:num_labeled]],
        labeled_labels=[p[1] for p in pairs[:num_labeled]],
        unlabeled_images=[p[0] for p in pairs[num_labeled:]],
        hidden=HiddenLabels([p[1] for p in pairs[num_labeled:]]),
        labeled_ids=list(range(num_labeled)),
        unlabeled_ids=list(range(num_labeled, count)),
    )


def class_fractions(label_maps, num_classes):
    counts = np.zeros(num_classes)
    n = 0
    for lab in label_maps:
        arr = lab.data if isinstance(lab, LabelMap) else np.asarray(lab)
        counts += np.bincount(arr.ravel(), minlength=num_classes)[:num_classes]
        n += arr.size
    return counts / n
