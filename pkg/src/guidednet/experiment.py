"""Named method presets, ablation grids and the desk-scale directional experiment."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import default_phantom_spec, generate_phantom, generate_volume, preprocess, preprocess_split
from .trainer import TrainConfig, train_loop

# Settings that make an 800-iteration run fit a single CPU core in under two
# minutes while keeping every loss term active.
DESK_OVERRIDES = {
    "base_channels": "4",
    "n_l": "1",
    "n_u": "1",
    "base_lr": "0.03",
    "crop": "16,24,24",
    "eval_patch": "32,32,32",
    "eval_stride": "16,16,16",
    "max_iter": "800",
}

PRESETS = {
    "guidednet": {},
    "cps-baseline": {"lambda_g": "0", "weight_mode": "none"},
    "kt-cps": {"lambda_g": "0", "weight_mode": "literal"},
    "kt-cps-hardness": {"lambda_g": "0", "weight_mode": "hardness"},
    "cgmm": {"weight_mode": "none"},
    "supervised": {"lambda_g": "0", "lambda_u": "0", "weight_mode": "none"},
    "gt": {"cgmm_terms": "gt"},
    "gt+self": {"cgmm_terms": "gt,self"},
    "gt+max": {"cgmm_terms": "gt,max"},
    "gt+self+max": {"cgmm_terms": "gt,self,max"},
    "gt+self+max+cons": {"cgmm_terms": "gt,self,max,cons"},
}

ABLATIONS = {
    # baseline, +KT-CPS, +CGMM, both
    "table4": ("cps-baseline", "kt-cps", "cgmm", "guidednet"),
    # CGMM loss-term toggles
    "table5": ("gt", "gt+self", "gt+max", "gt+self+max", "gt+self+max+cons"),
}


def preset_overrides(name):
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def seeded_config(seed, base=None, preset="guidednet", overrides=None):
    """Config for replicate ``seed``: model seeds ``2s+1``/``2s+2`` and data seed ``s``."""
    base = TrainConfig() if base is None else base
    values = {"seed_a": str(2 * seed + 1), "seed_b": str(2 * seed + 2), "data_seed": str(seed)}
    values.update(preset_overrides(preset))
    values.update(overrides or {})
    return base.with_overrides(values)


@dataclass
class DeskData:
    split: object
    val_images: list
    val_labels: list


def desk_dataset(seed, num_classes=4, num_labeled=8, num_unlabeled=32, num_val=4, dims=(32, 32, 32)):
    """Preprocessed phantom split plus held-out validation volumes for replicate ``seed``."""
    spec = default_phantom_spec(num_classes, dims=dims, seed=seed)
    split = preprocess_split(generate_phantom(spec, num_labeled + num_unlabeled, num_labeled))
    val = [preprocess(*generate_volume(spec, 1000 + i)) for i in range(num_val)]
    return DeskData(split, [v for v, _ in val], [lab for _, lab in val])


def decile_medians(values):
    """Medians of the first and the last tenth of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    n = max(1, len(values) // 10)
    return float(np.median(values[:n])), float(np.median(values[-n:]))


@dataclass
class RunRecord:
    method: str
    seed: int
    best_val: float
    best_iter: int
    class_dice: dict
    l_sup_first: float
    l_sup_last: float
    finite: bool
    seconds: float

    @property
    def l_sup_decreasing(self):
        return self.l_sup_last < self.l_sup_first


def run_method(method, seed, data, overrides=None, base=None):
    cfg = seeded_config(seed, base, method, overrides)
    t0 = time.perf_counter()
    res = train_loop(cfg, data.split, data.val_images, data.val_labels)
    elapsed = time.perf_counter() - t0
    finite = all(math.isfinite(v) for row in res.history for v in row.values())
    first, last = decile_medians([row["L_sup"] for row in res.history])
    return RunRecord(method, seed, res.best_val, res.best_iter, res.best_class_dice, first, last, finite, elapsed)


@dataclass
class ExperimentResult:
    records: list = field(default_factory=list)

    def of(self, method):
        return [r for r in self.records if r.method == method]

    def mean_dice(self, method):
        return float(np.mean([r.best_val for r in self.of(method)]))

    def mean_class_dice(self, method, cls):
        return float(np.mean([r.class_dice.get(cls, float("nan")) for r in self.of(method)]))

    @property
    def seconds(self):
        return sum(r.seconds for r in self.records)

    @property
    def all_finite(self):
        return all(r.finite for r in self.records)

    @property
    def all_l_sup_decreasing(self):
        return all(r.l_sup_decreasing for r in self.records)


def directional_experiment(seeds=(0, 1, 2), methods=("cps-baseline", "guidednet", "kt-cps-hardness"),
                           overrides=None, log=None):
    """Train every method on every replicate's dataset and collect best-checkpoint scores."""
    base = TrainConfig().with_overrides(DESK_OVERRIDES)
    out = ExperimentResult()
    for seed in seeds:
        data = desk_dataset(seed)
        for method in methods:
            rec = run_method(method, seed, data, overrides, base)
            out.records.append(rec)
            if log:
                log(f"{method} seed={seed} best_dice={rec.best_val:.4f}@{rec.best_iter} "
                    f"classes={ {k: round(v, 4) for k, v in rec.class_dice.items()} } "
                    f"L_sup {rec.l_sup_first:.3f}->{rec.l_sup_last:.3f} finite={rec.finite} {rec.seconds:.0f}s")
    return out
