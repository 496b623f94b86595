"""Sliding-window volumetric inference and overlap-aware evaluation metrics."""
from __future__ import annotations

import csv
import itertools
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, softmax_channel


@dataclass
class SlidingWindowPlan:
    dims: tuple  # original volume dims
    patch: tuple
    stride: tuple
    pad_before: tuple
    pad_after: tuple
    origins: list = field(default_factory=list)

    @property
    def padded_dims(self):
        return tuple(d + a + b for d, a, b in zip(self.dims, self.pad_before, self.pad_after))


def _axis_origins(n, p, s):
    starts = list(range(0, n - p + 1, s))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def make_plan(dims, patch, stride):
    """Window origins covering ``dims`` (after symmetric zero padding of short axes)."""
    dims, patch, stride = (tuple(int(v) for v in t) for t in (dims, patch, stride))
    if len(dims) != 3 or len(patch) != 3 or len(stride) != 3:
        raise ValueError("dims, patch and stride must each have three entries")
    if min(patch) < 1 or min(stride) < 1:
        raise ValueError("patch and stride must be positive")
    if any(s > p for s, p in zip(stride, patch)):
        raise ValueError(f"stride {stride} exceeds patch {patch}; windows would leave gaps")
    before = tuple(max(p - d, 0) // 2 for d, p in zip(dims, patch))
    after = tuple(max(p - d, 0) - b for d, p, b in zip(dims, patch, before))
    padded = tuple(d + a + b for d, a, b in zip(dims, before, after))
    axes = [_axis_origins(n, p, s) for n, p, s in zip(padded, patch, stride)]
    origins = list(itertools.product(*axes))  # already lexicographic
    return SlidingWindowPlan(dims, patch, stride, before, after, origins)


def coverage_counts(plan):
    counts = np.zeros(plan.padded_dims, dtype=np.int64)
    for o in plan.origins:
        counts[tuple(slice(a, a + p) for a, p in zip(o, plan.patch))] += 1
    return counts


def predict_probs(net, patches):
    """Softmax probabilities for a ``[N,1,D,H,W]`` stack of patches (no tape recorded)."""
    out = net.forward(Tensor(np.asarray(patches, dtype=np.float64)))
    return softmax_channel(out.logits).data


def sliding_window_predict(net, volume, plan=None, patch=(16, 16, 16), stride=(8, 8, 8), batch_size=8):
    """Average per-window softmax maps over overlaps; returns ``[K,D,H,W]`` probabilities."""
    data = volume.data if hasattr(volume, "data") and not isinstance(volume, np.ndarray) else np.asarray(volume)
    data = np.asarray(data, dtype=np.float64)
    if plan is None:
        plan = make_plan(data.shape, patch, stride)
    elif tuple(plan.dims) != data.shape:
        raise ValueError(f"plan was built for dims {plan.dims}, volume has {data.shape}")
    padded = np.pad(data, list(zip(plan.pad_before, plan.pad_after)))
    K = net.config.num_classes
    acc = np.zeros((K,) + plan.padded_dims)
    counts = np.zeros(plan.padded_dims)
    slices = [tuple(slice(a, a + p) for a, p in zip(o, plan.patch)) for o in plan.origins]
    for start in range(0, len(slices), batch_size):
        group = slices[start:start + batch_size]
        probs = predict_probs(net, np.stack([padded[s] for s in group])[:, None])
        for sl, pr in zip(group, probs):
            acc[(slice(None),) + sl] += pr
            counts[sl] += 1.0
    acc /= counts
    crop = tuple(slice(b, b + d) for b, d in zip(plan.pad_before, plan.dims))
    return np.ascontiguousarray(acc[(slice(None),) + crop])


def predict_labels(net, volume, **kwargs):
    return sliding_window_predict(net, volume, **kwargs).argmax(axis=0)


# -- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class ClassScore:
    cls: int
    dice: float
    jaccard: float
    vacuous: bool


def dice_jaccard(pred, gt, num_classes):
    """Per foreground class Dice and Jaccard from set counts.

    A class missing from both maps scores 1.0 and is marked vacuous; one
    missing from exactly one map scores 0.
    """
    pred = np.asarray(getattr(pred, "data", pred))
    gt = np.asarray(getattr(gt, "data", gt))
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    scores = []
    for k in range(1, num_classes):
        a, b = pred == k, gt == k
        na, nb = int(a.sum()), int(b.sum())
        if na == 0 and nb == 0:
            scores.append(ClassScore(k, 1.0, 1.0, True))
            continue
        inter = int(np.logical_and(a, b).sum())
        union = na + nb - inter
        scores.append(ClassScore(k, 2.0 * inter / (na + nb), inter / union, False))
    return scores


@dataclass
class MetricRow:
    run: str
    volume: str
    cls: int
    dice: float
    jaccard: float
    vacuous: bool


@dataclass
class MetricTable:
    rows: list = field(default_factory=list)

    def add(self, run, volume, scores):
        for s in scores:
            self.rows.append(MetricRow(str(run), str(volume), s.cls, s.dice, s.jaccard, s.vacuous))

    def classes(self):
        return sorted({r.cls for r in self.rows})

    def class_means(self):
        """``{class: (mean dice, mean jaccard)}`` over volumes."""
        out = {}
        for k in self.classes():
            sel = [r for r in self.rows if r.cls == k]
            out[k] = (float(np.mean([r.dice for r in sel])), float(np.mean([r.jaccard for r in sel])))
        return out

    def mean_dice(self):
        means = self.class_means()
        return float(np.mean([d for d, _ in means.values()])) if means else float("nan")

    def mean_jaccard(self):
        means = self.class_means()
        return float(np.mean([j for _, j in means.values()])) if means else float("nan")


@dataclass
class SummaryRow:
    cls: str
    mean_dice: float
    sd_dice: float
    mean_jaccard: float
    sd_jaccard: float
    single_run: bool


def _mean_sd(values):
    # statistics works in exact rationals, so identical runs give SD 0 exactly
    values = [float(v) for v in values]
    if len(values) == 1:
        return values[0], 0.0
    return statistics.mean(values), statistics.stdev(values)


def aggregate(tables):
    """Across-run mean and unbiased SD per class, plus an ``overall`` row."""
    if not tables:
        raise ValueError("aggregate needs at least one run")
    single = len(tables) == 1
    per_run = [t.class_means() for t in tables]
    classes = sorted(set().union(*[m.keys() for m in per_run]))
    rows = []
    for k in classes:
        d = [m[k][0] for m in per_run if k in m]
        j = [m[k][1] for m in per_run if k in m]
        md, sd = _mean_sd(d)
        mj, sj = _mean_sd(j)
        rows.append(SummaryRow(str(k), md, sd, mj, sj, single))
    md, sd = _mean_sd([t.mean_dice() for t in tables])
    mj, sj = _mean_sd([t.mean_jaccard() for t in tables])
    rows.append(SummaryRow("overall", md, sd, mj, sj, single))
    return rows


def write_eval_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "volume", "class", "dice", "jaccard", "vacuous_flag"])
        for r in table.rows:
            w.writerow([r.run, r.volume, r.cls, repr(r.dice), repr(r.jaccard), int(r.vacuous)])


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "mean_dice", "sd_dice", "mean_jaccard", "sd_jaccard"])
        for r in summary:
            w.writerow([r.cls, repr(r.mean_dice), repr(r.sd_dice), repr(r.mean_jaccard), repr(r.sd_jaccard)])


def evaluate(net, images, labels, num_classes, run="0", patch=(16, 16, 16), stride=(8, 8, 8), table=None, names=None):
    """Sliding-window predict every volume and score it; returns a :class:`MetricTable`."""
    table = MetricTable() if table is None else table
    for i, (img, lab) in enumerate(zip(images, labels)):
        pred = predict_labels(net, img, patch=patch, stride=stride)
        table.add(run, names[i] if names else i, dice_jaccard(pred, lab, num_classes))
    return table


# -- optional plots --------------------------------------------------------

def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    return plt


def plot_loss_curves(path, history, keys=("L_sup", "L_kt-cps", "L_cgmm", "L_total")):
    """Write an SVG of loss curves; returns False when matplotlib is unavailable."""
    plt = _pyplot()
    if plt is None or not history:
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = [h["iter"] for h in history]
    for k in keys:
        ys = [h[k] for h in history]
        if all(math.isfinite(y) for y in ys):
            ax.plot(it, ys, label=k, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


def plot_class_dice(path, summary, distances=None):
    """Per-class Dice bars, optionally with feature-centre distances alongside."""
    plt = _pyplot()
    if plt is None:
        return False
    rows = [r for r in summary if r.cls != "overall"]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x - 0.2, [r.mean_dice for r in rows], width=0.4, color="tab:orange", label="Dice")
    if distances is not None:
        ax2 = ax.twinx()
        ax2.bar(x + 0.2, [distances[int(r.cls)] for r in rows], width=0.4, color="tab:blue", label="distance")
        ax2.set_ylabel("centre distance")
    ax.set_xticks(x)
    ax.set_xticklabels([f"class {r.cls}" for r in rows])
    ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True
