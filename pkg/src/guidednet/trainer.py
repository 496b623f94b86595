"""Dual-model training: supervised, CGMM and knowledge-transfer CPS losses.

One step forwards both networks over a batch holding labelled crops first
and unlabelled crops second, assembles every loss term, runs a single
backward pass and applies one SGD update per network.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import cgmm
from .data.sampling import sample_batch
from .inference import evaluate
from .ktcps import WEIGHT_MODES, ClassWeightState, loss_ktcps
from .tensor import SGD, Tape, Tensor, concat, dice_ce_loss, poly_lr, ramp_up, softmax_channel
from .unet import UNetConfig, build

CGMM_TERMS = ("gt", "self", "max", "cons")
CHECKPOINT_MAGIC = b"GNCKPT01"
CHECKPOINT_VERSION = 1
# fields that may differ between a checkpoint and the run resuming from it
_RESUME_FREE_FIELDS = ("checkpoint_every", "eval_every")


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the step's report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class CheckpointError(ValueError):
    pass


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class TrainConfig:
    num_classes: int = 4
    base_channels: int = 4
    depth: int = 2
    feature_tap_layer: int = 0  # 0 -> shallowest decoder layer
    norm: str = "instance"
    lambda_u: float = 0.1
    lambda_g: float = 0.3
    lambda_c: float = 1.0
    ema_momentum: float = 0.99
    base_lr: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    max_iter: int = 800
    ramp_len: int = 0  # 0 -> 40% of max_iter
    n_l: int = 2
    n_u: int = 2
    crop: tuple = (16, 16, 16)
    weight_mode: str = "literal"
    cgmm_terms: str = "gt,self,max,cons"
    seed_a: int = 1
    seed_b: int = 2
    data_seed: int = 0
    checkpoint_every: int = 0  # 0 -> only the final checkpoint
    eval_every: int = 0  # 0 -> every 5% of max_iter
    detach_gmm: bool = False
    ktcps_unlabeled_only: bool = False
    eval_patch: tuple = (16, 16, 16)
    eval_stride: tuple = (8, 8, 8)

    def __post_init__(self):
        self.crop = tuple(int(v) for v in self.crop)
        self.eval_patch = tuple(int(v) for v in self.eval_patch)
        self.eval_stride = tuple(int(v) for v in self.eval_stride)

    # -- derived values -------------------------------------------------
    @property
    def effective_ramp_len(self):
        return self.ramp_len if self.ramp_len > 0 else max(1, int(round(0.4 * self.max_iter)))

    @property
    def effective_eval_every(self):
        return self.eval_every if self.eval_every > 0 else max(1, int(round(0.05 * self.max_iter)))

    @property
    def terms(self):
        return tuple(t.strip() for t in self.cgmm_terms.split(",") if t.strip())

    def unet_config(self, seed):
        return UNetConfig(
            num_classes=self.num_classes,
            base_channels=self.base_channels,
            depth=self.depth,
            feature_tap_layer=self.feature_tap_layer or None,
            init_seed=seed,
            norm=self.norm,
        )

    def validate(self):
        for name in ("lambda_u", "lambda_g", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.seed_a == self.seed_b:
            raise ValueError(f"seed_a and seed_b must differ (both {self.seed_a})")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        bad = [t for t in self.terms if t not in CGMM_TERMS]
        if bad:
            raise ValueError(f"unknown cgmm_terms {bad}; allowed {CGMM_TERMS}")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.n_l < 1 or self.n_u < 1:
            raise ValueError("n_l and n_u must be >= 1")
        self.unet_config(self.seed_a).validate()
        divisor = 2 ** self.depth
        for name in ("crop", "eval_patch"):
            if any(n % divisor for n in getattr(self, name)):
                raise ValueError(f"{name} {getattr(self, name)} must be divisible by {divisor}")
        return self

    # -- key=value text -------------------------------------------------
    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def with_overrides(self, overrides):
        """Return a copy with ``{key: text}`` overrides parsed to each field's type."""
        defaults = {f.name: f.default for f in dataclasses.fields(self)}
        values = dataclasses.asdict(self)
        for key, text in overrides.items():
            if key not in defaults:
                raise KeyError(f"unknown config key {key!r}")
            proto = defaults[key]
            try:
                if isinstance(proto, bool):
                    values[key] = _parse_bool(text)
                elif isinstance(proto, tuple):
                    values[key] = tuple(int(v) for v in str(text).split(","))
                else:
                    values[key] = type(proto)(text) if not isinstance(text, type(proto)) else text
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {text!r} ({exc})") from None
        return TrainConfig(**values)

    def to_text(self):
        lines = []
        for k, v in dataclasses.asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        overrides = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            overrides[k.strip()] = v.strip()
        return cls().with_overrides(overrides)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


REPORT_SCALARS = (
    "L_sup", "L_kt-cps", "L_gt", "L_self", "L_max", "L_cons", "L_rectify",
    "L_train", "L_cgmm", "L_total", "lr", "lambda_u",
)


@dataclass
class LossReport:
    iteration: int
    L_sup: float
    L_ktcps: float
    L_gt: float
    L_self: float
    L_max: float
    L_cons: float
    L_rectify: float
    L_train: float
    L_cgmm: float
    L_total: float
    lr: float
    lambda_u: float
    lambda_g: float
    omega_a: np.ndarray
    omega_b: np.ndarray
    gmm_skipped: bool = False
    cgmm_undefined: bool = False
    ratios_all_zero: bool = False

    def scalars(self):
        return {
            "L_sup": self.L_sup, "L_kt-cps": self.L_ktcps, "L_gt": self.L_gt, "L_self": self.L_self,
            "L_max": self.L_max, "L_cons": self.L_cons, "L_rectify": self.L_rectify,
            "L_train": self.L_train, "L_cgmm": self.L_cgmm, "L_total": self.L_total,
            "lr": self.lr, "lambda_u": self.lambda_u,
        }

    def recomposed_total(self):
        return self.L_sup + self.lambda_u * self.L_ktcps + self.lambda_g * self.L_cgmm

    def finite(self):
        vals = list(self.scalars().values()) + list(self.omega_a) + list(self.omega_b)
        return all(math.isfinite(v) for v in vals)

    def row(self):
        """Metrics CSV row in column order."""
        out = {"iter": self.iteration}
        out.update(self.scalars())
        for k, v in enumerate(self.omega_a):
            out[f"omegaA_{k}"] = float(v)
        for k, v in enumerate(self.omega_b):
            out[f"omegaB_{k}"] = float(v)
        return out


def metrics_columns(num_classes):
    return (
        ["iter", "lr", "lambda_u"]
        + [k for k in REPORT_SCALARS if k not in ("lr", "lambda_u")]
        + [f"omegaA_{k}" for k in range(num_classes)]
        + [f"omegaB_{k}" for k in range(num_classes)]
    )


def total_loss(l_sup, l_kt, l_cgmm, lambda_u, lambda_g):
    """``L_sup + lambda_u L_kt-cps + lambda_g L_cgmm``; zero-weighted terms are left out of the graph."""
    total = l_sup
    if lambda_u:
        total = total + lambda_u * l_kt
    if lambda_g:
        total = total + lambda_g * l_cgmm
    return total


def supervised_loss(probs_a, probs_b, labels):
    """``L_s(p_A, y) + L_s(p_B, y)`` averaged over the labelled samples."""
    return dice_ce_loss(probs_a, labels) + dice_ce_loss(probs_b, labels)


@dataclass
class TrainState:
    config: TrainConfig
    net_a: object
    net_b: object
    opt_a: SGD
    opt_b: SGD
    gmm: cgmm.GmmState
    weights: ClassWeightState
    rng: np.random.Generator
    iteration: int = 0
    best_val: float = -math.inf
    best_iter: int = -1
    best_class_dice: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def init_state(config):
    config.validate()
    net_a = build(config.unet_config(config.seed_a))
    net_b = build(config.unet_config(config.seed_b))
    return TrainState(
        config=config,
        net_a=net_a,
        net_b=net_b,
        opt_a=SGD(net_a.parameters(), config.base_lr, config.sgd_momentum, config.weight_decay),
        opt_b=SGD(net_b.parameters(), config.base_lr, config.sgd_momentum, config.weight_decay),
        gmm=cgmm.GmmState.fresh(config.num_classes, net_a.config.tap_channels()),
        weights=ClassWeightState(config.num_classes, config.weight_mode, config.ema_momentum),
        rng=np.random.default_rng(config.data_seed),
    )


def _value(t):
    return float(t.data) if isinstance(t, Tensor) else float(t)


def _frozen(t):
    """A gradient-free copy of ``t`` that records nothing on the tape."""
    return Tensor(t.data)


def forward_losses(state, batch):
    """Forward both models and assemble every loss term on a fresh tape.

    Returns ``(tape, total, report, gmm_new)``.  The class-weight state is
    refreshed in place; parameters, optimizers and the stored GMM are not
    touched, so the caller decides whether to backpropagate and step.
    """
    cfg = state.config
    it = state.iteration
    lr = poly_lr(it, cfg.max_iter, cfg.base_lr)
    lam_u = ramp_up(it, cfg.effective_ramp_len, cfg.lambda_u)
    lam_g = cfg.lambda_g
    nl = batch.x_l.shape[0]
    y = batch.y_l
    y2 = np.concatenate([y, y], axis=0)
    live_cgmm = lam_g > 0
    live_kt = lam_u > 0
    terms = set(cfg.terms)
    zero = Tensor(0.0)

    state.opt_a.zero_grad()
    state.opt_b.zero_grad()
    tape = Tape()
    with tape:
        x = Tensor(batch.x)
        out_a = state.net_a(x)
        out_b = state.net_b(x)
        p_a = softmax_channel(out_a.logits)
        p_b = softmax_channel(out_b.logits)

        # supervised
        l_sup = supervised_loss(p_a[:nl], p_b[:nl], y)

        # CGMM: statistics from both models' labelled features
        f_a, f_b = out_a.features, out_b.features
        pa_c, pb_c = p_a, p_b
        if not live_cgmm:
            f_a, f_b, pa_c, pb_c = _frozen(f_a), _frozen(f_b), _frozen(p_a), _frozen(p_b)
        feats_l = concat([f_a[:nl], f_b[:nl]], axis=0)
        probs_l = concat([pa_c[:nl], pb_c[:nl]], axis=0)
        gmm_new = cgmm.update_statistics(state.gmm, feats_l, y2, probs_l, detach=cfg.detach_gmm)
        cgmm_undefined = gmm_new.num_seen() < 2
        if cgmm_undefined:
            l_gt = l_self = l_max = l_cons = l_rect = l_train = l_cgmm = zero
        else:
            post_l = cgmm.posterior(gmm_new, feats_l)
            l_gt, l_self, l_max = cgmm.cgmm_losses_labeled(post_l, y2, probs_l, gmm_new)
            post_ua = cgmm.posterior(gmm_new, f_a[nl:])
            post_ub = cgmm.posterior(gmm_new, f_b[nl:])
            l_cons, l_rect = cgmm.cgmm_losses_unlabeled(post_ua, post_ub, pa_c[nl:], pb_c[nl:])
            try:
                l_train, l_cgmm = cgmm.compose_cgmm_loss(
                    l_self if "self" in terms else zero,
                    l_gt if "gt" in terms else zero,
                    l_max if "max" in terms else zero,
                    l_cons if "cons" in terms else zero,
                    l_rect,
                    cfg.lambda_c,
                )
            except FloatingPointError:
                # let the finiteness check below abort with the full report
                l_train = l_cgmm = Tensor(math.nan)

        # KT-CPS: weights from labelled agreement, loss over the combined batch
        pred_l = np.concatenate([p_a.data[:nl].argmax(axis=1), p_b.data[:nl].argmax(axis=1)])
        state.weights.update(pred_l[:nl], pred_l[nl:], y)
        pk_a, pk_b = (p_a, p_b) if live_kt else (_frozen(p_a), _frozen(p_b))
        if cfg.ktcps_unlabeled_only:
            pk_a, pk_b = pk_a[nl:], pk_b[nl:]
        l_kt = loss_ktcps(pk_a, pk_b, state.weights.omega_a, state.weights.omega_b)

        total = total_loss(l_sup, l_kt, l_cgmm, lam_u, lam_g)
        report = LossReport(
            iteration=it,
            L_sup=_value(l_sup), L_ktcps=_value(l_kt), L_gt=_value(l_gt), L_self=_value(l_self),
            L_max=_value(l_max), L_cons=_value(l_cons), L_rectify=_value(l_rect),
            L_train=_value(l_train), L_cgmm=_value(l_cgmm), L_total=_value(total),
            lr=lr, lambda_u=lam_u, lambda_g=lam_g,
            omega_a=state.weights.omega_a.copy(), omega_b=state.weights.omega_b.copy(),
            gmm_skipped=gmm_new.last_update_skipped, cgmm_undefined=cgmm_undefined,
            ratios_all_zero=state.weights.all_zero_flag,
        )
        if not report.finite():
            raise TrainingAborted(f"non-finite loss at iteration {it}: {report.scalars()}", report)
    return tape, total, report, gmm_new


def train_step(state, batch):
    """One optimisation step on ``batch``; returns the step's :class:`LossReport`."""
    tape, total, report, gmm_new = forward_losses(state, batch)
    it = state.iteration
    tape.backward(total)
    state.opt_a.step(report.lr)
    state.opt_b.step(report.lr)
    state.gmm = gmm_new.detached()
    state.iteration = it + 1
    return report


# -- checkpoints -------------------------------------------------------------

def _state_blocks(state):
    blocks = []
    for tag, net in (("A", state.net_a), ("B", state.net_b)):
        for name, p in net.named_parameters():
            blocks.append((f"{tag}.{name}", p.data))
    for tag, opt in (("A", state.opt_a), ("B", state.opt_b)):
        for (name, _), buf in zip(getattr(state, f"net_{tag.lower()}").named_parameters(), opt.buffers):
            blocks.append((f"opt{tag}.{name}", buf))
    g = state.gmm
    blocks += [
        ("gmm.means", g.means.data), ("gmm.stds", g.stds.data),
        ("gmm.prior", g.prior), ("gmm.seen", g.seen.astype(np.float64)),
        ("omega.A", state.weights.omega_a), ("omega.B", state.weights.omega_b),
    ]
    return blocks


def save_checkpoint(path, state, extra=None):
    blocks = _state_blocks(state)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(state.config).items()},
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "best_iter": state.best_iter,
        "gmm_last_skipped": bool(state.gmm.last_update_skipped),
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(header, {block name: array})`` without building a state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a guidednet checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint field 'version' is {header.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    pos += hlen
    arrays = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        if len(blob) < pos + 8 * n:
            raise CheckpointError(f"{path}: truncated payload in block {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after the last block")
    return header, arrays


def config_from_header(header):
    return TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()})


def load_checkpoint(path, config=None):
    """Rebuild a :class:`TrainState`; ``config`` (if given) must match the saved one."""
    header, arrays = read_checkpoint(path)
    saved = config_from_header(header)
    if config is not None:
        for name in TrainConfig.field_names():
            if name in _RESUME_FREE_FIELDS:
                continue
            a, b = getattr(saved, name), getattr(config, name)
            if a != b:
                raise CheckpointError(f"checkpoint config mismatch in field '{name}': saved {a!r}, requested {b!r}")
    else:
        config = saved
    state = init_state(config)
    for tag, net, opt in (("A", state.net_a, state.opt_a), ("B", state.net_b, state.opt_b)):
        names = [n for n, _ in net.named_parameters()]
        net.load_state_arrays([arrays[f"{tag}.{n}"] for n in names])
        opt.load_state_arrays([arrays[f"opt{tag}.{n}"] for n in names])
    state.gmm = cgmm.GmmState(
        means=Tensor(arrays["gmm.means"]),
        stds=Tensor(arrays["gmm.stds"]),
        prior=arrays["gmm.prior"].copy(),
        seen=arrays["gmm.seen"].astype(bool),
        last_update_skipped=bool(header.get("gmm_last_skipped", False)),
    )
    state.weights.load_arrays([arrays["omega.A"], arrays["omega.B"]])
    state.rng.bit_generator.state = header["rng"]
    state.iteration = int(header["iteration"])
    state.best_val = -math.inf if header.get("best_val") is None else float(header["best_val"])
    state.best_iter = int(header.get("best_iter", -1))
    return state


# -- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    history: list
    val_history: list
    best_val: float
    best_iter: int
    best_params: tuple  # (A arrays, B arrays) at the best validation point
    best_class_dice: dict = field(default_factory=dict)  # {class: Dice} at the best point


def validation_dice(net, images, labels, config):
    table = evaluate(net, images, labels, config.num_classes, patch=config.eval_patch, stride=config.eval_stride)
    return table.mean_dice(), table


def _snapshot(state):
    return ([a.copy() for a in state.net_a.state_arrays()], [b.copy() for b in state.net_b.state_arrays()])


def train_loop(config, split, val_images=None, val_labels=None, out_dir=None, resume_from=None,
               stop_at=None, log_every=0):
    """Run training to ``config.max_iter`` (or ``stop_at``) and return a :class:`TrainResult`.

    Validation uses model A with sliding-window inference; the best mean
    Dice so far is written to ``best.ckpt``.  The unlabelled pool's hidden
    labels are never revealed here.
    """
    config.validate()
    state = load_checkpoint(resume_from, config) if resume_from else init_state(config)
    reveals_before = split.hidden.reveal_count
    do_val = val_images is not None and len(val_images) > 0
    end = config.max_iter if stop_at is None else min(stop_at, config.max_iter)
    best_params = _snapshot(state)

    csv_fh = writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(config.to_text())
        metrics_path = os.path.join(out_dir, "metrics.csv")
        fresh = not (resume_from and os.path.exists(metrics_path))
        csv_fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(csv_fh, fieldnames=metrics_columns(config.num_classes))
        if fresh:
            writer.writeheader()
    try:
        while state.iteration < end:
            batch = sample_batch(split, state.rng, config.n_l, config.n_u, config.crop)
            report = train_step(state, batch)
            row = report.row()
            state.history.append(row)
            if writer:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            it = state.iteration
            if log_every and it % log_every == 0:
                print(f"iter {it}/{config.max_iter} L_total={report.L_total:.4f} L_sup={report.L_sup:.4f}", flush=True)
            if do_val and (it % config.effective_eval_every == 0 or it == config.max_iter):
                score, table = validation_dice(state.net_a, val_images, val_labels, config)
                state.val_history.append((it, score))
                if score > state.best_val:
                    state.best_val, state.best_iter = score, it
                    state.best_class_dice = {k: d for k, (d, _) in table.class_means().items()}
                    best_params = _snapshot(state)
                    if out_dir:
                        save_checkpoint(os.path.join(out_dir, "best.ckpt"), state)
            if out_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"iter_{it:06d}.ckpt"), state)
    finally:
        if csv_fh:
            csv_fh.close()
    if split.hidden.reveal_count != reveals_before:
        raise RuntimeError("training path revealed hidden unlabelled labels")
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), state)
    return TrainResult(
        state, state.history, state.val_history, state.best_val, state.best_iter, best_params,
        dict(state.best_class_dice),
    )
