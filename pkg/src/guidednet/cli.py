"""Command-line driver: ``guidednet {gen-data,train,eval,inspect,ablate}``.

Exit codes: 0 success, 1 usage error (bad flags, unknown config keys,
missing inputs), 2 runtime abort (non-finite loss, incompatible checkpoint).
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import cgmm
from .data import (
    DatasetSplit,
    HiddenLabels,
    default_phantom_spec,
    generate_volume,
    load_split,
    load_validation,
    preprocess,
    preprocess_split,
    save_split,
)
from .experiment import ABLATIONS, DESK_OVERRIDES, PRESETS, directional_experiment, preset_overrides, seeded_config
from .inference import MetricTable, aggregate, evaluate, plot_class_dice, plot_loss_curves, write_eval_csv, write_summary_csv
from .tensor import Tensor
from .trainer import CheckpointError, TrainConfig, TrainingAborted, load_checkpoint, read_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config plumbing ---------------------------------------------------------

def parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_key_values(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values


GEN_KEYS = {"num_classes": int, "dims": "dims", "noise_std": float, "count": int,
            "labeled_fraction": float, "val_count": int}
GEN_DEFAULTS = {"num_classes": "4", "dims": "32,32,32", "noise_std": "15", "count": "40",
                "labeled_fraction": "0.2", "val_count": "4"}


def gen_settings(config_path=None, overrides=None):
    raw = dict(GEN_DEFAULTS)
    if config_path:
        raw.update(_read_key_values(config_path))
    raw.update(overrides or {})
    out = {}
    for k, v in raw.items():
        if k not in GEN_KEYS:
            raise UsageError(f"unknown gen-data key {k!r}; allowed {sorted(GEN_KEYS)}")
        try:
            out[k] = tuple(int(x) for x in v.split(",")) if GEN_KEYS[k] == "dims" else GEN_KEYS[k](v)
        except ValueError:
            raise UsageError(f"bad value for {k}: {v!r}") from None
    if not 0 <= out["labeled_fraction"] <= 1:
        raise UsageError("labeled_fraction must lie in [0, 1]")
    if out["count"] < 1:
        raise UsageError("count must be >= 1")
    return out


def labeled_count(count, fraction):
    """Labelled cases for ``fraction`` of ``count``, rounded down."""
    return int(math.floor(count * fraction + 1e-9))


def train_config(args):
    try:
        base = TrainConfig.load(args.config) if args.config else TrainConfig()
        overrides = parse_overrides(args.override)
        if args.seed is not None:
            return seeded_config(args.seed, base, args.preset or "guidednet", overrides)
        values = preset_overrides(args.preset) if args.preset else {}
        values.update(overrides)
        return base.with_overrides(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None


def _manifest(data_dir):
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(path):
        raise UsageError(f"no dataset at {data_dir} (missing manifest.txt)")
    return path


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    settings = gen_settings(args.config, parse_overrides(args.override))
    if args.count is not None:
        settings["count"] = args.count
    if args.labeled_fraction is not None:
        settings["labeled_fraction"] = args.labeled_fraction
    seed = 0 if args.seed is None else args.seed
    spec = default_phantom_spec(settings["num_classes"], dims=settings["dims"],
                                noise_std=settings["noise_std"], seed=seed)
    count = settings["count"]
    n_l = labeled_count(count, settings["labeled_fraction"])
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {args.out}: {exc}") from None
    pairs = [generate_volume(spec, i) for i in range(count)]
    split = DatasetSplit(
        labeled_images=[p[0] for p in pairs[:n_l]],
        labeled_labels=[p[1] for p in pairs[:n_l]],
        unlabeled_images=[p[0] for p in pairs[n_l:]],
        hidden=HiddenLabels([p[1] for p in pairs[n_l:]]),
        labeled_ids=list(range(n_l)),
        unlabeled_ids=list(range(n_l, count)),
    )
    val = [generate_volume(spec, 1000 + i) for i in range(settings["val_count"])]
    path = save_split(split, args.out, val)
    with open(os.path.join(args.out, "gen_config.txt"), "w", encoding="utf-8") as fh:
        for k, v in settings.items():
            fh.write(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}\n")
        fh.write(f"seed={seed}\n")
    print(f"wrote {n_l} labeled, {count - n_l} unlabeled, {len(val)} validation cases to {path}")
    return EXIT_OK


def _load_train_data(data_dir):
    manifest = _manifest(data_dir)
    split = load_split(manifest)
    val_images, val_labels = load_validation(manifest)
    val = [preprocess(v, lab) for v, lab in zip(val_images, val_labels)]
    return preprocess_split(split), [v for v, _ in val], [lab for _, lab in val]


def cmd_train(args):
    config = train_config(args)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split, val_images, val_labels = _load_train_data(args.data)
    if not split.labeled_images:
        raise UsageError(f"dataset at {args.data} has no labeled cases")
    try:
        result = train_loop(config, split, val_images, val_labels, out_dir=args.out,
                            resume_from=args.resume, log_every=args.log_every)
    except TrainingAborted as exc:
        path = os.path.join(args.out, "abort_report.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{exc}\n")
            for k, v in exc.report.row().items():
                fh.write(f"{k}={v!r}\n")
        print(f"training aborted: {exc}\nreport: {path}", file=sys.stderr)
        return EXIT_ABORT
    except CheckpointError as exc:
        print(f"cannot resume: {exc}", file=sys.stderr)
        return EXIT_ABORT
    plot_loss_curves(os.path.join(args.out, "loss_curves.svg"), result.history)
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"iterations={result.state.iteration}\n")
        fh.write(f"best_val_dice={result.best_val!r}\nbest_iter={result.best_iter}\n")
        for k, d in sorted(result.best_class_dice.items()):
            fh.write(f"class_{k}_dice={d!r}\n")
    print(f"done: {result.state.iteration} iterations, best validation Dice {result.best_val:.4f} "
          f"at {result.best_iter}; outputs in {args.out}")
    return EXIT_OK


def _eval_set(data_dir, which):
    manifest = _manifest(data_dir)
    if which == "val":
        images, labels = load_validation(manifest)
        names = [f"val_{i:04d}" for i in range(len(images))]
    else:
        split = load_split(manifest)
        labels = split.hidden.reveal(purpose="evaluation")
        images = split.unlabeled_images
        names = [f"case_{i:04d}" for i in split.unlabeled_ids]
        if any(lab is None for lab in labels):
            raise UsageError("some unlabeled cases have no evaluation labels")
    pairs = [preprocess(v, lab) for v, lab in zip(images, labels)]
    return [p[0] for p in pairs], [p[1] for p in pairs], names


def cmd_eval(args):
    ckpts = args.checkpoint
    if args.runs is not None and args.runs != len(ckpts):
        raise UsageError(f"--runs {args.runs} but {len(ckpts)} checkpoint(s) given")
    for c in ckpts:
        if not os.path.isfile(c):
            raise UsageError(f"missing checkpoint {c}")
    images, labels, names = _eval_set(args.data, args.split)
    if not images:
        raise UsageError(f"no {args.split} cases in {args.data}")
    tables = []
    all_rows = MetricTable()
    for run, path in enumerate(ckpts):
        state = load_checkpoint(path)
        K = state.config.num_classes
        top = max(int(np.asarray(lab.data).max()) for lab in labels)
        if top >= K:
            print(f"incompatible checkpoint: {path} predicts {K} classes but labels contain class {top}",
                  file=sys.stderr)
            return EXIT_ABORT
        net = state.net_a if args.model == "A" else state.net_b
        table = evaluate(net, images, labels, K, run=str(run), patch=state.config.eval_patch,
                         stride=state.config.eval_stride, names=names)
        tables.append(table)
        all_rows.rows.extend(table.rows)
        print(f"run {run} ({path}): mean Dice {table.mean_dice():.6f}, mean Jaccard {table.mean_jaccard():.6f}")
    os.makedirs(args.out, exist_ok=True)
    summary = aggregate(tables)
    write_eval_csv(os.path.join(args.out, "eval.csv"), all_rows)
    write_summary_csv(os.path.join(args.out, "summary.csv"), summary)
    if args.plots:
        plot_class_dice(os.path.join(args.out, "class_dice.svg"), summary)
    for r in summary:
        print(f"class {r.cls}: Dice {r.mean_dice:.4f} ± {r.sd_dice:.4f}, Jaccard {r.mean_jaccard:.4f} ± {r.sd_jaccard:.4f}")
    return EXIT_OK


def center_distances(state, images):
    """Feature-centre distances on ``images`` using model A's features and pseudo-labels."""
    feats, pseudo = [], []
    for img in images:
        out = state.net_a.forward(Tensor(np.asarray(img.data, dtype=np.float64)[None, None]))
        feats.append(out.features.data)
        pseudo.append(out.logits.data.argmax(axis=1))
    return cgmm.feature_center_distance(state.gmm, np.concatenate(feats), np.concatenate(pseudo))


def cmd_inspect(args):
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"missing checkpoint {args.checkpoint}")
    header, _ = read_checkpoint(args.checkpoint)
    state = load_checkpoint(args.checkpoint)
    g = state.gmm
    print(f"checkpoint {args.checkpoint}: iteration {header['iteration']}, best Dice {header.get('best_val')}")
    print("class  seen  |mu|        sigma min   sigma max")
    for k in range(g.num_classes):
        mu = g.means.data[k]
        sd = g.stds.data[k]
        print(f"{k:5d}  {int(g.seen[k]):4d}  {np.linalg.norm(mu):10.6f}  {sd.min():10.6f}  {sd.max():10.6f}")
    np.set_printoptions(precision=6, suppress=False)
    print(f"omega_A = {state.weights.omega_a}")
    print(f"omega_B = {state.weights.omega_b}")
    if args.data:
        split, _, _ = _load_train_data(args.data)
        dist = center_distances(state, split.unlabeled_images)
        print("feature-centre distance (labelled centre vs pseudo-labelled unlabelled centre)")
        for k, d in enumerate(dist):
            print(f"  class {k}: {float(d)!r}")
    return EXIT_OK


def cmd_ablate(args):
    names = ABLATIONS.get(args.preset)
    if names is None:
        names = tuple(n.strip() for n in args.preset.split(","))
        unknown = [n for n in names if n not in PRESETS]
        if unknown:
            raise UsageError(f"unknown preset(s) {unknown}; use {sorted(ABLATIONS)} or names from {sorted(PRESETS)}")
    overrides = dict(DESK_OVERRIDES)
    overrides.update(parse_overrides(args.override))
    try:
        TrainConfig().with_overrides(overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    first = 0 if args.seed is None else args.seed
    seeds = tuple(range(first, first + args.runs))
    result = directional_experiment(seeds, names, overrides=parse_overrides(args.override), log=print)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "best_dice", "best_iter", "class_dice"])
        for r in result.records:
            w.writerow([r.method, r.seed, repr(r.best_val), r.best_iter,
                        ";".join(f"{k}:{v!r}" for k, v in sorted(r.class_dice.items()))])
    for name in names:
        vals = [r.best_val for r in result.of(name)]
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        print(f"{name:20s} mean Dice {np.mean(vals):.4f} ± {sd:.4f} over {len(vals)} run(s)")
    print(f"wrote {path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="guidednet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="replicate seed")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("gen-data", help="write a phantom dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--labeled-fraction", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train models A and B")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints with sliding-window inference")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--split", choices=("val", "unlabeled"), default="val")
    p.add_argument("--model", choices=("A", "B"), default="A")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print GMM statistics and class weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="run an ablation grid on desk-scale phantoms")
    common(p)
    p.add_argument("--preset", required=True, help=f"{sorted(ABLATIONS)} or comma-separated method presets")
    p.add_argument("--runs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"guidednet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"guidednet {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
