"""Command line surface: train, segment, evaluate, sweep, synth, info.

This module must not import numpy (directly or through a sibling module) at
import time: FGSEG_THREADS has to pin the BLAS thread pools before numpy
first loads, so all heavy imports happen inside main().
"""

import argparse
import csv
import os
import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                   "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                   "NUMEXPR_NUM_THREADS")


def pin_threads(environ=os.environ):
    """Apply FGSEG_THREADS to the BLAS pool variables that are still unset."""
    raw = environ.get("FGSEG_THREADS")
    if raw is None or raw == "":
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise ValueError(f"FGSEG_THREADS must be a positive integer, got {raw!r}")
    for var in THREAD_ENV_VARS:
        environ.setdefault(var, raw)
    return int(raw)


@dataclass
class RunConfig:
    command: str
    data: str = None
    out: str = None
    weights_in: str = None
    weights_out: str = None
    manifest: str = None
    masks: str = None
    probs: str = None
    frames: int = None
    epochs: int = None
    lr: float = None
    threshold: float = None
    seed: int = None
    precision: str = None
    synthetic: bool = False
    width: int = None
    height: int = None
    objects: int = None


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_COERCE = {"frames": int, "epochs": int, "seed": int, "width": int,
           "height": int, "objects": int, "lr": float, "threshold": float,
           "synthetic": _bool}

_DEFAULTS = {
    "train": {"frames": 50, "lr": 1e-4, "threshold": 0.8, "seed": 0,
              "precision": "f32", "width": 64, "height": 64, "objects": 2},
    "segment": {"threshold": 0.8, "seed": 0, "frames": 60,
                "width": 64, "height": 64, "objects": 2},
    "evaluate": {},
    "sweep": {},
    "synth": {"frames": 60, "seed": 0, "width": 64, "height": 64,
              "objects": 2},
    "info": {"seed": 0, "precision": "f32"},
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fgseg",
        description="Scene-specific foreground segmentation: train on a few "
                    "labeled frames of one sequence, then segment and score it.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, helptext, *flag_groups):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key=value file; explicit flags win")
        for args, kwargs in flag_groups:
            p.add_argument(*args, default=None, **kwargs)
        return p

    source = [
        (("--data",), dict(help="sequence root (input/ + groundtruth/)")),
        (("--synthetic",), dict(action="store_true",
                                help="use a generated scene instead of --data")),
        (("--width",), dict(type=int, help="synthetic frame width")),
        (("--height",), dict(type=int, help="synthetic frame height")),
        (("--seed",), dict(type=int)),
    ]
    add("train", "fit a model to one sequence", *source,
        (("--manifest",), dict(help="file of 0-based frame indices, one per line")),
        (("--frames",), dict(type=int, help="training frame count")),
        (("--epochs",), dict(type=int)),
        (("--lr",), dict(type=float)),
        (("--threshold",), dict(type=float)),
        (("--weights-in",), dict(dest="weights_in",
                                 help="container with pretrained encoder weights")),
        (("--weights-out",), dict(dest="weights_out")),
        (("--out",), dict(help="history CSV path (default: alongside weights)")),
        (("--precision",), dict(choices=("f32", "f64"))))
    add("segment", "write binary masks for every frame", *source,
        (("--frames",), dict(type=int, help="synthetic frame count")),
        (("--weights-in",), dict(dest="weights_in")),
        (("--threshold",), dict(type=float)),
        (("--out",), dict(help="mask output directory")),
        (("--probs",), dict(help="also dump 16-bit probability maps here")))
    add("evaluate", "score masks against ground truth",
        (("--data",), dict(help="sequence root or category tree")),
        (("--masks",), dict(help="mask directory (mirrors --data layout)")),
        (("--out",), dict(help="CSV output path")))
    add("sweep", "threshold sweep over probability dumps",
        (("--data",), dict(help="sequence root")),
        (("--probs",), dict(help="directory of 16-bit probability maps")),
        (("--out",), dict(help="CSV output path")))
    add("synth", "generate a synthetic sequence on disk",
        (("--out",), dict(help="output directory")),
        (("--frames",), dict(type=int)),
        (("--width",), dict(type=int)),
        (("--height",), dict(type=int)),
        (("--objects",), dict(type=int)),
        (("--seed",), dict(type=int)))
    add("info", "print the parameter report",
        (("--seed",), dict(type=int)),
        (("--precision",), dict(choices=("f32", "f64"))))
    return parser


def _read_config_file(path):
    values = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ValueError(f"cannot read config file: {e}") from e
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def merge_config(args) -> RunConfig:
    """Builtin defaults, then the config file, then explicit flags."""
    known = {f.name for f in fields(RunConfig)}
    effective = dict(_DEFAULTS[args.command])
    if getattr(args, "config", None):
        for key, value in _read_config_file(args.config).items():
            if key not in known or key == "command":
                raise ValueError(f"unknown config key {key!r}")
            effective[key] = _COERCE.get(key, str)(value)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        effective[key] = value
    return RunConfig(command=args.command, **effective)


def _require(cfg, *names):
    for name in names:
        if getattr(cfg, name) is None:
            flag = "--" + name.replace("_", "-")
            raise ValueError(f"{cfg.command} requires {flag}")


def validate(cfg: RunConfig):
    """All flag-combination checks run here, before any file is touched."""
    if cfg.command in ("train", "segment"):
        if cfg.synthetic and cfg.data:
            raise ValueError("--data and --synthetic are mutually exclusive")
        if not cfg.synthetic and not cfg.data:
            raise ValueError(f"{cfg.command} requires --data or --synthetic")
    if cfg.command == "train":
        _require(cfg, "weights_out")
        if cfg.frames < 5:
            raise ValueError("need at least 5 training frames")
    elif cfg.command == "segment":
        _require(cfg, "weights_in", "out")
    elif cfg.command == "evaluate":
        _require(cfg, "data", "masks")
    elif cfg.command == "sweep":
        _require(cfg, "data", "probs")
    elif cfg.command == "synth":
        _require(cfg, "out")
    if cfg.threshold is not None and not 0.0 < cfg.threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {cfg.threshold}")
    return cfg


def _fmt(x):
    if isinstance(x, float) and x != 0 and abs(x) < 1e-3:
        mantissa, exponent = f"{x:e}".split("e")
        mantissa = mantissa.rstrip("0").rstrip(".")
        return f"{mantissa}e{int(exponent)}"
    return f"{x:g}" if isinstance(x, float) else str(x)


def _frame_number(path, index):
    digits = re.findall(r"\d+", Path(path).stem)
    return int(digits[-1]) if digits else index + 1


# ------------------------------------------------------------------ commands

def _synth_config(cfg, data):
    return data.SynthConfig(width=cfg.width, height=cfg.height,
                            n_frames=cfg.frames, n_objects=cfg.objects,
                            seed=cfg.seed)


def _training_examples(cfg, data, training):
    if cfg.synthetic:
        pairs = data.synth_sequence(_synth_config(cfg, data))
        pool = len(pairs)
        if cfg.manifest:
            indices = training.read_manifest(cfg.manifest)
            bad = [i for i in indices if not 0 <= i < pool]
            if bad:
                raise ValueError(f"manifest indices out of range [0, {pool}): {bad}")
        else:
            indices = training.select_frames(pool, min(cfg.frames, pool), cfg.seed)
        return training.examples_from_pairs(pairs, indices)
    handle = data.load_sequence(cfg.data)
    start, stop = data.temporal_range(handle)
    eligible = range(start, stop)
    if cfg.manifest:
        indices = training.read_manifest(cfg.manifest)
        bad = [i for i in indices if not 0 <= i < len(handle)]
        if bad:
            raise ValueError(f"manifest indices out of range [0, {len(handle)}): {bad}")
    else:
        picks = training.select_frames(len(eligible), cfg.frames, cfg.seed)
        indices = [eligible[i] for i in picks]
    return [training.TrainingExample(data.read_frame(handle, i),
                                     data.read_labels(handle, i), i)
            for i in indices]


def cmd_train(cfg, data, model, training):
    examples = _training_examples(cfg, data, training)
    import numpy as np
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    net = model.build_model(encoder_weights=cfg.weights_in, seed=cfg.seed,
                            dtype=dtype)
    tc = training.TrainConfig(n_frames=len(examples), epochs=cfg.epochs,
                              lr=cfg.lr, threshold=cfg.threshold, seed=cfg.seed)
    print(f"train: frames={len(examples)} epochs={tc.epochs} lr={_fmt(tc.lr)} "
          f"rho={_fmt(tc.rho)} eps={_fmt(tc.epsilon)} batch={tc.batch} "
          f"val-split={_fmt(tc.val_split)} threshold={_fmt(tc.threshold)} "
          f"precision={cfg.precision} seed={cfg.seed}")

    def report(epoch, train_loss, val_loss, lr):
        print(f"epoch {epoch + 1}/{tc.epochs} train={train_loss:.6f} "
              f"val={val_loss:.6f} lr={_fmt(lr)}")

    net, history = training.train(tc, examples, net, progress=report)
    weights_path = Path(cfg.weights_out)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    model.save_weights(net, weights_path)
    history_path = Path(cfg.out) if cfg.out else weights_path.with_suffix(".history.csv")
    history_path.parent.mkdir(parents=True, exist_ok=True)
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "train_loss", "val_loss", "lr", "checkpoint"))
        for epoch, (tl, vl, lr) in enumerate(zip(history.train_loss,
                                                 history.val_loss, history.lr)):
            writer.writerow((epoch, f"{tl:.8f}", f"{vl:.8f}", f"{lr:.8g}",
                             int(epoch == history.checkpoint_epoch)))
    print(f"checkpoint: epoch {history.checkpoint_epoch + 1} "
          f"(val={history.val_loss[history.checkpoint_epoch]:.6f})")
    print(f"wrote {weights_path} and {history_path}")
    return 0


def _segment_inputs(cfg, data):
    """Yields (mask number, frame tensor)."""
    if cfg.synthetic:
        pairs = data.synth_sequence(_synth_config(cfg, data))
        for i, (frame, _) in enumerate(pairs):
            yield i + 1, frame
    else:
        handle = data.load_sequence(cfg.data)
        for i in range(len(handle)):
            yield (_frame_number(handle.frame_paths[i], i),
                   data.read_frame(handle, i))


def cmd_segment(cfg, data, model, pyramid):
    net = model.load_weights(cfg.weights_in)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    probs_dir = None
    if cfg.probs:
        probs_dir = Path(cfg.probs)
        probs_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for number, frame in _segment_inputs(cfg, data):
        padded, extents = data.pad_to_multiple_of_4(frame)
        probs = model.forward(net, pyramid.build_pyramid(padded))
        probs = data.crop_back(probs, extents)
        data.write_mask(probs, cfg.threshold, out_dir / f"bin{number:06d}.pgm")
        if probs_dir is not None:
            data.write_prob_map(probs, probs_dir / f"prob{number:06d}.pgm")
        count += 1
    print(f"segment: wrote {count} masks to {out_dir} (threshold {_fmt(cfg.threshold)})")
    return 0


def _score_video(video_root, masks_dir, data, metrics):
    handle = data.load_sequence(video_root)
    start, stop = data.temporal_range(handle)
    wanted = [(i, Path(masks_dir) / f"bin{_frame_number(handle.frame_paths[i], i):06d}.pgm")
              for i in range(start, stop)]
    missing = [p for _, p in wanted if not p.exists()]
    if missing:
        raise ValueError(f"{video_root}: {len(wanted)} ground-truth frames but "
                         f"{len(wanted) - len(missing)} masks under {masks_dir} "
                         f"(first missing: {missing[0].name})")
    counts = metrics.ConfusionCounts(0, 0, 0, 0)
    for i, mask_path in wanted:
        counts = counts + metrics.accumulate(data.read_mask(mask_path),
                                             data.read_labels(handle, i))
    return metrics.compute_metrics(counts)


def cmd_evaluate(cfg, data, metrics):
    root = Path(cfg.data)
    masks = Path(cfg.masks)
    rows = []
    if (root / "input").is_dir():
        report = _score_video(root, masks, data, metrics)
        tree = {root.name or "sequence": {root.name or "sequence": report}}
        rows.append((root.name or "sequence", report))
    else:
        tree = {}
        for cat in sorted(p for p in root.iterdir() if p.is_dir()):
            vids = sorted(v for v in cat.iterdir() if (v / "input").is_dir())
            if not vids:
                continue
            tree[cat.name] = {}
            for vid in vids:
                report = _score_video(vid, masks / cat.name / vid.name,
                                      data, metrics)
                tree[cat.name][vid.name] = report
                rows.append((f"{cat.name}/{vid.name}", report))
        if not tree:
            raise ValueError(f"{root}: no sequences found (missing input/ dirs)")
    per_category, overall = metrics.aggregate(tree)
    if len(tree) > 1 or len(next(iter(tree.values()))) > 1:
        rows.extend(sorted(per_category.items()))
    rows.append(("Overall", overall))
    print(metrics.format_table(rows))
    flagged = sorted({name for _, r in rows for name in r.degenerate})
    if flagged:
        print(f"degenerate ratios (0/0 reported as 0): {', '.join(flagged)}")
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            metrics.emit_csv(rows, fh)
        print(f"wrote {cfg.out}")
    return 0


def cmd_sweep(cfg, data, metrics):
    handle = data.load_sequence(cfg.data)
    start, stop = data.temporal_range(handle)
    prob_maps, label_masks = [], []
    for i in range(start, stop):
        path = Path(cfg.probs) / f"prob{_frame_number(handle.frame_paths[i], i):06d}.pgm"
        if not path.exists():
            raise ValueError(f"{cfg.data}: {stop - start} ground-truth frames "
                             f"but no probability map {path.name} under {cfg.probs}")
        prob_maps.append(data.read_prob_map(path))
        label_masks.append(data.read_labels(handle, i))
    thresholds = tuple(round(0.1 * k, 1) for k in range(1, 10))
    result = metrics.threshold_sweep(prob_maps, label_masks, thresholds)
    rows = [(f"{t:.1f}", r) for t, r in zip(result.thresholds, result.reports)]
    print(metrics.format_table(rows))
    best = result.reports[result.thresholds.index(result.best_threshold)]
    print(f"best threshold: {result.best_threshold:.1f} "
          f"(F-Measure={best.f_measure:.4f})")
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            metrics.emit_csv(rows, fh)
        print(f"wrote {cfg.out}")
    return 0


def cmd_synth(cfg, data):
    sc = _synth_config(cfg, data)
    data.write_synth_dataset(sc, cfg.out)
    print(f"synth: wrote {sc.n_frames} frames ({sc.width}x{sc.height}, "
          f"{sc.n_objects} objects, seed {sc.seed}) to {cfg.out}")
    return 0


def cmd_info(cfg, model):
    import numpy as np
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    net = model.build_model(seed=cfg.seed, dtype=dtype)
    total, trainable, frozen = model.count_parameters(net)
    print(f"parameters: total={total:,} trainable={trainable:,} frozen={frozen:,}")
    header = ("layer", "kind", "weights", "params", "trainable", "l2")
    body = [(name, kind, "x".join(str(s) for s in shape), f"{params:,}",
             "yes" if is_trainable else "no", _fmt(l2))
            for name, kind, shape, params, is_trainable, l2 in model.layer_table(net)]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in body:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return 0


def main(argv=None):
    try:
        pin_threads()
    except ValueError as e:
        print(f"fgseg: {e}", file=sys.stderr)
        return 2
    args = _build_parser().parse_args(argv)
    try:
        cfg = validate(merge_config(args))
    except ValueError as e:
        print(f"fgseg {args.command}: {e}", file=sys.stderr)
        return 2
    from . import data, metrics, model, pyramid, training
    try:
        if cfg.command == "train":
            return cmd_train(cfg, data, model, training)
        if cfg.command == "segment":
            return cmd_segment(cfg, data, model, pyramid)
        if cfg.command == "evaluate":
            return cmd_evaluate(cfg, data, metrics)
        if cfg.command == "sweep":
            return cmd_sweep(cfg, data, metrics)
        if cfg.command == "synth":
            return cmd_synth(cfg, data)
        return cmd_info(cfg, model)
    except (ValueError, OSError, ArithmeticError) as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"fgseg {cfg.command}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
