"""``diffspot`` command-line tool.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
that writes files also writes a ``manifest.json`` (or ``<file>.manifest.json``
beside a single output file) echoing the command, the merged configuration,
the seed, the tool version, the paths and the wall-clock time.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .defaults import DEFAULTS_VERSION, all_defaults
from .errors import DiffSpotError

log = logging.getLogger("diffspot")


class UsageError(Exception):
    """Bad flag values detected after argparse (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration and manifests

def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, profile=None):
    """Defaults, then the named profile, then the user's YAML/JSON overrides."""
    config = all_defaults()
    profiles = config.pop("profiles", {})
    if profile:
        if profile not in profiles:
            raise UsageError(f"unknown profile {profile!r}; choose from {sorted(profiles)}")
        config = deep_merge(config, profiles[profile])
    if path:
        try:
            override = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(override, dict):
            raise UsageError(f"config {path} must be a mapping")
        unknown = set(override) - set(config)
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        config = deep_merge(config, override)
    return config


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return str(value)


def write_manifest(path, args, config, inputs, outputs, started, extra=None):
    argv = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": config,
        "defaults_version": DEFAULTS_VERSION,
        "seed": args.seed,
        "workers": args.workers,
        "version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "duration_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def manifest_beside(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


# ---------------------------------------------------------------------------
# helpers

def parse_size(text):
    """``1000x600`` -> (height 600, width 1000)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like WIDTHxHEIGHT, got {text!r}") from exc
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _arch(args, config):
    from .detnet import ArchConfig

    try:
        return ArchConfig.from_name(args.arch, args.width, config["schedule"]["input_scale"])
    except DiffSpotError as exc:
        raise UsageError(str(exc)) from exc


def _schedule(config):
    from .trainer import TrainSchedule

    s = dict(config["schedule"])
    epochs, lr = s.pop("epochs", None), s.pop("lr", None)
    if epochs is not None:
        from .trainer import desk_schedule

        return desk_schedule(epochs, lr if lr is not None else s["base_lr"], s["input_scale"], s["max_side"],
                             momentum=s["momentum"], weight_decay=s["weight_decay"], flip=s["flip"],
                             clip_norm=s["clip_norm"])
    return TrainSchedule(**s)


def _apply_schedule_flags(args, config):
    s = config["schedule"]
    if getattr(args, "epochs", None) is not None:
        s["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        s["lr"] = args.lr
    if getattr(args, "input_scale", None) is not None:
        s["input_scale"] = args.input_scale
    if getattr(args, "max_side", None) is not None:
        s["max_side"] = args.max_side


def _detector_config(config):
    from .rcnn.model import DetectorConfig

    return DetectorConfig.from_dict(config["rcnn"])


def _load_datasets(paths):
    """Concatenate one or more dataset directories (e.g. synthetic + same pairs)."""
    from .synthgen import load_dataset

    samples = []
    for path in paths:
        samples.extend(load_dataset(path))
    if not samples:
        raise UsageError(f"no samples in {', '.join(map(str, paths))}")
    return samples


def _read_pair(args):
    """One pair from ``--design/--photo`` or ``--dataset/--id``."""
    from .structures import AlignedPair
    from .synthgen import load_dataset, read_image

    if args.design and args.photo:
        return AlignedPair(read_image(args.design), read_image(args.photo), pair_id=Path(args.photo).stem)
    if args.dataset and args.id:
        for sample in load_dataset(args.dataset):
            if sample.sample_id == args.id:
                return sample.pair
        raise UsageError(f"pair {args.id!r} not found in {args.dataset}")
    raise UsageError("give --design and --photo, or --dataset and --id")


# ---------------------------------------------------------------------------
# commands

def cmd_covers(args, config):
    """Procedural cover pairs: an aligned weak dataset plus raw belt photos."""
    from .covers import make_same_pairs, render_on_belt
    from .synthgen import same_samples, save_dataset, write_image

    out = Path(args.out)
    pairs = make_same_pairs(args.n, args.seed, args.height, args.width, prefix=args.prefix)
    save_dataset(same_samples(pairs), out)
    if args.belt:
        rng = np.random.default_rng([args.seed, 1])
        background = None
        for pair in pairs:
            photo, background, _ = render_on_belt(pair.photo, rng, background=background)
            write_image(out / "photos" / f"{pair.pair_id}.png", photo)
            write_image(out / "designs" / f"{pair.pair_id}.png", pair.design)
        write_image(out / "background.png", background)
    return {}, {"dataset": out}, out / "manifest.json", {"pairs": len(pairs)}


def cmd_align(args, config):
    from .imaging import EdgeParams, MatchParams, register_photo
    from .structures import Kind, SynthSample
    from .synthgen import read_image, save_dataset

    photo_dir, design_dir, out = Path(args.photos), Path(args.designs), Path(args.out)
    photos = sorted(p for p in photo_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not photos:
        raise UsageError(f"no images in {photo_dir}")
    background = read_image(args.background) if args.background else None
    edge = EdgeParams(**config["edge"])
    match = MatchParams(**dict(config["match"], seed=args.seed))
    aligned, failures = [], []
    for photo_path in photos:
        pid = photo_path.stem
        candidates = [design_dir / (pid + ext) for ext in (photo_path.suffix, ".png", ".jpg", ".jpeg")]
        design_path = next((c for c in candidates if c.exists()), None)
        if design_path is None:
            failures.append({"id": pid, "reason": "MissingDesign", "detail": "no design with this name"})
            continue
        try:
            pair = register_photo(read_image(design_path), read_image(photo_path), background, edge, match, pid)
        except DiffSpotError as exc:
            log.warning("pair %s failed: %s: %s", pid, type(exc).__name__, exc)
            failures.append({"id": pid, "reason": type(exc).__name__, "detail": str(exc)})
            continue
        aligned.append(SynthSample(pair, [], Kind.SAME, (pid,), {"transform": pair.transform.tolist()}))
    save_dataset(aligned, out)
    atomic_write_text(out / "failures.json", json.dumps(failures, indent=2, sort_keys=True) + "\n")
    transforms = {s.sample_id: s.meta["transform"] for s in aligned}
    atomic_write_text(out / "transforms.json", json.dumps(transforms, indent=2, sort_keys=True) + "\n")
    status = 1 if len(failures) * 2 > len(photos) else 0
    if status:
        log.error("%d of %d pairs failed to align", len(failures), len(photos))
    inputs = {"photos": photo_dir, "designs": design_dir, "background": args.background or ""}
    return inputs, {"dataset": out}, out / "manifest.json", {"aligned": len(aligned), "failed": len(failures),
                                                          "exit_status": status}


def cmd_synth(args, config):
    from .structures import Kind
    from .synthgen import GenConfig, build_dataset, load_dataset, save_dataset

    gen = dict(config["gen"])
    if args.magnification is not None:
        gen["magnification"] = args.magnification
    try:
        gen_config = GenConfig(**gen)
    except DiffSpotError as exc:
        raise UsageError(str(exc)) from exc
    weak = load_dataset(args.pairs, kinds={Kind.SAME})
    if not weak:
        raise UsageError(f"no same pairs in {args.pairs}")
    samples, report = build_dataset([s.pair for s in weak], gen_config, args.seed, args.workers)
    out = Path(args.out)
    save_dataset(samples, out, report)
    return {"pairs": args.pairs}, {"dataset": out}, out / "manifest.json", {"samples": len(samples)}


def cmd_count(args, config):
    from .detnet import cost_report

    arch = _arch(args, config)
    h, w = args.size
    try:
        report = cost_report(arch, h, w)
    except DiffSpotError as exc:
        raise UsageError(str(exc)) from exc
    print(f"{'Arch':<12} {'Params':>9} {'MAC':>9}")
    print(report.row(arch.name))
    outputs = {}
    if args.json:
        row = {"arch": arch.name, "size": f"{w}x{h}", "params_per_branch": report.params_per_branch,
               "params_unique": report.params_unique, "mac": report.mac}
        atomic_write_text(args.json, json.dumps(row, indent=2, sort_keys=True) + "\n")
        outputs["json"] = args.json
    manifest = manifest_beside(args.json) if args.json else None
    return {}, outputs, manifest, {}


def cmd_train(args, config):
    from .checkpoint import save_checkpoint
    from .trainer import train, write_history

    _apply_schedule_flags(args, config)
    arch = _arch(args, config)
    schedule = _schedule(config)
    samples = _load_datasets(args.dataset)
    pretrained = None
    if args.pretrained:
        from .checkpoint import load_arrays

        pretrained = load_arrays(args.pretrained)
    model, history = train(samples, arch, schedule, args.seed, _detector_config(config),
                           args.checkpoint_dir, args.init, pretrained)
    out = Path(args.out)
    meta = {"kind": "detector", "input_scale": schedule.input_scale, "max_side": schedule.max_side,
            "seed": args.seed, "schedule": schedule.to_dict()}
    save_checkpoint(model, out, meta)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    write_history(history, history_path)
    return ({"dataset": ",".join(args.dataset)}, {"checkpoint": out, "history": history_path}, manifest_beside(out),
            {"final_loss": history[-1]["total"] if history else None})


def cmd_baseline(args, config):
    from .baselines import train_baseline
    from .checkpoint import save_checkpoint
    from .trainer import write_history

    _apply_schedule_flags(args, config)
    schedule = _schedule(config)
    samples = _load_datasets(args.dataset)
    model, history = train_baseline(args.kind, samples, args.width, schedule, args.seed)
    out = Path(args.out)
    save_checkpoint(model, out, {"kind": args.kind, "input_scale": schedule.input_scale,
                                 "max_side": schedule.max_side, "seed": args.seed, "schedule": schedule.to_dict()})
    history_path = out.with_suffix(".history.csv")
    write_history(history, history_path)
    inputs = {"dataset": ",".join(args.dataset)}
    return inputs, {"checkpoint": out, "history": history_path}, manifest_beside(out), {}


def cmd_eval(args, config):
    from .evalkit import checkpoint_scorer, evaluate, evaluate_scores, read_pairs_csv, write_report

    targets = tuple(config["eval"]["fpr_targets"])
    out = Path(args.out)
    if args.scores_from:
        report = evaluate_scores(read_pairs_csv(args.scores_from), targets)
        inputs = {"scores": args.scores_from}
    else:
        if not (args.model and args.dataset):
            raise UsageError("eval needs --model and --dataset, or --scores-from")
        scorer, _ = checkpoint_scorer(args.model)
        report = evaluate(scorer, _load_datasets(args.dataset), targets)
        inputs = {"model": args.model, "dataset": ",".join(args.dataset)}
    write_report(report, out, plot=not args.no_plot)
    print(f"AUC {report.auc:.4f}  " + "  ".join(f"TPR@{k:g} {v:.3f}" for k, v in report.tpr_at.items()))
    return inputs, {"report": out}, out / "manifest.json", {"summary": report.summary()}


def cmd_detect(args, config):
    from .checkpoint import load_model
    from .evalkit import input_scale_factor
    from .rcnn.model import detect

    model, manifest = load_model(args.model)
    if manifest["model"]["kind"] != "detector":
        raise UsageError(f"{args.model} is not a detector checkpoint")
    pair = _read_pair(args)
    meta = manifest.get("meta", {})
    scale = input_scale_factor(pair.height, pair.width, meta.get("input_scale"), meta.get("max_side"))
    boxes = [b for b in detect(model, pair, scale) if b.score >= args.threshold]
    record = {"id": pair.pair_id, "width": pair.width, "height": pair.height,
              "boxes": [list(b.as_tuple()) for b in boxes], "scores": [b.score for b in boxes]}
    out = Path(args.out)
    atomic_write_text(out, json.dumps(record, sort_keys=True) + "\n")
    outputs = {"detections": out}
    if args.overlay:
        from .viz import draw_boxes
        from .synthgen import write_image

        write_image(args.overlay, draw_boxes(pair.photo, boxes))
        outputs["overlay"] = args.overlay
    inputs = {"model": args.model, "design": args.design or "", "photo": args.photo or "",
              "dataset": args.dataset or "", "id": args.id or ""}
    return inputs, outputs, manifest_beside(out), {"n_boxes": len(boxes)}


def cmd_occlusion(args, config):
    from .checkpoint import load_model
    from .estimators import SixChannelClassifier
    from .evalkit import _resized_pair, input_scale_factor, occlusion_map
    from .synthgen import write_image
    from .viz import heatmap_image

    model, manifest = load_model(args.model)
    if manifest["model"]["kind"] != "classify6":
        raise UsageError(f"{args.model} is not a 6-channel classifier checkpoint")
    ev = config["eval"]
    square = args.square or ev["occlusion_square"]
    stride = args.stride or ev["occlusion_stride"]
    target = args.target or ev["occlusion_target"]
    pair = _read_pair(args)
    meta = manifest.get("meta", {})
    stacked = _resized_pair(pair, input_scale_factor(pair.height, pair.width, meta.get("input_scale"),
                                                     meta.get("max_side")))
    clf = SixChannelClassifier()
    clf.model_ = model
    grid = occlusion_map(clf, stacked, square, stride, target, ev["occlusion_value"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])
    write_image(out / "heatmap.png", heatmap_image(grid, stacked[:, :, 3:]))
    return ({"model": args.model}, {"grid": out / "grid.csv", "heatmap": out / "heatmap.png"},
            out / "manifest.json", {"grid_shape": list(grid.shape), "square": square, "stride": stride,
                                    "target": target})


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(prog="diffspot", description="Spot differences between aligned image pairs.")
    parser.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers where supported (default 1)")
    parser.add_argument("--config", help="YAML or JSON file overriding default sections")
    parser.add_argument("--profile", help="named preset from the defaults file, e.g. 'desk'")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("covers", help="generate procedural cover pairs")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--prefix", default="cover")
    p.add_argument("--belt", action="store_true", help="also write raw belt photos, designs and background")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_covers)

    p = sub.add_parser("align", help="register photos to their designs")
    p.add_argument("--photos", required=True, help="directory of photos named <id>.png")
    p.add_argument("--designs", required=True, help="directory of designs with matching names")
    p.add_argument("--background")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("synth", help="generate an annotated synthetic dataset from same pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--magnification", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("count", help="parameter and MAC count of an architecture")
    p.add_argument("--arch", default="conv1", help="conv1..conv5 or 1by2/1by4/1by8/1by16")
    p.add_argument("--width", default="1", help="width factor, e.g. 1/8")
    p.add_argument("--size", type=parse_size, default=(600, 1000), help="WIDTHxHEIGHT (default 1000x600)")
    p.add_argument("--json", help="also write the row as JSON to this file")
    p.set_defaults(func=cmd_count)

    def schedule_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--input-scale", type=int)
        p.add_argument("--max-side", type=int)

    p = sub.add_parser("train", help="train the difference detector")
    p.add_argument("--dataset", nargs="+", required=True)
    p.add_argument("--arch", default="conv1")
    p.add_argument("--width", default="1")
    schedule_flags(p)
    p.add_argument("--init", choices=("xavier_all", "pretrained_pre_concat"), default="xavier_all")
    p.add_argument("--pretrained", help="checkpoint or .npz with pre-merge conv weights")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--history")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="train a Siamese or 6-channel baseline")
    p.add_argument("--kind", choices=("siamese", "classify6"), required=True)
    p.add_argument("--dataset", nargs="+", required=True)
    p.add_argument("--width", default="1")
    schedule_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="ROC evaluation of a model or a scored pair list")
    p.add_argument("--model")
    p.add_argument("--dataset", nargs="+")
    p.add_argument("--scores-from", help="pairs.csv (pair_id,label,distance) to evaluate directly")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    def pair_flags(p):
        p.add_argument("--design")
        p.add_argument("--photo")
        p.add_argument("--dataset")
        p.add_argument("--id")

    p = sub.add_parser("detect", help="detect differences in one aligned pair")
    p.add_argument("--model", required=True)
    pair_flags(p)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--overlay", help="write the photo with boxes drawn to this PNG")
    p.add_argument("--out", required=True, help="JSON detections file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("occlusion", help="occlusion-sensitivity map of the 6-channel classifier")
    p.add_argument("--model", required=True)
    pair_flags(p)
    p.add_argument("--square", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--target", choices=("photo", "design", "both"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_occlusion)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        config = load_config(args.config, args.profile)
        inputs, outputs, manifest_path, extra = args.func(args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"diffspot: error: {exc}", file=sys.stderr)
        return 2
    except (DiffSpotError, OSError, ValueError, KeyError) as exc:
        print(f"diffspot: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    status = int((extra or {}).get("exit_status", 0))
    if manifest_path is not None:
        write_manifest(manifest_path, args, config, inputs, outputs, started, extra)
    return status


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
