"""Command-line entry point.

One binary, subcommand style.  Settings come from built-in defaults, then an
optional JSON config file (``--config``), then command-line flags, in that
order of increasing precedence.  All randomness funnels through a single
seed.  Logs go to stderr; machine-readable outputs go to files (and JSON
summaries to stdout).  The resolved configuration is echoed into the run
directory.  ``FODLOC_RUN_DIR`` sets the default output base directory.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, pipeline
from .data import (
    PatchSpec,
    SyntheticSceneConfig,
    build_dataset,
    load_annotations,
    load_frame,
    load_split_array,
    read_manifest,
    save_png,
)
from .errors import FodlocError
from .imaging import BoundingBox, ImagePatch, crop
from .model import (
    AutoencoderSpec,
    ViTLayerSpec,
    classify as classify_crop,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, train_autoencoder, train_classifier

log = logging.getLogger("fodloc")

DEFAULT_SWEEP = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise FodlocError("config file must hold a JSON object")
    return cfg


def _scene_config(file_cfg, args):
    section = dict(file_cfg.get("data", {}))
    if "patch_size" in section:
        w, h = section.pop("patch_size")
        section["patch_size"] = PatchSpec(w, h)
    for key in ("base_gray", "object_count", "object_size", "object_color", "object_shapes"):
        if key in section:
            section[key] = tuple(section[key])
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    return SyntheticSceneConfig(**section)


def _spec_from_string(text, patch_size, file_section=None):
    """Parse ``depth=3,vit=outer,skips=true,base=8`` style spec strings."""
    section = dict(file_section or {})
    if text:
        for item in text.split(","):
            if not item:
                continue
            key, _, value = item.partition("=")
            section[key.strip()] = value.strip()
    kwargs = {"input_size": patch_size}
    vit_kwargs = dict(section.pop("vit_params", {}))
    for key, value in section.items():
        if key in ("depth", "base", "base_channels"):
            kwargs["base_channels" if key in ("base", "base_channels") else "depth"] = int(value)
        elif key in ("vit", "vit_placement"):
            kwargs["vit_placement"] = str(value).lower()
        elif key in ("skips", "skip_connections"):
            kwargs["skip_connections"] = str(value).lower() in ("1", "true", "yes")
        elif key == "vit_encoder_only":
            kwargs["vit_encoder_only"] = str(value).lower() in ("1", "true", "yes")
        elif key in ("token_patch", "embed_dim", "heads", "transformer_depth"):
            vit_kwargs[key] = int(value)
        else:
            raise FodlocError(f"unknown spec key {key!r}")
    if vit_kwargs:
        kwargs["vit"] = ViTLayerSpec(**{k: int(v) for k, v in vit_kwargs.items()})
    return AutoencoderSpec(**kwargs)


def _train_config(file_cfg, args):
    section = dict(file_cfg.get("training", {}))
    for flag, key in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
        ("optimizer", "optimizer"),
        ("seed", "seed"),
        ("validation_fraction", "validation_fraction"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    return TrainConfig(**section)


def _out_dir(args, command):
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get("FODLOC_RUN_DIR", "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir, payload):
    def default(obj):
        if dataclasses.is_dataclass(obj):
            return dataclasses.asdict(obj)
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, np.integer):
            return int(obj)
        raise TypeError(f"not serializable: {type(obj)}")

    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)


def _write_metrics_csv(path, history):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["epoch", "train_loss", "val_loss"]
        if history.val_accuracy is not None:
            header.append("val_accuracy")
        w.writerow(header)
        for i, (tr, vl) in enumerate(zip(history.train_loss, history.val_loss)):
            row = [i, f"{tr:.8f}", f"{vl:.8f}"]
            if history.val_accuracy is not None:
                row.append(f"{history.val_accuracy[i]:.6f}")
            w.writerow(row)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    file_cfg = _load_config_file(args.config)
    scene = _scene_config(file_cfg, args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = build_dataset(scene, args.train, args.test, out)
    _echo_config(out, {"command": "gen-data", "data": scene,
                       "n_train": args.train, "n_test": args.test})
    log.info("wrote %d patches to %s", len(records), out)
    print(json.dumps({"patches": len(records), "out_dir": str(out)}))
    return 0


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    out = _out_dir(args, "train")
    data_dir = Path(args.data)
    ids, patches = load_split_array(data_dir, "train")
    if patches.shape[0] == 0:
        raise FodlocError(f"no train split found under {data_dir}")
    patch_size = PatchSpec(patches.shape[2], patches.shape[1])
    spec = _spec_from_string(args.spec, patch_size, file_cfg.get("model"))
    cfg = _train_config(file_cfg, args)
    log.info("training %s on %d patches", spec, len(ids))
    model, history = train_autoencoder(patches, spec, cfg)
    ckpt = out / "autoencoder.npz"
    save_checkpoint(model, ckpt)
    _write_metrics_csv(out / "metrics.csv", history)
    _echo_config(out, {"command": "train", "model": spec, "training": cfg,
                       "data": str(data_dir)})
    final = history.val_loss[-1] if history.val_loss else None
    print(json.dumps({"checkpoint": str(ckpt), "epochs": cfg.epochs, "val_loss": final}))
    return 0


def _gt_crops(data_dir):
    """Cut labeled crops out of the test split using its annotations."""
    data_dir = Path(data_dir)
    ids, patches = load_split_array(data_dir, "test")
    by_id = {pid: ImagePatch(p.astype(np.float64)) for pid, p in zip(ids, patches)}
    crops, labels = [], []
    for gt in load_annotations(data_dir / "annotations.csv"):
        patch = by_id.get(gt.patch_id)
        if patch is None:
            continue
        crops.append(crop(patch, gt.box))
        labels.append(gt.label)
    return crops, labels


def cmd_train_classifier(args):
    file_cfg = _load_config_file(args.config)
    out = _out_dir(args, "train-classifier")
    crops, labels = _gt_crops(args.data)
    if not crops:
        raise FodlocError(f"no annotated test crops under {args.data}")
    cfg = _train_config(file_cfg, args)
    log.info("training classifier on %d crops, %d classes",
             len(crops), len(set(labels)))
    model, history = train_classifier(crops, labels, cfg, input_size=args.input_size)
    ckpt = out / "classifier.npz"
    save_checkpoint(model, ckpt)
    _write_metrics_csv(out / "metrics.csv", history)
    _echo_config(out, {"command": "train-classifier", "training": cfg,
                       "input_size": args.input_size, "data": str(args.data)})
    acc = history.val_accuracy[-1] if history.val_accuracy else None
    print(json.dumps({"checkpoint": str(ckpt), "val_accuracy": acc}))
    return 0


def cmd_localize(args):
    out = _out_dir(args, "localize")
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model.spec if hasattr(model, "spec") else None, AutoencoderSpec):
        raise FodlocError("checkpoint does not hold an autoencoder")
    spec = model.spec.input_size
    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    detections = []
    images = sorted(Path(args.images).glob("*.png")) + sorted(Path(args.images).glob("*.jpg"))
    for path in images:
        frame = load_frame(path)
        if (frame.height, frame.width) == (spec.height, spec.width):
            patch = ImagePatch(frame.pixels)
            det, seg = pipeline.localize_patch(
                model, patch, patch_id=path.stem, min_pixels=args.min_pixels,
                use_ssim=args.ssim,
            )
            if det is not None:
                detections.append(det)
            mask = seg
        else:
            dets, mask = pipeline.localize_frame(
                model, frame, spec, min_pixels=args.min_pixels, use_ssim=args.ssim
            )
            detections.extend(dets)
        save_png(masks_dir / f"{path.stem}.png", mask.mask.astype(np.float64))
    csv_path = out / "detections.csv"
    pipeline.write_detections_csv(csv_path, detections)
    _echo_config(out, {"command": "localize", "checkpoint": str(args.checkpoint),
                       "images": str(args.images), "min_pixels": args.min_pixels,
                       "ssim": bool(args.ssim)})
    log.info("%d detections over %d images", len(detections), len(images))
    print(json.dumps({"detections": len(detections), "csv": str(csv_path)}))
    return 0


def cmd_classify(args):
    out_path = Path(args.out) if args.out else _out_dir(args, "classify") / "labels.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    import csv as _csv

    rows = []
    for path in sorted(Path(args.crops).glob("*.png")):
        frame = load_frame(path)
        pred = classify_crop(model, frame.pixels)
        label = pred.label if pred.score >= args.tau else pipeline.UNKNOWN_LABEL
        rows.append([path.name, label, f"{pred.score:.6f}"])
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(["crop", "label", "score"])
        w.writerows(rows)
    print(json.dumps({"labeled": len(rows), "csv": str(out_path)}))
    return 0


def cmd_evaluate(args):
    preds = pipeline.read_detections_csv(args.detections)
    gts = load_annotations(args.annotations)
    report = evaluation.evaluate_detections(preds, gts, args.iou)
    if args.out:
        evaluation.write_report_csv(args.out, report)
    print(json.dumps({
        "iou_threshold": report.iou_threshold,
        "n_ground_truth": report.n_ground_truth,
        "n_correct": report.n_correct,
        "n_false_positive": report.n_false_positive,
        "detection_rate": report.detection_rate,
    }))
    return 0


def cmd_sweep(args):
    preds = pipeline.read_detections_csv(args.detections)
    gts = load_annotations(args.annotations)
    thresholds = [float(t) for t in args.thresholds.split(",") if t]
    curve = evaluation.threshold_sweep(preds, gts, thresholds)
    out_path = Path(args.out) if args.out else _out_dir(args, "sweep") / "sweep.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_sweep_csv(out_path, curve)
    print(json.dumps({"points": curve.points, "csv": str(out_path)}))
    return 0


DEFAULT_ABLATION = (
    ("depth2", "depth=2"),
    ("conv_depth3", "depth=3"),
    ("depth4", "depth=4"),
    ("skip_depth3", "depth=3,skips=true"),
)


def cmd_ablate(args):
    file_cfg = _load_config_file(args.config)
    out = _out_dir(args, "ablate")
    data_dir = Path(args.data)
    _, train_patches = load_split_array(data_dir, "train")
    test_ids, test_patches = load_split_array(data_dir, "test")
    if train_patches.shape[0] == 0 or test_patches.shape[0] == 0:
        raise FodlocError(f"dataset under {data_dir} needs train and test splits")
    patch_size = PatchSpec(train_patches.shape[2], train_patches.shape[1])
    truths = load_annotations(data_dir / "annotations.csv", patch_size)
    by_id = {}
    for gt in truths:
        by_id.setdefault(gt.patch_id, []).append(gt)

    fod_patches, fod_truths, clean_patches = [], [], []
    for pid, pixels in zip(test_ids, test_patches):
        patch = ImagePatch(pixels.astype(np.float64))
        if by_id.get(pid):
            fod_patches.append(patch)
            fod_truths.append(by_id[pid])
        else:
            clean_patches.append(patch)
    if not clean_patches:  # fall back to a slice of training patches
        clean_patches = [
            ImagePatch(p.astype(np.float64)) for p in train_patches[: max(8, len(fod_patches))]
        ]

    spec_items = file_cfg.get("ablation", {}).get("specs")
    specs = []
    if spec_items:
        for item in spec_items:
            name = item.pop("name")
            section = {k: v for k, v in item.items()}
            specs.append((name, _spec_from_string("", patch_size, section)))
    else:
        specs = [(name, _spec_from_string(text, patch_size)) for name, text in DEFAULT_ABLATION]

    cfg = _train_config(file_cfg, args)
    rows = evaluation.run_ablation(
        specs, train_patches, fod_patches, fod_truths, clean_patches, cfg,
        iou_threshold=args.iou,
    )
    csv_path = out / "ablation.csv"
    evaluation.write_ablation_csv(csv_path, rows)
    _echo_config(out, {"command": "ablate", "training": cfg, "iou": args.iou,
                       "specs": [n for n, _ in specs], "data": str(data_dir)})
    print(json.dumps({
        "rows": [
            {"model": r.name, "status": r.status, "detection_rate": r.detection_rate,
             "clean_mse": r.clean_mse}
            for r in rows
        ],
        "csv": str(csv_path),
    }))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--validation-fraction", dest="validation_fraction",
                   type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fodloc",
        description="Self-supervised foreign-object-debris localization toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--config")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the reconstruction autoencoder")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory (gen-data output)")
    p.add_argument("--spec", default="", help="e.g. depth=3,vit=outer,skips=false,base=8")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-classifier", help="train the crop classifier")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory (gen-data output)")
    p.add_argument("--input-size", dest="input_size", type=int, default=64)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("localize", help="run localization over images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out")
    p.add_argument("--min-pixels", dest="min_pixels", type=int, default=0)
    p.add_argument("--ssim", action="store_true",
                   help="use the structural-dissimilarity backend")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("classify", help="classify crop images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--crops", required=True)
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=0.5,
                   help="unknown-label score threshold")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="score detections against annotations")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--iou", type=float, default=0.3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="IoU threshold vs detection-rate curve")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--thresholds", default=DEFAULT_SWEEP)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and score a set of architectures")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--iou", type=float, default=0.3)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FodlocError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
