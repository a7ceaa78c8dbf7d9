"""Command-line front-end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run logs its fully resolved configuration; outputs carry no timestamps,
so a rerun with identical flags and inputs is byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import MixPolicy, augment_dataset
from .camera import backproject_array, deformation_ratio, export_ply, masked_pixel_indices
from .dataset_io import Manifest, RgbdSample, load_sample, write_sample
from .errors import (
    ArgumentError,
    DataError,
    EmptyEvaluationError,
    FocalDepthError,
    NumericalFailure,
)
from .focal_net import (
    FocalEncodingMatrix,
    LossConfig,
    ToyDepthModel,
    TrainerConfig,
    gradcheck,
    make_focal_pyramid,
    sample_rgb01,
    train,
)
from .metrics import MetricsReport, aggregate, evaluate
from .numerics import Plane2D
from .synthetic import render_plane_scene, sample_set, scene_camera, write_sample_set

log = logging.getLogger("focaldepth")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SCHEMA_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; remap to our contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_pair(text: str, name: str) -> tuple:
    parts = text.split(":")
    if len(parts) != 2:
        raise ArgumentError(f"{name} must look like A:B, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ArgumentError(f"{name} must be numeric, got {text!r}") from exc


def _report_fields(report: MetricsReport) -> dict:
    return report.to_json_dict()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_augment(args) -> int:
    manifest = Manifest.load(args.manifest)
    fc, dr = _parse_pair(args.ratio, "--ratio")
    total = fc + dr
    if total <= 0:
        raise ArgumentError("--ratio fractions must not both be zero")
    policy = MixPolicy(fc / total, dr / total, seed=args.seed)
    outcome = augment_dataset(
        manifest, policy, (args.k_min, args.k_max), args.out, jobs=args.jobs
    )
    print(f"augmented {len(outcome.manifest)} of {len(manifest)} samples -> {outcome.manifest_path}")
    if outcome.failures:
        for source_id, message in outcome.failures:
            print(f"  FAILED {source_id}: {message}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _map_ordered(fn, items, jobs: int):
    """Apply fn across items, optionally in a thread pool, preserving order."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def cmd_eval(args) -> int:
    pred_manifest = Manifest.load(args.pred_manifest)
    gt_manifest = Manifest.load(args.gt_manifest)
    cap = _parse_pair(args.cap, "--cap")
    pred_by_id = {r.source_id: r for r in pred_manifest}
    missing = [r.source_id for r in gt_manifest if r.source_id not in pred_by_id]
    if missing:
        raise DataError(f"prediction manifest lacks ids: {missing[:5]}" +
                        (" ..." if len(missing) > 5 else ""))

    def eval_one(gt_rec):
        pred = load_sample(pred_by_id[gt_rec.source_id], pred_manifest.base_dir)
        gt = load_sample(gt_rec, gt_manifest.base_dir)
        return evaluate(pred.depth, gt.depth, gt.valid_mask, cap)

    per_image_reports = _map_ordered(eval_one, gt_manifest.records, args.jobs)
    ids = [r.source_id for r in gt_manifest]
    overall = aggregate(per_image_reports, per_image=args.per_image)

    doc = {
        "schema_version": SCHEMA_VERSION,
        "aggregation": "per_image" if args.per_image else "pooled",
        "cap": [cap[0], cap[1]],
        "per_image": [
            {"source_id": sid, **_report_fields(r)} for sid, r in zip(ids, per_image_reports)
        ],
        "overall": _report_fields(overall),
    }
    text = json.dumps(doc, indent=2)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n", encoding="utf-8")
    if args.csv_out:
        rows = ["source_id," + MetricsReport.csv_header()]
        rows += [f"{sid},{r.to_csv_row()}" for sid, r in zip(ids, per_image_reports)]
        rows.append(f"OVERALL,{overall.to_csv_row()}")
        Path(args.csv_out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    manifest = Manifest.load(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def reconstruct_one(record):
        sample = load_sample(record, manifest.base_dir)
        stored_cam = sample.intrinsics
        used_cam = stored_cam
        if args.override_fx is not None:
            used_cam = type(stored_cam)(
                args.override_fx, args.override_fx, stored_cam.cx, stored_cam.cy
            )
        cloud = backproject_array(sample.depth, sample.valid_mask, used_cam)
        vs, us = masked_pixel_indices(sample.valid_mask)
        colors = sample.rgb[vs, us]
        path = export_ply(cloud, colors, out_dir / f"{record.source_id}.ply")
        if cloud.shape[0] == 0:
            log.warning("%s has no valid pixels", record.source_id)
            return f"{record.source_id}: empty mask, wrote empty cloud -> {path}"
        reference = backproject_array(sample.depth, sample.valid_mask, stored_cam)
        ratio = deformation_ratio(reference, cloud)
        return (f"{record.source_id}: {cloud.shape[0]} vertices, "
                f"deformation_ratio={ratio:.4f} -> {path}")

    for line in _map_ordered(reconstruct_one, manifest.records, args.jobs):
        print(line)
    return EXIT_OK


def _eval_model(model: ToyDepthModel, manifest: Manifest, cap) -> tuple:
    reports = []
    ids = []
    for record in manifest:
        sample = load_sample(record, manifest.base_dir)
        pred = model.predict_sample(sample)
        reports.append(evaluate(pred, sample.depth, sample.valid_mask, cap))
        ids.append(record.source_id)
    return ids, reports, aggregate(reports)


def cmd_toy_train(args) -> int:
    manifest = Manifest.load(args.manifest)
    samples = [load_sample(r, manifest.base_dir) for r in manifest]
    cfg = TrainerConfig(
        base_lr=args.base_lr,
        backbone_lr_ratio=args.backbone_ratio,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    model = ToyDepthModel(
        seed=args.seed,
        ablate_focal=args.ablate_focal,
        focal_normalizer=args.focal_normalizer,
        encoding_init=args.encoding_init,
    )
    result = train(samples, cfg, LossConfig(), model=model)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ckpt = result.model.save_checkpoint(out_dir / "checkpoint.json")
    losses_path = out_dir / "losses.csv"
    losses_path.write_text(
        "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.losses)),
        encoding="utf-8",
    )

    eval_manifest = Manifest.load(args.eval_manifest) if args.eval_manifest else manifest
    cap = _parse_pair(args.cap, "--cap")
    ids, reports, overall = _eval_model(result.model, eval_manifest, cap)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "mode": "ablate_focal" if args.ablate_focal else "with_focal",
        "aggregation": "pooled",
        "cap": [cap[0], cap[1]],
        "final_loss": result.losses[-1] if result.losses else None,
        "per_image": [{"source_id": s, **_report_fields(r)} for s, r in zip(ids, reports)],
        "overall": _report_fields(overall),
    }
    (out_dir / "eval.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    if args.dump_preds:
        preds_dir = out_dir / "preds"
        records = []
        for record in eval_manifest:
            sample = load_sample(record, eval_manifest.base_dir)
            pred_sample = RgbdSample(
                rgb=sample.rgb,
                depth=masked_prediction(result.model, sample),
                valid_mask=sample.valid_mask,
                intrinsics=sample.intrinsics,
                source_id=sample.source_id,
                tag=sample.tag,
            )
            records.append(write_sample(pred_sample, preds_dir, depth_scale=record.depth_scale))
        Manifest(records, preds_dir).save(preds_dir / "manifest.jsonl")

    print(f"trained {cfg.epochs} epochs over {len(samples)} samples")
    print(f"checkpoint: {ckpt}")
    print(f"loss curve: {losses_path}")
    print(f"eval rmse: {overall.rmse:.4f} (delta1={overall.delta1:.3f})")
    return EXIT_OK


def masked_prediction(model: ToyDepthModel, sample) -> Plane2D:
    """Model prediction with invalid input pixels zeroed for PNG storage."""
    pred = model.predict_sample(sample)
    return Plane2D(np.where(sample.valid_mask.data == 1, pred.data, 0.0))


def cmd_gradcheck(args) -> int:
    cam = scene_camera(40.0, 24, 32)
    scene = render_plane_scene(cam, 24, 32, wall_depth=3.0, source_id="gradcheck")
    model = ToyDepthModel(seed=args.seed, n_bins=16)
    report = gradcheck(
        model, sample_rgb01(scene), cam.fx, scene.depth, scene.valid_mask
    )
    worst = max(report.values())
    for name in sorted(report):
        print(f"{name}: max_rel_err={report[name]:.3e}")
    ok = worst < args.tolerance
    print(f"gradcheck {'PASS' if ok else 'FAIL'} (worst {worst:.3e}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    samples = sample_set(
        args.count, args.focal, args.height, args.width, args.seed,
        depth_range=(args.depth_min, args.depth_max),
    )
    manifest = write_sample_set(samples, args.out_dir)
    print(f"wrote {len(manifest)} scenes -> {manifest.base_dir / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_focal_pyramid(args) -> int:
    if args.checkpoint:
        matrix = ToyDepthModel.load_checkpoint(args.checkpoint).matrix
    else:
        matrix = FocalEncodingMatrix.create(args.seed)
    pyramid = make_focal_pyramid(args.f, matrix, (args.height, args.width))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "f": args.f,
        "base_resolution": [args.height, args.width],
        "levels": [
            {
                "height": stack.height,
                "width": stack.width,
                "data": stack.planes[0].data.reshape(-1).tolist(),
            }
            for stack in pyramid.levels
        ],
    }
    text = json.dumps(doc)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="focaldepth", description=__doc__)
    parser.add_argument("--version", action="version", version=f"focaldepth {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--jobs", type=int, default=1,
                        help="workers for the embarrassingly parallel stages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", parents=[], help="focal-diversity augmentation of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", default="0.6:0.4", help="focal-change : depth-rescale mix")
    p.add_argument("--k-min", type=float, default=0.7)
    p.add_argument("--k-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_augment)

    p = sub.add_parser("eval", help="compare a prediction manifest against ground truth")
    p.add_argument("--pred-manifest", required=True)
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--cap", default="0.001:10")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--per-image", action="store_true")
    group.add_argument("--pooled", dest="per_image", action="store_false")
    p.add_argument("--json-out")
    p.add_argument("--csv-out")
    p.set_defaults(handler=cmd_eval, per_image=False)

    p = sub.add_parser("reconstruct", help="export point clouds from depth maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--override-fx", type=float, default=None,
                   help="reconstruct with this focal length instead of the stored one")
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("toy-train", help="train the toy focal-conditioned model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default="toy_train_out")
    p.add_argument("--eval-manifest", default=None)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--base-lr", type=float, default=1.6e-4)
    p.add_argument("--backbone-ratio", type=float, default=0.02)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--focal-normalizer", type=float, default=None,
                   help="divide the focal input by this before encoding")
    p.add_argument("--encoding-init", choices=["small", "unit"], default="small")
    p.add_argument("--cap", default="0.001:10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-preds", action="store_true",
                   help="also write predicted depth maps as a manifest")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--ablate-focal", action="store_true",
                       help="freeze the focal encoding at zero (focal-blind baseline)")
    group.add_argument("--with-focal", dest="ablate_focal", action="store_false")
    p.set_defaults(handler=cmd_toy_train, ablate_focal=False)

    p = sub.add_parser("gradcheck", help="verify tape gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic textured-planes dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--focal", type=float, default=40.0)
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--depth-min", type=float, default=1.8)
    p.add_argument("--depth-max", type=float, default=4.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("focal-pyramid", help="dump multi-scale focal features as JSON")
    p.add_argument("--f", type=float, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--checkpoint", default=None,
                   help="read the encoding matrix from a model checkpoint")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for a fresh encoding matrix when no checkpoint is given")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_focal_pyramid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    log.info("resolved configuration: %s", config)
    try:
        return args.handler(args)
    except ArgumentError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptyEvaluationError, OSError) as exc:
        log.error("%s", exc)
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FocalDepthError) as exc:
        log.error("%s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
