"""Command-line surface.

Subcommands: gen-synth, train, infer, localize, evaluate, grad-check,
print-defaults. Config files are JSON; explicit flags override file
values. Exit codes: 0 success, 1 usage, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import feature_io, localization, metrics, training
from .errors import DataError, TrainingError
from .losses import LossWeights
from .prompts import load_queries

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _default_threads() -> int:
    return os.cpu_count() or 1


def _load_json_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})")


def _dataclass_from_dict(cls, raw: dict, tuple_fields: tuple[str, ...] = ()):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    coerced = dict(raw)
    for name in tuple_fields:
        if name in coerced and coerced[name] is not None:
            value = coerced[name]
            if name == "scales":
                value = tuple(tuple(int(v) for v in pair) for pair in value)
            else:
                value = tuple(value)
            coerced[name] = value
    return cls(**coerced)


def _synth_config(args) -> feature_io.SynthConfig:
    raw = _load_json_config(args.config) if args.config else {}
    cfg = _dataclass_from_dict(
        feature_io.SynthConfig,
        raw,
        tuple_fields=("t_range", "extent_range", "span_range", "nominal_frame_size"),
    )
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _train_config(args) -> training.TrainConfig:
    raw = _load_json_config(args.config) if args.config else {}
    cfg = _dataclass_from_dict(training.TrainConfig, raw)
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "adapter_layers": args.adapter_layers,
        "alpha": args.alpha,
        "beta": args.beta,
        "tau": args.tau,
        "sigma": args.sigma,
        "top_patches": args.top_patches,
        "context_len": args.context_len,
        "max_video_len": args.max_video_len,
        "score_branch": args.score_branch,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    if args.no_spatial_attention:
        cfg.use_spatial_attention = False
    # flag > config file > available cores
    if args.threads is not None:
        cfg.threads = args.threads
    elif "threads" not in raw:
        cfg.threads = _default_threads()
    return cfg


def _parse_scales(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for part in text.split(","):
        try:
            window, stride = part.strip().split("x")
            pairs.append((int(window), int(stride)))
        except ValueError:
            raise DataError(f"bad --scales entry {part!r}; expected WINDOWxSTRIDE, e.g. 32x32")
    if not pairs:
        raise DataError("--scales must list at least one WINDOWxSTRIDE pair")
    return tuple(pairs)


def _write_scores_csv(scores: dict[str, np.ndarray], path):
    lines = ["video_id,frame,score"]
    for vid in sorted(scores):
        for t, s in enumerate(scores[vid]):
            lines.append(f"{vid},{t},{float(s)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _read_scores_csv(path) -> dict[str, dict[int, float]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"scores file not found: {path}")
    out: dict[str, dict[int, float]] = {}
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "video_id,frame,score":
        raise DataError(f"{path}: expected header 'video_id,frame,score'")
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            vid, frame, score = line.split(",")
            frame_idx = int(frame)
            value = float(score)
        except ValueError:
            raise DataError(f"{path}:{ln}: malformed row {line!r}")
        per_video = out.setdefault(vid, {})
        if frame_idx in per_video:
            raise DataError(f"{path}:{ln}: duplicate score for {vid} frame {frame_idx}")
        per_video[frame_idx] = value
    return out


def _write_boxes_csv(rows: list[tuple], path):
    lines = ["video_id,frame,x,y,w,h,confidence"]
    for vid, frame, box in rows:
        lines.append(f"{vid},{frame},{box.x},{box.y},{box.w},{box.h},{box.confidence!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _read_boxes_csv(path) -> dict[str, dict[int, list]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"boxes file not found: {path}")
    out: dict[str, dict[int, list]] = {}
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "video_id,frame,x,y,w,h,confidence":
        raise DataError(f"{path}: expected header 'video_id,frame,x,y,w,h,confidence'")
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            vid, frame, x, y, w, h, conf = line.split(",")
            box = localization.Box(int(x), int(y), int(w), int(h), float(conf))
            out.setdefault(vid, {}).setdefault(int(frame), []).append(box)
        except ValueError:
            raise DataError(f"{path}:{ln}: malformed row {line!r}")
    return out


# -- subcommands -------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    cfg = _synth_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = feature_io.write_synthetic(cfg, out)
    print(f"wrote synthetic dataset under {out}")
    for key, p in paths.items():
        print(f"  {key}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    manifest = feature_io.read_manifest(args.manifest)
    samples = training.load_dataset(manifest)
    result = training.train(samples, cfg, len(manifest.class_names), manifest.class_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.stpc"
    training.save_checkpoint(result, ckpt)
    training.write_loss_log(result.log, out / "loss_log.csv")
    final = result.log[-1]
    print(f"trained {result.epochs_run} epochs on {len(samples)} videos")
    print(
        f"final losses: class={final.l_class:.5f} align={final.l_align:.5f} "
        f"const={final.l_const:.5f} total={final.total:.5f}"
    )
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    result = training.load_checkpoint(args.checkpoint)
    manifest = feature_io.read_manifest(args.manifest)
    if result.class_names and list(manifest.class_names) != result.class_names:
        raise DataError(
            f"manifest classes {manifest.class_names} do not match checkpoint classes {result.class_names}"
        )
    samples = training.load_dataset(manifest)
    branch = args.branch or result.config.score_branch
    threads = args.threads if args.threads is not None else _default_threads()
    scores = training.score_dataset(result.params, samples, result.config.tau, branch, threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scores.csv"
    _write_scores_csv(scores, path)
    print(f"scored {len(samples)} videos ({branch} branch) -> {path}")
    return EXIT_OK


def cmd_localize(args) -> int:
    manifest = feature_io.read_manifest(args.manifest)
    queries = load_queries(args.queries)
    raw = _load_json_config(args.config) if args.config else {}
    cfg = _dataclass_from_dict(localization.LocalizeConfig, raw, tuple_fields=("scales",))
    if args.scales is not None:
        cfg.scales = _parse_scales(args.scales)
    if args.fusion_weight is not None:
        cfg.fusion_weight = args.fusion_weight
    if args.tau is not None:
        cfg.tau = args.tau
    if args.threshold is not None:
        cfg.threshold = args.threshold
    if args.trigger is not None:
        cfg.trigger = args.trigger
    if args.min_area_cells is not None:
        cfg.min_area_cells = args.min_area_cells

    scores_by_video: dict[str, np.ndarray] | None = None
    if args.checkpoint:
        result = training.load_checkpoint(args.checkpoint)
        samples = training.load_dataset(manifest)
        branch = args.branch or result.config.score_branch
        threads = args.threads if args.threads is not None else _default_threads()
        scores_by_video = training.score_dataset(result.params, samples, result.config.tau, branch, threads)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heat_dir = out / "heatmaps"
    if args.save_heatmaps:
        heat_dir.mkdir(exist_ok=True)
    rows = []
    frames_localized = 0
    for entry in manifest.entries:
        stream = feature_io.read_stream(entry.stream_path, entry.video_id)
        frame_scores = scores_by_video.get(entry.video_id) if scores_by_video else None
        located = localization.localize_video(
            stream.patch_feats.astype(np.float64),
            queries,
            manifest.nominal_frame_size,
            cfg,
            frame_scores,
        )
        frames_localized += len(located)
        for frame in located:
            for box in frame.boxes:
                rows.append((entry.video_id, frame.frame, box))
            if args.save_heatmaps:
                localization.save_heatmap_png(frame.heat, heat_dir / f"{entry.video_id}_{frame.frame:05d}.png")
    path = out / "boxes.csv"
    _write_boxes_csv(rows, path)
    print(f"localized {frames_localized} frames across {len(manifest.entries)} videos -> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = feature_io.read_manifest(args.manifest)
    raw_scores = _read_scores_csv(args.scores)
    manifest_ids = {e.video_id for e in manifest.entries}
    score_ids = set(raw_scores)
    if score_ids != manifest_ids:
        missing = sorted(manifest_ids - score_ids)
        extra = sorted(score_ids - manifest_ids)
        raise DataError(f"video ids disagree with manifest: missing={missing} extra={extra}")

    scores_by_video: dict[str, np.ndarray] = {}
    flags_by_video: dict[str, np.ndarray] = {}
    gts: dict[str, feature_io.GroundTruth] = {}
    for entry in manifest.entries:
        t = feature_io.stream_header(entry.stream_path)[0]
        per_frame = raw_scores[entry.video_id]
        if sorted(per_frame) != list(range(t)):
            raise DataError(f"{entry.video_id}: scores do not cover frames 0..{t - 1}")
        scores_by_video[entry.video_id] = np.array([per_frame[i] for i in range(t)])
        if entry.gt_path is not None:
            gt = feature_io.read_ground_truth(entry.gt_path)
            if len(gt.frame_flags) != t:
                raise DataError(f"{entry.video_id}: ground truth covers {len(gt.frame_flags)} frames, stream has {t}")
            gts[entry.video_id] = gt
            flags_by_video[entry.video_id] = gt.frame_flags
        else:
            if entry.label.y_b == 1:
                raise DataError(f"{entry.video_id}: abnormal video without ground truth annotations")
            flags_by_video[entry.video_id] = np.zeros(t, dtype=np.int64)

    pred_boxes = _read_boxes_csv(args.boxes) if args.boxes else None
    if pred_boxes is not None:
        extra = sorted(set(pred_boxes) - manifest_ids)
        if extra:
            raise DataError(f"boxes reference unknown video ids: {extra}")

    report = metrics.evaluate(
        scores_by_video,
        flags_by_video,
        pred_boxes,
        gts if pred_boxes is not None else None,
        args.iou_threshold,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(report.to_json() + "\n")
    if args.roc_csv:
        points = metrics.roc_points(
            np.concatenate([scores_by_video[v] for v in sorted(scores_by_video)]),
            np.concatenate([flags_by_video[v] for v in sorted(flags_by_video)]),
        )
        lines = ["fpr,tpr"] + [f"{fpr!r},{tpr!r}" for fpr, tpr in points]
        (out / "roc.csv").write_text("\n".join(lines) + "\n")
    tiou_text = f"{report.tiou:.4f}" if report.tiou is not None else "n/a"
    print(f"frame AUC: {report.auc:.4f}")
    print(f"TIoU at {args.iou_threshold}: {tiou_text}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = training.grad_check(
        instances=args.instances, seed=args.seed if args.seed is not None else 2024,
        tolerance=args.tolerance,
    )
    for (term, tensor), err in sorted(report.worst_by_pair().items()):
        status = "ok" if err <= report.tolerance else "FAIL"
        print(f"{term:8s} {tensor:24s} max rel err {err:.3e}  {status}")
    verdict = "PASS" if report.passed else "FAIL"
    print(
        f"gradient audit {verdict}: max rel err {report.max_rel_err:.3e} "
        f"(tolerance {report.tolerance:g}, {report.seconds:.1f}s)"
    )
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_print_defaults(args) -> int:
    doc = {
        "synth": asdict(feature_io.SynthConfig()),
        "train": asdict(training.TrainConfig()),
        "localize": asdict(localization.LocalizeConfig()),
        "loss_weights": asdict(LossWeights()),
        "evaluate": {"iou_threshold": 0.5},
    }
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="stvad", description="Weakly supervised video anomaly detection and localization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic planted-anomaly dataset")
    p.add_argument("--config", help="SynthConfig JSON file")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train the detector on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--out", required=True, help="output directory (checkpoint + loss log)")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--epochs", type=int, help="training epochs (default 200)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, help="videos per optimizer step (default 64)")
    p.add_argument("--threads", type=int, help="parallel videos per batch (default: available cores)")
    p.add_argument("--adapter-layers", type=int, help="temporal adapter depth (default 1)")
    p.add_argument("--alpha", type=float, help="alignment loss weight (default 0.9)")
    p.add_argument("--beta", type=float, help="dispersion loss weight (default 2)")
    p.add_argument("--tau", type=float, help="softmax temperature (default 0.07)")
    p.add_argument("--sigma", type=float, help="distance attention scale (default 1)")
    p.add_argument("--top-patches", type=int, help="patches kept by spatial attention (default 12)")
    p.add_argument("--context-len", type=int, help="learnable prompt context rows (default 8)")
    p.add_argument("--max-video-len", type=int, help="training length cap (default 256)")
    p.add_argument("--score-branch", choices=("alignment", "classification"), help="default score source")
    p.add_argument("--no-spatial-attention", action="store_true", help="ablate the motion-attention stream")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write per-frame anomaly scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", choices=("alignment", "classification"), help="score source (default: checkpoint)")
    p.add_argument("--threads", type=int, help="parallel videos (default: available cores)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("localize", help="write heatmap-derived boxes for anomalous frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--queries", required=True, help="queries JSON manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="LocalizeConfig JSON file")
    p.add_argument("--checkpoint", help="score videos and localize only triggered frames")
    p.add_argument("--branch", choices=("alignment", "classification"))
    p.add_argument("--scales", help="window/stride pairs, e.g. '32x32,80x48' (default)")
    p.add_argument("--min-area-cells", type=float, help="box area floor in native cells (default 1)")
    p.add_argument("--fusion-weight", type=float, help="weight of the first scale (default 0.5)")
    p.add_argument("--tau", type=float, help="retrieval temperature (default 0.07)")
    p.add_argument("--threshold", type=float, help="heat binarization threshold (default 0.6)")
    p.add_argument("--trigger", type=float, help="temporal score trigger (default 0.5)")
    p.add_argument("--save-heatmaps", action="store_true", help="write 8-bit grayscale PNG heatmaps")
    p.add_argument("--threads", type=int, help="parallel videos (default: available cores)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="frame AUC and TIoU against a manifest's ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores", required=True, help="scores.csv from infer")
    p.add_argument("--boxes", help="boxes.csv from localize (enables TIoU)")
    p.add_argument("--out", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5, help="box hit threshold (default 0.5)")
    p.add_argument("--roc-csv", action="store_true", help="also write ROC curve points")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference audit of all gradients")
    p.add_argument("--instances", type=int, default=20, help="random instances (default 20)")
    p.add_argument("--seed", type=int, help="audit RNG seed (default 2024)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error allowed (default 1e-4)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("print-defaults", help="print every config default as JSON")
    p.set_defaults(func=cmd_print_defaults)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
