"""Command-line entry point wiring the pipeline stages together.

Stages compose through files only: synth -> segment -> train -> infer ->
features / eval-regression / eval-behavior / plot.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import cv2
import numpy as np

OUT_ROOT_ENV = "KPDISCOVER_OUT"


def _default_out(parser: argparse.ArgumentParser, value: str | None, leaf: str) -> str:
    if value:
        return value
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return os.path.join(root, leaf)
    parser.error(f"--out is required (or set ${OUT_ROOT_ENV})")


def _native_resolution(frames_path: str) -> int:
    sub = os.path.join(frames_path, "frames")
    directory = sub if os.path.isdir(sub) else frames_path
    if os.path.isdir(directory):
        for name in sorted(os.listdir(directory)):
            img = cv2.imread(os.path.join(directory, name))
            if img is not None:
                return img.shape[0]
        raise IOError(f"no decodable frames in {directory}")
    cap = cv2.VideoCapture(frames_path)
    if not cap.isOpened():
        raise IOError(f"no such frame source: {frames_path}")
    h = int(cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
    cap.release()
    return h


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpdiscover",
        description="Self-supervised multi-agent keypoint discovery pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-agent scene")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed", type=float, default=2.5)
    p.add_argument("--allow-overlap", action="store_true")
    p.add_argument("--out", help="output directory (frames/, masks/, keypoints.csv)")

    p = sub.add_parser("segment", help="track per-agent masks over a frame sequence")
    p.add_argument("--frames", required=True, help="frame directory or video file")
    p.add_argument("--detector", choices=["oracle", "threshold"], default="threshold")
    p.add_argument("--gt-masks", help="label-map dir for the oracle detector")
    p.add_argument("--resolution", type=int, help="processing resolution (default: native)")
    p.add_argument("--clip-size", type=int, default=3)
    p.add_argument("--support-threshold", type=float, default=0.5)
    p.add_argument("--assoc-threshold", type=float, default=0.3)
    p.add_argument("--max-misses", type=int, default=5)
    p.add_argument("--agents", type=int, help="pin the number of tracked agents")
    p.add_argument("--size", type=int, default=480, help="internal processing resolution cap")
    p.add_argument("--dino-threshold", type=float, default=0.45,
                   help="score threshold for the threshold detector")
    p.add_argument("--level", type=float, default=0.5, help="intensity split level")
    p.add_argument("--bright-agents", action="store_true",
                   help="agents brighter than background instead of darker")
    p.add_argument("--prompt", default="",
                   help="text prompt forwarded to detectors that accept one")
    p.add_argument("--out", help="output mask directory")

    p = sub.add_parser("train", help="train the keypoint discovery model")
    p.add_argument("--frames", required=True)
    p.add_argument("--masks", help="mask directory (omit with --full-frame-mask)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--tiny", action="store_true", help="desk-scale profile")
    p.add_argument("--out", help="run directory")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--resolution", type=int)
    p.add_argument("--frame-gap", type=int, dest="frame_gap")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--agents", type=int, dest="num_agents")
    p.add_argument("--keypoints", type=int, dest="num_keypoints")
    p.add_argument("--epochs", type=int)
    p.add_argument("--w-r", type=float, dest="w_r")
    p.add_argument("--w-s", type=float, dest="w_s")
    p.add_argument("--curriculum-epoch", type=int, dest="curriculum_epoch")
    p.add_argument("--sigma-s", type=float, dest="sigma_s")
    p.add_argument("--target", dest="target_kind",
                   choices=["ssim_dissimilarity", "absolute", "raw"])
    p.add_argument("--seed", type=int)
    p.add_argument("--gaussian-sigma", type=float, dest="gaussian_sigma")
    p.add_argument("--encoder", choices=["resnet50", "tiny"])
    p.add_argument("--pair-stride", type=int, dest="pair_stride")
    p.add_argument("--full-frame-mask", action="store_const", const=True,
                   default=None, dest="full_frame_mask",
                   help="single-agent baseline mode: one all-ones mask")
    p.add_argument("--mask-appearance", action="store_const", const=True,
                   default=None, dest="mask_appearance")
    p.add_argument("--early-stop", action="store_const", const=True,
                   default=None, dest="early_stop")

    p = sub.add_parser("infer", help="extract keypoints with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--masks")
    p.add_argument("--coord-resolution", type=int,
                   help="pixel space for CSV coordinates (default: model resolution)")
    p.add_argument("--out", help="output CSV path")

    p = sub.add_parser("features", help="trajectory features from a keypoint CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--image-size", type=float, required=True,
                   help="pixel size that normalizes coordinates")
    p.add_argument("--fps-gap", type=int, default=1)
    p.add_argument("--out", help="output feature CSV")

    p = sub.add_parser("eval-regression",
                       help="linear keypoint regression against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--image-size", type=float, required=True)
    p.add_argument("--features", choices=["all", "pose"], default="all")
    p.add_argument("--out", help="also write the JSON here")

    p = sub.add_parser("eval-behavior",
                       help="train/evaluate the behavior classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--window", type=int, default=31)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (JSON, PR CSVs, figure)")

    p = sub.add_parser("plot", help="render run figures")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--frames", help="frame source for keypoint overlays")
    p.add_argument("--pred", help="inference CSV for keypoint overlays")
    p.add_argument("--max-frames", type=int, default=4)
    p.add_argument("--out", help="output directory (default: run dir)")

    return parser


# ---------------------------------------------------------------------------


def cmd_synth(parser, args) -> int:
    from .video_io import SceneConfig, render_scene, write_scene

    out = _default_out(parser, args.out, "synth")
    scene = render_scene(
        SceneConfig(
            num_agents=args.agents,
            num_frames=args.frames,
            resolution=args.resolution,
            seed=args.seed,
            speed=args.speed,
            allow_overlap=args.allow_overlap,
        )
    )
    write_scene(scene, out)
    print(f"wrote {args.frames} frames, masks, keypoints.csv to {out}")
    return 0


def cmd_segment(parser, args) -> int:
    from .segmentation import (
        OracleDetector, SegmentationParams, ThresholdDetector,
        segment_video, write_masks,
    )
    from .video_io import load_sequence

    out = _default_out(parser, args.out, "masks")
    resolution = args.resolution or _native_resolution(args.frames)
    frames = load_sequence(args.frames, resolution)

    if args.detector == "oracle":
        gt = args.gt_masks
        if not gt:
            candidate = os.path.join(args.frames, "masks")
            if os.path.isdir(candidate):
                gt = candidate
            else:
                parser.error("oracle detector needs --gt-masks")
        detector = OracleDetector(gt)
    else:
        detector = ThresholdDetector(
            level=args.level,
            dark_agents=not args.bright_agents,
            threshold=args.dino_threshold,
        )

    params = SegmentationParams(
        support_threshold=args.support_threshold,
        assoc_threshold=args.assoc_threshold,
        max_misses=args.max_misses,
        fixed_agents=args.agents,
        size=args.size,
    )
    mask_sets = segment_video(frames, detector, clip_size=args.clip_size, params=params)
    write_masks(mask_sets, out)
    n_agents = {len(ms.segments) for ms in mask_sets}
    print(f"wrote masks for {len(mask_sets)} frames to {out} "
          f"(agents per frame: {sorted(n_agents)})")
    return 0


def cmd_train(parser, args) -> int:
    from .training import TrainConfig, load_config, train

    out = _default_out(parser, args.out, "run")
    overrides = {
        key: getattr(args, key)
        for key in (
            "batch_size", "resolution", "frame_gap", "learning_rate",
            "num_agents", "num_keypoints", "epochs", "w_r", "w_s",
            "curriculum_epoch", "sigma_s", "target_kind", "seed",
            "gaussian_sigma", "encoder", "pair_stride", "full_frame_mask",
            "mask_appearance", "early_stop",
        )
        if getattr(args, key) is not None
    }
    if args.tiny:
        base = TrainConfig.tiny()
        if args.config:
            from .training import parse_config_file

            file_values = parse_config_file(args.config)
            base = TrainConfig(**{**base.__dict__, **file_values, **overrides})
        else:
            base = TrainConfig(**{**base.__dict__, **overrides})
        config = base
    else:
        config = load_config(args.config, **overrides)

    masks = args.masks
    if masks is None and not config.full_frame_mask:
        parser.error("--masks is required unless --full-frame-mask is set")

    ckpt = train(config, args.frames, masks, out)
    print(f"trained {ckpt.epoch} epochs; final checkpoint {ckpt.path}")
    return 0


def cmd_infer(parser, args) -> int:
    from .training import infer, load_checkpoint, write_inference_csv

    out = _default_out(parser, args.out, "pred.csv")
    ckpt = load_checkpoint(args.checkpoint)
    if args.masks is None and not ckpt.config.full_frame_mask:
        parser.error("--masks is required unless the checkpoint is full-frame")
    results = infer(ckpt, args.frames, args.masks if args.masks else [])
    coord_res = args.coord_resolution or ckpt.config.resolution
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_inference_csv(results, out, coord_res)
    print(f"wrote keypoints for {len(results)} frames to {out}")
    return 0


def cmd_features(parser, args) -> int:
    from .features import feature_table, trajectory_features
    from .training import read_inference_csv

    out = _default_out(parser, args.out, "features.csv")
    preds = read_inference_csv(args.pred)
    if not preds:
        raise ValueError(f"no predictions in {args.pred}")

    id_sets = {}
    for t, agents in preds.items():
        id_sets.setdefault(tuple(sorted(agents)), []).append(t)
    ids, frames = max(id_sets.items(), key=lambda kv: len(kv[1]))
    frames = sorted(frames)

    pts, conf, cov = [], [], []
    for t in frames:
        pts.append([preds[t][a]["xy"] for a in ids])
        conf.append([preds[t][a]["confidence"] for a in ids])
        cov.append(
            [
                [[[xx, xy], [xy, yy]] for xx, xy, yy in preds[t][a]["cov"]]
                for a in ids
            ]
        )
    pts = np.asarray(pts, dtype=np.float64) / args.image_size
    traj = trajectory_features(pts, fps_gap=args.fps_gap)
    table, names = feature_table(
        traj, confidence=np.asarray(conf), covariance=np.asarray(cov)
    )

    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    tmp = out + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write("frame," + ",".join(names) + "\n")
        for i, t in enumerate(frames):
            fh.write(f"{t}," + ",".join(f"{v:.8g}" for v in table[i]) + "\n")
    os.replace(tmp, out)
    print(f"wrote {table.shape[1]} features for {len(frames)} frames to {out}")
    return 0


def _load_feature_csv(path: str):
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    frames = np.array([int(r[0]) for r in rows])
    values = np.array([[float(v) for v in r[1:]] for r in rows])
    return frames, values, header[1:]


def _regression_matrices(pred_csv, gt_csv, image_size, use_all):
    from .training import read_inference_csv
    from .video_io import read_keypoint_csv

    preds = read_inference_csv(pred_csv)
    gt = read_keypoint_csv(gt_csv)
    frames = sorted(set(preds) & set(gt))
    if not frames:
        raise ValueError("prediction and ground-truth CSVs share no frames")
    ids = sorted(preds[frames[0]])

    x_rows, y_rows = [], []
    for t in frames:
        if sorted(preds[t]) != ids:
            continue
        feats = []
        for a in ids:
            entry = preds[t][a]
            xy = np.asarray(entry["xy"], dtype=np.float64) / image_size
            feats.extend(xy.ravel())
            if use_all:
                feats.extend(entry["confidence"])
                feats.extend(np.asarray(entry["cov"]).ravel())
        x_rows.append(feats)
        y_rows.append(np.asarray(gt[t], dtype=np.float64).ravel())
    return np.asarray(x_rows), np.asarray(y_rows), len(x_rows)


def cmd_eval_regression(parser, args) -> int:
    from .evaluation import fit_keypoint_regression

    x, y_px, n = _regression_matrices(
        args.pred, args.gt, args.image_size, args.features == "all"
    )
    result = fit_keypoint_regression(x, y_px, args.image_size)
    payload = {
        "pct_mse": result.pct_mse,
        "n_frames": n,
        "features_used": "keypoints+confidence+covariance"
        if args.features == "all" else "keypoints",
        "rank_deficient": result.rank_deficient,
    }
    text = json.dumps(payload, indent=1)
    print(text)
    if args.out:
        tmp = args.out + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(text + "\n")
        os.replace(tmp, args.out)
    return 0


def cmd_eval_behavior(parser, args) -> int:
    from .evaluation import (
        BehaviorDataset, mean_average_precision,
        precision_recall_curve, train_behavior_classifier,
    )
    from .plots import plot_pr_curves

    out = _default_out(parser, args.out, "behavior")
    frames, values, _ = _load_feature_csv(args.features)

    labels_by_frame = {}
    with open(args.labels, newline="") as fh:
        import csv as _csv

        for row in _csv.DictReader(fh):
            labels_by_frame[int(row["frame"])] = row["label"]
    keep = [i for i, t in enumerate(frames) if t in labels_by_frame]
    if not keep:
        raise ValueError("feature and label CSVs share no frames")
    values = values[keep]
    raw_labels = [labels_by_frame[frames[i]] for i in keep]
    names = sorted(set(raw_labels))
    labels = np.array([names.index(l) for l in raw_labels])

    n_train = max(1, int(len(labels) * args.train_frac))
    clf = train_behavior_classifier(
        BehaviorDataset(values[:n_train], labels[:n_train]),
        window=args.window, epochs=args.epochs, seed=args.seed,
    )
    scores = clf.scores(values[n_train:])
    result = mean_average_precision(scores, labels[n_train:])

    os.makedirs(out, exist_ok=True)
    curves = {}
    for c, ap in result.per_class_ap.items():
        precision, recall, thresholds = precision_recall_curve(
            scores[:, c], labels[n_train:] == c
        )
        curves[names[c]] = (precision, recall)
        with open(os.path.join(out, f"pr_{names[c]}.csv"), "w", newline="") as fh:
            fh.write("threshold,precision,recall\n")
            for thr, p_, r_ in zip(thresholds, precision, recall):
                fh.write(f"{thr:.8g},{p_:.8g},{r_:.8g}\n")
    plot_pr_curves(curves, os.path.join(out, "pr_curves.png"))

    payload = {
        "map": result.map,
        "per_class_ap": {names[c]: ap for c, ap in result.per_class_ap.items()},
        "excluded_classes": [names[c] for c in result.excluded_classes],
        "n_train": int(n_train),
        "n_test": int(len(labels) - n_train),
    }
    text = json.dumps(payload, indent=1)
    print(text)
    with open(os.path.join(out, "behavior.json"), "w") as fh:
        fh.write(text + "\n")
    return 0


def cmd_plot(parser, args) -> int:
    from .plots import plot_losses, plot_overlays
    from .training import load_checkpoint

    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    losses_png = plot_losses(args.run, os.path.join(out_dir, "losses.png"))
    print(f"wrote {losses_png}")

    if args.frames and args.pred:
        snapshots = [f for f in os.listdir(args.run) if f.endswith(".ckpt")]
        resolution = None
        if snapshots:
            ckpt = load_checkpoint(os.path.join(args.run, sorted(snapshots)[-1]))
            resolution = ckpt.config.resolution
        resolution = resolution or _native_resolution(args.frames)
        overlays = plot_overlays(
            args.frames, args.pred, out_dir, resolution, args.max_frames
        )
        for path, dots in overlays:
            print(f"wrote {path} ({dots} keypoints)")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "train": cmd_train,
    "infer": cmd_infer,
    "features": cmd_features,
    "eval-regression": cmd_eval_regression,
    "eval-behavior": cmd_eval_behavior,
    "plot": cmd_plot,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](parser, args)
    except (ValueError, IOError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
