"""Command-line interface tying the modules into runnable experiments.

Every subcommand takes --config (a JSON experiment file), honors
ACTIONDET_* environment overrides, and writes the resolved configuration
next to its outputs. Machine-readable reports are JSON; a short summary
goes to standard output. Exit codes: 0 success, 1 configuration or runtime
failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, apply_env_overrides
from .data import extract_clip, parse_ava_csv
from .evaluate import (filter_detections, frame_map, predict,
                       read_predictions_csv, topk_error, tta_predict,
                       write_predictions_csv)
from .featurebank import load_bank, save_bank
from .synthetic import generate_synthetic_dataset, load_dataset, save_dataset
from .train import (extract_bank, load_stage1_model, load_stage2_model,
                    train_stage1, train_stage2)


def _add_common(sp):
    sp.add_argument("--config", required=True,
                    help="experiment configuration JSON")
    sp.add_argument("--seed", type=int, default=None,
                    help="override the configured seed")
    sp.add_argument("--deterministic", action="store_true",
                    help="force float64 and fully serialized execution")
    sp.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="actiondet",
        description="three-branch spatio-temporal action detection")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate the synthetic corpus")
    _add_common(sp)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train-stage1", help="train the short-term extractor")
    _add_common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("extract-bank",
                        help="build the long-term feature bank")
    _add_common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    sp.set_defaults(func=cmd_extract_bank)

    sp = sub.add_parser("train-stage2", help="train the three-branch model")
    _add_common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    sp.add_argument("--bank", required=True, help="feature bank file")
    sp.add_argument("--resume", default=None)
    sp.set_defaults(func=cmd_train_stage2)

    sp = sub.add_parser("predict", help="write predictions for a split")
    _add_common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval-ava", help="frame-level mAP of a prediction file")
    _add_common(sp)
    sp.add_argument("--pred", required=True, help="predictions CSV")
    sp.add_argument("--gt", required=True, help="ground-truth annotations CSV")
    sp.add_argument("--data", default=None,
                    help="dataset directory, for class names")
    sp.set_defaults(func=cmd_eval_ava)

    sp = sub.add_parser("eval-cls",
                        help="pose-classification top-k error on a split")
    _add_common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--bank", default=None)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval_cls)
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    cfg = apply_env_overrides(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
        cfg.dtype = "float64"
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ds = generate_synthetic_dataset(cfg.seed, cfg.synthetic)
    save_dataset(ds, out)
    cfg.save(out / "resolved_config.json")
    n_train = len(ds.splits["train"])
    n_test = len(ds.splits["test"])
    labeled = len(ds.labeled_samples("train")) + len(ds.labeled_samples("test"))
    print(f"wrote {len(ds.video_ids)} videos to {out} "
          f"({n_train} train / {n_test} test, {labeled} labeled key frames)")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    ckpt = out / "stage1.ckpt"
    result = train_stage1(dataset, cfg, ckpt, resume_from=args.resume,
                          progress=print)
    (out / "stage1.log").write_text("\n".join(result.log_lines) + "\n")
    cfg.save(out / "resolved_config.json")
    print(f"stage-1 done: {result.iterations} iterations, "
          f"final loss {result.final_loss:.6f}, checkpoint {ckpt}")
    return 0


def cmd_extract_bank(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    bank = extract_bank(dataset, args.ckpt, cfg)
    path = out / "bank.lfb"
    save_bank(bank, path)
    cfg.save(out / "resolved_config.json")
    n_entries = sum(len(v) for v in bank.entries.values())
    print(f"bank written to {path}: {len(bank.videos)} videos, "
          f"{n_entries} person features, dim {bank.dim}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    bank = load_bank(args.bank)
    ckpt = out / "stage2.ckpt"
    result = train_stage2(dataset, bank, args.ckpt, cfg, ckpt,
                          resume_from=args.resume, progress=print)
    (out / "stage2.log").write_text("\n".join(result.log_lines) + "\n")
    cfg.save(out / "resolved_config.json")
    print(f"stage-2 done: {result.iterations} iterations, "
          f"final loss {result.final_loss:.6f}, checkpoint {ckpt}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    bank = load_bank(args.bank)
    model = load_stage2_model(args.ckpt, cfg, dataset.vocab, bank.dim)
    records = predict(model, dataset, cfg, bank, split=args.split)
    path = out / "predictions.csv"
    write_predictions_csv(records, path)
    cfg.save(out / "resolved_config.json")
    print(f"wrote {len(records)} prediction records to {path}")
    return 0


def cmd_eval_ava(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    gt = [d for d in parse_ava_csv(args.gt) if d.labels]
    vocab = None
    if args.data is not None:
        vocab = load_dataset(args.data).vocab
        num_classes = vocab.num_classes
    else:
        max_gt = max((c for d in gt for c in d.labels), default=-1)
        max_pred = _max_pred_class(args.pred)
        num_classes = max(max_gt, max_pred) + 1
    preds = read_predictions_csv(args.pred, num_classes)
    report = frame_map(preds, gt, cfg.eval.iou_threshold, vocab)
    report.save(out / "eval_ava.json")
    cfg.save(out / "resolved_config.json")
    for c in sorted(report.per_class_ap):
        name = report.class_names.get(c, str(c))
        print(f"class {c} {name}: AP {report.per_class_ap[c]:.4f} "
              f"(support {report.support[c]})")
    print(f"mAP {report.mean_ap:.4f} over {len(report.per_class_ap)} classes")
    return 0


def _max_pred_class(path) -> int:
    worst = -1
    with open(path) as f:
        for raw in f:
            raw = raw.strip()
            if raw:
                worst = max(worst, int(raw.split(",")[6]))
    return worst


def cmd_eval_cls(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    vocab = dataset.vocab
    _, _, manifest = load_checkpoint(args.ckpt)
    stage = manifest["meta"].get("stage", "stage1")
    bank = None
    if stage == "stage2":
        if args.bank is None:
            raise ValueError("--bank is required for a stage-2 checkpoint")
        bank = load_bank(args.bank)
        model = load_stage2_model(args.ckpt, cfg, vocab, bank.dim)
    else:
        model = load_stage1_model(args.ckpt, cfg, vocab)

    rows, truths = [], []
    pose_cols = vocab.pose_list
    for vid, sec in dataset.labeled_samples(args.split):
        dets = filter_detections(dataset.detections_at(vid, sec),
                                 cfg.eval.det_threshold)
        dets = [d for d in dets if d.labels]
        if not dets:
            continue
        clip = extract_clip(dataset.video(vid), sec, cfg.data.clip_seconds,
                            cfg.data.n_frames)
        window = (bank.window(vid, sec, cfg.bank.window_radius)
                  if bank is not None else None)
        records = tta_predict(model, clip, dets, cfg.data, cfg.eval, vocab,
                              window)
        for det, rec in zip(dets, records):
            pose_label = sorted(det.labels & vocab.pose_ids)[0]
            truths.append(vocab.pose_index(pose_label))
            rows.append(rec.scores[pose_cols])
    if not rows:
        raise ValueError(f"split {args.split!r} has no labeled persons")
    report = topk_error(np.stack(rows), truths)
    report.save(out / "eval_cls.json")
    cfg.save(out / "resolved_config.json")
    print(f"top-1 error {report.top1_error:.4f}, "
          f"top-5 error {report.top5_error:.4f}, "
          f"average {report.avg_error:.4f} over {report.num_samples} persons")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OSError, KeyError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
