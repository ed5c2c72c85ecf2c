"""Inference pipeline and metrics.

Prediction runs multi-scale plus horizontal-flip test-time augmentation and
averages the per-augmentation score vectors. Frame-level mAP follows the
AVA protocol: per class, predictions sorted by descending score greedily
match unmatched ground-truth boxes at the same (video, second) with IoU at
or above the threshold, and AP is the area under the all-point interpolated
precision-recall curve. Precision and recall are accumulated as exact
rational numbers so results are reproducible to the bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .config import DataConfig, EvalConfig
from .data import (ActionVocabulary, Detection, extract_clip, flip_box,
                   normalize_pixels, resize_short_side, sample_pathways)
from .model import ClipInputs, batch_pathways

Box = tuple[float, float, float, float]


@dataclass
class PredictionRecord:
    """One scored person box: per-class scores in vocabulary id order."""

    video_id: str
    second: int
    box: Box
    scores: np.ndarray
    person_id: int = -1

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise ValueError("scores must lie in [0, 1]")


@dataclass
class EvalReport:
    mode: str
    mean_ap: float | None = None
    per_class_ap: dict[int, float] = field(default_factory=dict)
    support: dict[int, int] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)
    top1_error: float | None = None
    top5_error: float | None = None
    avg_error: float | None = None
    num_samples: int = 0

    def to_dict(self) -> dict:
        if self.mode == "ava":
            return {
                "mode": self.mode,
                "mean_ap": self.mean_ap,
                "num_predictions": self.num_samples,
                "per_class": {
                    str(c): {
                        "ap": self.per_class_ap[c],
                        "support": self.support.get(c, 0),
                        "name": self.class_names.get(c, str(c)),
                    }
                    for c in sorted(self.per_class_ap)
                },
            }
        return {
            "mode": self.mode,
            "top1_error": self.top1_error,
            "top5_error": self.top5_error,
            "avg_error": self.avg_error,
            "num_samples": self.num_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")


def iou(box_a: Box, box_b: Box) -> float:
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def filter_detections(dets: list[Detection], threshold: float = 0.8
                      ) -> list[Detection]:
    """Keep detections scoring strictly more than the threshold."""
    return [d for d in dets if d.score > threshold]


def _forward_scores(model, inputs: ClipInputs, window,
                    vocab: ActionVocabulary) -> np.ndarray:
    """One forward pass; returns [n_boxes, num_classes] probabilities."""
    dtype = next(model.parameters()).dtype
    slow, fast = batch_pathways([inputs], dtype)
    boxes = [inputs.boxes]
    if hasattr(model, "head_from_features"):
        maps = model.backbone(slow, fast)
        person_vecs, sizes = model.person_vectors(maps, boxes)
        pooled = model.pooled_globals(maps)
        pose, other, _ = model.head_from_features(
            person_vecs, sizes, pooled, [window])
    else:
        pose, other, _ = model(slow, fast, boxes)
    pose_p = torch.softmax(pose, dim=-1)
    other_p = torch.sigmoid(other)
    n = pose.shape[0]
    scores = np.zeros((n, vocab.num_classes), dtype=np.float64)
    for j, c in enumerate(vocab.pose_list):
        scores[:, c] = pose_p[:, j].detach().cpu().numpy()
    for j, c in enumerate(vocab.non_pose_list):
        scores[:, c] = other_p[:, j].detach().cpu().numpy()
    return scores


@torch.no_grad()
def tta_predict(model, clip: np.ndarray, detections: list[Detection],
                data_cfg: DataConfig, eval_cfg: EvalConfig,
                vocab: ActionVocabulary, window=None
                ) -> list[PredictionRecord]:
    """Mean of per-augmentation score vectors over scales and flips.

    ``clip`` holds raw [T, H, W, 3] pixels in [0, 1]; detections keep their
    original boxes in the returned records regardless of flipping.
    """
    model.eval()
    if not detections:
        return []
    flips = (False, True) if eval_cfg.tta_flip else (False,)
    total = None
    count = 0
    for scale in eval_cfg.tta_scales:
        for flip in flips:
            frames = clip
            boxes = [d.box for d in detections]
            if flip:
                frames = frames[:, :, ::-1, :]
                boxes = [flip_box(b) for b in boxes]
            frames = resize_short_side(
                np.ascontiguousarray(frames, dtype=np.float32), scale)
            frames = normalize_pixels(frames, data_cfg.pixel_mean,
                                      data_cfg.pixel_std)
            slow, fast = sample_pathways(frames, data_cfg.t_slow,
                                         data_cfg.t_fast)
            dets = [Detection(video_id=d.video_id, second=d.second, box=b,
                              score=d.score, labels=d.labels,
                              person_id=d.person_id)
                    for d, b in zip(detections, boxes)]
            inputs = ClipInputs(slow=slow, fast=fast, detections=dets)
            scores = _forward_scores(model, inputs, window, vocab)
            total = scores if total is None else total + scores
            count += 1
    mean = total / count
    return [PredictionRecord(video_id=d.video_id, second=d.second, box=d.box,
                             scores=np.clip(mean[i], 0.0, 1.0),
                             person_id=-1 if d.person_id is None
                             else d.person_id)
            for i, d in enumerate(detections)]


def predict(model, dataset, cfg, bank=None, split: str = "test",
            progress=None) -> list[PredictionRecord]:
    """Run TTA prediction over every labeled key frame of a split."""
    records = []
    for vid, sec in dataset.labeled_samples(split):
        dets = filter_detections(dataset.detections_at(vid, sec),
                                 cfg.eval.det_threshold)
        if not dets:
            continue
        video = dataset.video(vid)
        clip = extract_clip(video, sec, cfg.data.clip_seconds,
                            cfg.data.n_frames)
        window = (bank.window(vid, sec, cfg.bank.window_radius)
                  if bank is not None else None)
        records.extend(tta_predict(model, clip, dets, cfg.data, cfg.eval,
                                   dataset.vocab, window))
        if progress is not None:
            progress(f"predicted {vid} second {sec}")
    return records


def _average_precision(candidates, gts, iou_thr: float) -> Fraction:
    """Greedy-matched AP as an exact rational.

    candidates: (score, video_id, second, box) sorted by descending score
    with deterministic tie-breaking; gts: (video_id, second, box) in
    annotation order.
    """
    n_gt = len(gts)
    matched = [False] * n_gt
    tp_flags = []
    for score, vid, sec, box in candidates:
        best, best_iou = -1, 0.0
        for gi, (gvid, gsec, gbox) in enumerate(gts):
            if matched[gi] or gvid != vid or gsec != sec:
                continue
            overlap = iou(box, gbox)
            if overlap >= iou_thr and overlap > best_iou:
                best, best_iou = gi, overlap
        if best >= 0:
            matched[best] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    # all-point interpolation: recall steps 1/n_gt at each true positive,
    # precision taken from the running maximum over later ranks
    tp = 0
    precisions = []
    for k, flag in enumerate(tp_flags, start=1):
        tp += int(flag)
        precisions.append(Fraction(tp, k))
    area = Fraction(0)
    running = Fraction(0)
    for k in reversed(range(len(tp_flags))):
        if precisions[k] > running:
            running = precisions[k]
        if tp_flags[k]:
            area += running
    return area / n_gt


def frame_map(preds: list[PredictionRecord], gt: list[Detection],
              iou_thr: float = 0.5, vocab: ActionVocabulary | None = None
              ) -> EvalReport:
    """Frame-level mean average precision over classes with ground truth."""
    gt_by_class: dict[int, list] = {}
    for det in gt:
        for c in sorted(det.labels or frozenset()):
            gt_by_class.setdefault(c, []).append(
                (det.video_id, det.second, det.box))
    per_class_ap = {}
    support = {}
    ap_sum = Fraction(0)
    for c in sorted(gt_by_class):
        candidates = sorted(
            ((float(r.scores[c]), r.video_id, r.second, r.box) for r in preds
             if c < r.scores.shape[0]),
            key=lambda t: (-t[0], t[1], t[2], t[3]))
        ap = _average_precision(candidates, gt_by_class[c], iou_thr)
        per_class_ap[c] = float(ap)
        support[c] = len(gt_by_class[c])
        ap_sum += ap
    mean_ap = float(ap_sum / len(per_class_ap)) if per_class_ap else 0.0
    names = {}
    if vocab is not None:
        names = {c: name for c, name in vocab.classes if c in per_class_ap}
    return EvalReport(mode="ava", mean_ap=mean_ap, per_class_ap=per_class_ap,
                      support=support, class_names=names,
                      num_samples=len(preds))


def topk_error(pred_scores, truths) -> EvalReport:
    """Top-1/top-5 error with ties broken by class index."""
    scores = np.asarray(pred_scores, dtype=np.float64)
    labels = np.asarray(truths, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError("pred_scores must be [N, num_classes] with N >= 1")
    if labels.shape[0] != scores.shape[0]:
        raise ValueError("truths length must match pred_scores")
    n, num_classes = scores.shape
    k5 = min(5, num_classes)
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        t = int(labels[i])
        s = scores[i]
        higher = int(np.sum(s > s[t]))
        tied_before = int(np.sum(s[:t] == s[t]))
        ranks[i] = 1 + higher + tied_before
    top1 = float(np.mean(ranks > 1))
    top5 = float(np.mean(ranks > k5))
    return EvalReport(mode="classification", top1_error=top1,
                      top5_error=top5, avg_error=(top1 + top5) / 2.0,
                      num_samples=n)


def write_predictions_csv(records: list[PredictionRecord], path) -> None:
    """One row per (record, class): annotation schema plus a score column."""
    lines = []
    for r in records:
        x1, y1, x2, y2 = r.box
        for c in range(r.scores.shape[0]):
            lines.append(
                f"{r.video_id},{r.second},{repr(float(x1))},{repr(float(y1))},"
                f"{repr(float(x2))},{repr(float(y2))},{c},{r.person_id},"
                f"{repr(float(r.scores[c]))}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_predictions_csv(path, num_classes: int) -> list[PredictionRecord]:
    """Group per-class score rows back into one record per person box."""
    grouped: dict[tuple, np.ndarray] = {}
    order: list[tuple] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split(",")
            if len(parts) != 9:
                raise ValueError(
                    f"line {lineno}: expected 9 comma-separated fields")
            vid, sec, x1, y1, x2, y2, action, person, score = parts
            try:
                key = (vid, int(sec), (float(x1), float(y1), float(x2),
                                       float(y2)), int(person))
                c = int(action)
                s = float(score)
            except ValueError:
                raise ValueError(f"line {lineno}: malformed field") from None
            if not 0 <= c < num_classes:
                raise ValueError(
                    f"line {lineno}: action id {c} outside vocabulary")
            if not np.isfinite(s) or not 0.0 <= s <= 1.0:
                raise ValueError(f"line {lineno}: score must be in [0, 1]")
            if key not in grouped:
                grouped[key] = np.zeros(num_classes, dtype=np.float64)
                order.append(key)
            grouped[key][c] = s
    return [PredictionRecord(video_id=k[0], second=k[1], box=k[2],
                             scores=grouped[k], person_id=k[3])
            for k in order]


def records_from_detections(dets: list[Detection], num_classes: int
                            ) -> list[PredictionRecord]:
    """Perfect-score records mirroring labeled detections (protocol checks)."""
    records = []
    for d in dets:
        scores = np.zeros(num_classes, dtype=np.float64)
        for c in d.labels or frozenset():
            scores[c] = 1.0
        records.append(PredictionRecord(video_id=d.video_id, second=d.second,
                                        box=d.box, scores=scores,
                                        person_id=-1 if d.person_id is None
                                        else d.person_id))
    return records
