"""Input representations: videos, detections, clips and their transforms.

Every branch of the detector consumes data prepared here: key-frame
selection, 5-second clip extraction, slow/fast pathway sampling, training
augmentation, and AVA-style CSV annotation ingestion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .config import AugmentConfig

Box = tuple[float, float, float, float]


@dataclass
class VideoTensor:
    """A decoded clip: dense [T, H, W, 3] pixels in [0, 1] plus frame rate."""

    pixels: np.ndarray
    fps: int
    video_id: str

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise ValueError("pixels must be [T, H, W, 3]")
        if self.pixels.shape[0] < 1:
            raise ValueError("empty input")
        if self.fps < 1:
            raise ValueError("fps must be a positive integer")

    @property
    def num_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def duration_seconds(self) -> int:
        return self.num_frames // self.fps


@dataclass(frozen=True)
class Detection:
    """One person box at one key frame, normalized coordinates."""

    video_id: str
    second: int
    box: Box
    score: float = 1.0
    labels: frozenset[int] | None = None
    person_id: int | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class ClipSample:
    """One training/inference unit: both pathway tensors plus annotations."""

    slow_frames: np.ndarray
    fast_frames: np.ndarray
    key_second: int
    detections: list[Detection]
    scene_labels: frozenset[int] = field(default_factory=frozenset)
    video_id: str = ""


@dataclass
class ActionVocabulary:
    """Ordered class list split into pose classes and multi-label classes."""

    classes: list[tuple[int, str]]
    pose_ids: frozenset[int]

    def __post_init__(self):
        ids = [i for i, _ in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError("class ids must be contiguous from 0")
        self.pose_ids = frozenset(self.pose_ids)
        if not self.pose_ids or not self.pose_ids < set(ids):
            raise ValueError("pose_ids must be a non-empty strict subset")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def pose_list(self) -> list[int]:
        return sorted(self.pose_ids)

    @property
    def non_pose_list(self) -> list[int]:
        return [i for i, _ in self.classes if i not in self.pose_ids]

    def pose_index(self, class_id: int) -> int:
        """Position of a pose class id within the pose logit group."""
        try:
            return self.pose_list.index(class_id)
        except ValueError:
            raise ValueError(f"class {class_id} is not a pose class") from None

    def to_dict(self) -> dict:
        return {"classes": [[i, n] for i, n in self.classes],
                "pose_ids": sorted(self.pose_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionVocabulary":
        return cls(classes=[(int(i), str(n)) for i, n in d["classes"]],
                   pose_ids=frozenset(int(i) for i in d["pose_ids"]))


def select_key_frames(video: VideoTensor) -> list[int]:
    """Middle frame of each whole second: index s*fps + fps//2, clamped."""
    if video.num_frames < 1:
        raise ValueError("empty input")
    last = video.num_frames - 1
    return [min(s * video.fps + video.fps // 2, last)
            for s in range(video.duration_seconds)]


def key_frame_index(video: VideoTensor, second: int) -> int:
    if second < 0 or second * video.fps >= video.num_frames:
        raise ValueError("key second out of range")
    return min(second * video.fps + video.fps // 2, video.num_frames - 1)


def extract_clip(video: VideoTensor, key_second: int, clip_seconds: int = 5,
                 n_frames: int = 64) -> np.ndarray:
    """n_frames contiguous frames centered on the key frame.

    The window is confined to the clip_seconds span around the key frame and
    to the video bounds; out-of-range positions replicate the nearest edge
    frame.
    """
    center = key_frame_index(video, key_second)
    span = clip_seconds * video.fps
    clip_lo = center - span // 2
    clip_hi = clip_lo + span - 1
    lo = max(0, clip_lo)
    hi = min(video.num_frames - 1, clip_hi)
    idx = np.arange(n_frames) + center - n_frames // 2
    idx = np.clip(idx, lo, hi)
    return video.pixels[idx]


def sample_pathways(clip: np.ndarray, t_slow: int = 8,
                    t_fast: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-stride frame sampling for the two pathways, starting at 0."""
    n = clip.shape[0]
    if t_slow < 1 or t_fast < 1 or n % t_slow or n % t_fast:
        raise ValueError("invalid pathway config")
    return clip[:: n // t_slow], clip[:: n // t_fast]


def flip_box(box: Box) -> Box:
    x1, y1, x2, y2 = box
    return (1.0 - x2, y1, 1.0 - x1, y2)


def _repair_interval(a: float, b: float, min_size: float = 1e-3) -> tuple[float, float]:
    """Clip to [0, 1] and keep a non-degenerate ordered interval."""
    lo, hi = (a, b) if a <= b else (b, a)
    lo, hi = max(0.0, lo), min(1.0, hi)
    if hi - lo < min_size:
        mid = min(max((lo + hi) / 2.0, min_size / 2.0), 1.0 - min_size / 2.0)
        lo, hi = mid - min_size / 2.0, mid + min_size / 2.0
    return lo, hi


def jitter_box(box: Box, amplitude: float, rng: np.random.Generator) -> Box:
    deltas = rng.uniform(-amplitude, amplitude, size=4)
    x1, y1, x2, y2 = (c + d for c, d in zip(box, deltas))
    x1, x2 = _repair_interval(x1, x2)
    y1, y2 = _repair_interval(y1, y2)
    return (x1, y1, x2, y2)


def resize_short_side(frames: np.ndarray, short_side: int) -> np.ndarray:
    """Bilinear resize so min(H, W) == short_side, aspect preserved."""
    import torch
    import torch.nn.functional as F

    t, h, w, _ = frames.shape
    if min(h, w) == short_side:
        return frames
    scale = short_side / min(h, w)
    new_h, new_w = round(h * scale), round(w * scale)
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=(new_h, new_w), mode="bilinear", align_corners=False)
    return y.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy()


def augment(clip: np.ndarray, detections: list[Detection], cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, list[Detection]]:
    """Joint pixel/box training augmentation.

    Horizontal flip acts on pixels and boxes together; box jitter perturbs
    coordinates by uniform noise then re-clamps to a valid box; color jitter
    scales and shifts channels inside [0, 1]; scale jitter resizes the short
    side to a draw from the configured range.
    """
    out = clip
    dets = list(detections)
    if cfg.flip and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1, :]
        dets = [replace(d, box=flip_box(d.box)) for d in dets]
    if cfg.color_jitter:
        scale = rng.uniform(cfg.color_scale[0], cfg.color_scale[1], size=3)
        shift = rng.uniform(-cfg.color_shift, cfg.color_shift, size=3)
        out = np.clip(out * scale + shift, 0.0, 1.0)
    if cfg.box_jitter > 0:
        dets = [replace(d, box=jitter_box(d.box, cfg.box_jitter, rng)) for d in dets]
    if cfg.scale_range is not None:
        short = int(rng.integers(cfg.scale_range[0], cfg.scale_range[1] + 1))
        out = resize_short_side(np.asarray(out, dtype=clip.dtype), short)
    return np.ascontiguousarray(out), dets


def normalize_pixels(frames: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel standardization of [T, H, W, 3] pixels."""
    mean = np.asarray(mean, dtype=frames.dtype)
    std = np.asarray(std, dtype=frames.dtype)
    return (frames - mean) / std


_NO_LABEL = {"", "-1"}


def parse_ava_csv(path) -> list[Detection]:
    """Read AVA-style rows: video_id, second, x1, y1, x2, y2, action, person.

    Rows sharing (video_id, second, box, person_id) merge into one Detection
    with a label set. An empty or -1 action id marks a person without labels.
    Malformed rows raise with their line number.
    """
    merged: dict[tuple, set[int]] = {}
    order: list[tuple] = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 8:
                raise ValueError(f"line {lineno}: expected 8 columns, got {len(row)}")
            vid = row[0].strip()
            try:
                second = int(row[1])
                box = tuple(float(v) for v in row[2:6])
                person = int(row[7])
            except ValueError:
                raise ValueError(f"line {lineno}: unparseable value") from None
            x1, y1, x2, y2 = box
            if not all(0.0 <= c <= 1.0 for c in box):
                raise ValueError(f"line {lineno}: coordinate outside [0, 1]")
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"line {lineno}: degenerate box")
            if second < 0:
                raise ValueError(f"line {lineno}: negative timestamp")
            action = row[6].strip()
            key = (vid, second, box, person)
            if key not in merged:
                merged[key] = set()
                order.append(key)
            if action not in _NO_LABEL:
                try:
                    merged[key].add(int(action))
                except ValueError:
                    raise ValueError(f"line {lineno}: unparseable action id") from None
    return [
        Detection(video_id=vid, second=second, box=box,
                  labels=frozenset(labels) if labels else None,
                  person_id=person)
        for (vid, second, box, person), labels in ((k, merged[k]) for k in order)
    ]


def write_ava_csv(detections: list[Detection], path) -> None:
    """Serialize detections back to the AVA-style schema (one row per label)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for d in detections:
            pid = -1 if d.person_id is None else d.person_id
            labels = sorted(d.labels) if d.labels else [-1]
            for a in labels:
                # repr of a plain float keeps full precision so that
                # parse -> serialize -> parse is exact
                coords = [repr(float(c)) for c in d.box]
                w.writerow([d.video_id, d.second, *coords, a, pid])


def scene_label_union(detections: list[Detection]) -> frozenset[int]:
    """Union of all persons' labels at a key frame; the scene-loss target."""
    out: set[int] = set()
    for d in detections:
        if d.labels:
            out |= d.labels
    return frozenset(out)
