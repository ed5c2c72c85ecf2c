"""Procedural synthetic dataset: moving colored rectangles as persons.

Three label families are separable by construction:

* pose (ids 0-2): the person's brightness pulses at a class-specific
  frequency, decidable from the short clip around any key frame;
* beacon_present (id 3): a bright bar fills the right edge of the frame,
  outside every person box and beyond the backbone's receptive field, so it
  is decidable only from the whole frame;
* flashed_earlier (id 4): all persons render solid red during an early
  event window at least ``min_event_gap`` seconds before every labeled key
  frame. Person base colors keep their red channel low, so no pulse phase
  can imitate the flash; at labeled seconds the label is decidable only
  through the long-term feature bank.

Labels are emitted only for the final ``labeled_seconds`` of each video;
earlier seconds carry box-only rows so the bank can be populated everywhere.
At the default 0.5 probabilities the beacon and event flags are interleaved
deterministically over the corpus (event alternates every video, beacon every
second video) instead of being sampled independently; together with a split
stratified over flag combinations this pins the test prevalence of both
binary labels at one half and keeps positives evenly spread through the
canonical evaluation order, so an uninformative scorer lands at chance
instead of inheriting arrangement luck. Non-default probabilities fall back
to balanced shuffles. Generation is deterministic for a fixed seed: every
per-video choice draws from an independent child stream of one SeedSequence,
so e.g. one video's layout cannot shift any other video's content.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SyntheticConfig, _build_dataclass
from .data import ActionVocabulary, Detection, VideoTensor, parse_ava_csv, write_ava_csv

DATASET_FORMAT = "actiondet-synthetic"
DATASET_VERSION = 1

# zone geometry in normalized coordinates; persons stay in the left band so
# no feature cell inside a person box can see the beacon bar
PERSON_X = (0.10, 0.42)
PERSON_A_Y = (0.20, 0.46)
PERSON_B_Y = (0.64, 0.90)
BEACON_RECT = (0.78, 0.08, 0.98, 0.92)
BEACON_COLOR = (1.0, 0.85, 0.10)
EVENT_COLOR = (1.0, 0.10, 0.05)

POSE_CLASS_IDS = (0, 1, 2)
BEACON_CLASS_ID = 3
EVENT_CLASS_ID = 4


def build_vocabulary() -> ActionVocabulary:
    return ActionVocabulary(
        classes=[(0, "pose_steady"), (1, "pose_pulse_slow"),
                 (2, "pose_pulse_fast"), (3, "beacon_present"),
                 (4, "flashed_earlier")],
        pose_ids=frozenset(POSE_CLASS_IDS),
    )


LABEL_FAMILIES = {
    "pose": list(POSE_CLASS_IDS),
    "scene": [BEACON_CLASS_ID],
    "long_range": [EVENT_CLASS_ID],
}


@dataclass
class _Person:
    person_id: int
    base_cx: float
    base_cy: float
    half_w: float
    half_h: float
    color: np.ndarray
    pose_class: int
    pulse_freq: float
    pulse_phase: float
    wiggle_phase_x: float
    wiggle_phase_y: float

    def center_at(self, t_seconds: float, wiggle: float):
        cx = self.base_cx + wiggle * np.sin(
            2 * np.pi * 0.2 * t_seconds + self.wiggle_phase_x)
        cy = self.base_cy + wiggle * np.sin(
            2 * np.pi * 0.2 * t_seconds + self.wiggle_phase_y)
        return cx, cy

    def box_at(self, t_seconds: float, wiggle: float):
        cx, cy = self.center_at(t_seconds, wiggle)
        return (cx - self.half_w, cy - self.half_h,
                cx + self.half_w, cy + self.half_h)


@dataclass
class SyntheticDataset:
    """In-memory dataset: videos, per-second detections, vocab and splits."""

    vocab: ActionVocabulary
    videos_u8: dict[str, np.ndarray]
    fps: int
    detections: dict[tuple[str, int], list[Detection]]
    splits: dict[str, list[str]]
    seed: int
    params: SyntheticConfig
    families: dict[str, list[int]] = field(
        default_factory=lambda: {k: list(v) for k, v in LABEL_FAMILIES.items()})

    @property
    def video_ids(self) -> list[str]:
        return list(self.videos_u8)

    def video(self, video_id: str) -> VideoTensor:
        u8 = self.videos_u8[video_id]
        return VideoTensor(pixels=u8.astype(np.float32) / 255.0,
                           fps=self.fps, video_id=video_id)

    def detections_at(self, video_id: str, second: int) -> list[Detection]:
        return self.detections.get((video_id, second), [])

    def labeled_samples(self, split: str) -> list[tuple[str, int]]:
        """(video_id, second) pairs whose detections carry labels."""
        out = []
        for vid in self.splits[split]:
            seconds = sorted(s for (v, s) in self.detections if v == vid)
            for s in seconds:
                if any(d.labels for d in self.detections[(vid, s)]):
                    out.append((vid, s))
        return out

    def annotations(self) -> list[Detection]:
        out = []
        for key in sorted(self.detections):
            out.extend(self.detections[key])
        return out


def _draw_person(person_id, y_band, rng, cfg: SyntheticConfig,
                 pulse_freqs) -> _Person:
    w = rng.uniform(*cfg.person_size)
    h = rng.uniform(*cfg.person_size)
    cx = rng.uniform(PERSON_X[0] + w / 2, PERSON_X[1] - w / 2)
    cy = rng.uniform(y_band[0], y_band[1])
    # cool palette: red stays low enough that even the brightest pulse peak
    # (factor 1 + pulse_amp) cannot reach the event flash's red dominance
    color = np.array([rng.uniform(0.05, 0.22), rng.uniform(0.45, 0.95),
                      rng.uniform(0.45, 0.95)])
    pose = int(rng.integers(0, len(pulse_freqs)))
    # keep the phase away from 0/pi so a Nyquist-rate pulse stays visible
    phase = rng.uniform(0.3 * np.pi, 0.7 * np.pi) * rng.choice([-1.0, 1.0])
    return _Person(
        person_id=person_id, base_cx=cx, base_cy=cy, half_w=w / 2, half_h=h / 2,
        color=color, pose_class=pose, pulse_freq=pulse_freqs[pose],
        pulse_phase=phase,
        wiggle_phase_x=rng.uniform(0, 2 * np.pi),
        wiggle_phase_y=rng.uniform(0, 2 * np.pi),
    )


def _paint_rect(frame: np.ndarray, box, color):
    g = frame.shape[0]
    x1, y1, x2, y2 = box
    xa, xb = int(round(x1 * g)), int(round(x2 * g))
    ya, yb = int(round(y1 * g)), int(round(y2 * g))
    frame[max(0, ya):max(0, yb), max(0, xa):max(0, xb)] = color


def _render_video(index: int, seed: int, cfg: SyntheticConfig,
                  two_persons: bool, has_beacon: bool, has_event: bool):
    """One video: uint8 pixels plus its per-second detections."""
    ss = np.random.SeedSequence([seed, index])
    layout_rng, noise_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    persons = [_draw_person(0, PERSON_A_Y, layout_rng, cfg, cfg.pulse_freqs)]
    if two_persons:
        persons.append(_draw_person(1, PERSON_B_Y, layout_rng, cfg,
                                    cfg.pulse_freqs))

    g = cfg.grid_size
    n_frames = cfg.duration_seconds * cfg.fps
    wiggle = cfg.wiggle_px / g
    ev_lo, ev_hi = cfg.event_window
    video = np.zeros((n_frames, g, g, 3), dtype=np.float32)
    for f in range(n_frames):
        t = f / cfg.fps
        in_event = has_event and ev_lo <= int(t) < ev_hi
        frame = np.clip(noise_rng.normal(0.0, cfg.noise_std, (g, g, 3)),
                        0.0, 1.0).astype(np.float32)
        if has_beacon:
            _paint_rect(frame, BEACON_RECT, BEACON_COLOR)
        for p in persons:
            if in_event:
                color = np.asarray(EVENT_COLOR)
            else:
                factor = 1.0 + cfg.pulse_amp * np.sin(
                    2 * np.pi * p.pulse_freq * t + p.pulse_phase)
                color = np.clip(p.color * max(factor, 0.0), 0.0, 1.0)
            _paint_rect(frame, p.box_at(t, wiggle), color)
        video[f] = frame
    u8 = np.round(video * 255.0).astype(np.uint8)

    video_id = f"synth_{index:04d}"
    first_labeled = cfg.duration_seconds - cfg.labeled_seconds
    detections: dict[tuple[str, int], list[Detection]] = {}
    for s in range(cfg.duration_seconds):
        key_t = (s * cfg.fps + cfg.fps // 2) / cfg.fps
        dets = []
        for p in persons:
            box = p.box_at(key_t, wiggle)
            if s >= first_labeled:
                labels = {p.pose_class}
                if has_beacon:
                    labels.add(BEACON_CLASS_ID)
                if has_event:
                    labels.add(EVENT_CLASS_ID)
                labels = frozenset(labels)
            else:
                labels = None
            dets.append(Detection(video_id=video_id, second=s, box=box,
                                  score=1.0, labels=labels,
                                  person_id=p.person_id))
        detections[(video_id, s)] = dets
    return video_id, u8, detections


def _balanced_flags(n: int, fraction: float, rng) -> np.ndarray:
    """Boolean vector with exactly round(fraction * n) True entries, shuffled."""
    flags = np.zeros(n, dtype=bool)
    flags[: round(fraction * n)] = True
    rng.shuffle(flags)
    return flags


def _interleaved_flags(n: int, period: int) -> np.ndarray:
    """Balanced True/False pattern alternating every ``period`` videos."""
    return (np.arange(n) // period) % 2 == 1


def _stratified_split(ids, beacons, events, train_fraction):
    strata: dict[tuple[bool, bool], list[str]] = {}
    for i, vid in enumerate(ids):
        strata.setdefault((bool(beacons[i]), bool(events[i])), []).append(vid)
    train = []
    for key in sorted(strata):
        members = strata[key]
        train.extend(members[: round(train_fraction * len(members))])
    chosen = set(train)
    test = [v for v in ids if v not in chosen]
    # degenerate corpora (unit-test sized) still need both splits non-empty
    if not train:
        train, test = test[:1], test[1:]
    elif not test:
        train, test = train[:-1], train[-1:]
    return {"train": sorted(train), "test": sorted(test)}


def generate_synthetic_dataset(seed: int, params: SyntheticConfig
                               ) -> SyntheticDataset:
    """Render the full corpus; byte-identical for identical seeds."""
    params.validate()
    vocab = build_vocabulary()
    n = params.num_videos
    flag_streams = np.random.SeedSequence([seed]).spawn(3)
    two_persons = _balanced_flags(n, params.second_person_prob,
                                  np.random.default_rng(flag_streams[0]))
    if params.beacon_prob == 0.5:
        beacons = _interleaved_flags(n, period=2)
    else:
        beacons = _balanced_flags(n, params.beacon_prob,
                                  np.random.default_rng(flag_streams[1]))
    if params.event_prob == 0.5:
        events = _interleaved_flags(n, period=1)
    else:
        events = _balanced_flags(n, params.event_prob,
                                 np.random.default_rng(flag_streams[2]))
    videos_u8 = {}
    detections = {}
    for i in range(n):
        vid, u8, dets = _render_video(i, seed, params, two_persons[i],
                                      beacons[i], events[i])
        videos_u8[vid] = u8
        detections.update(dets)
    ids = sorted(videos_u8)
    splits = _stratified_split(ids, beacons, events, params.train_fraction)
    return SyntheticDataset(vocab=vocab, videos_u8=videos_u8, fps=params.fps,
                            detections=detections, splits=splits, seed=seed,
                            params=params)


def save_dataset(ds: SyntheticDataset, out_dir) -> None:
    """Directory layout: manifest.json + videos/<id>.npy + annotations.csv."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "params": dataclasses.asdict(ds.params),
        "vocabulary": ds.vocab.to_dict(),
        "label_families": ds.families,
        "splits": ds.splits,
        "fps": ds.fps,
        "videos": {vid: {"frames": int(arr.shape[0]),
                         "height": int(arr.shape[1]),
                         "width": int(arr.shape[2])}
                   for vid, arr in sorted(ds.videos_u8.items())},
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for vid, arr in sorted(ds.videos_u8.items()):
        np.save(out / "videos" / f"{vid}.npy", arr)
    write_ava_csv(ds.annotations(), out / "annotations.csv")


def load_dataset(path) -> SyntheticDataset:
    root = Path(path)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError("not an actiondet synthetic dataset directory")
    params = _build_dataclass(SyntheticConfig, manifest["params"],
                              prefix="params")
    vocab = ActionVocabulary.from_dict(manifest["vocabulary"])
    videos_u8 = {vid: np.load(root / "videos" / f"{vid}.npy")
                 for vid in manifest["videos"]}
    detections: dict[tuple[str, int], list[Detection]] = {}
    for det in parse_ava_csv(root / "annotations.csv"):
        detections.setdefault((det.video_id, det.second), []).append(det)
    return SyntheticDataset(
        vocab=vocab, videos_u8=videos_u8, fps=int(manifest["fps"]),
        detections=detections, splits=manifest["splits"],
        seed=int(manifest["seed"]), params=params,
        families={k: list(v) for k, v in manifest["label_families"].items()})
