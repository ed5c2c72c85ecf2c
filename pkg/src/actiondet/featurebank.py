"""Long-term feature bank: build, windowed retrieval, persistence.

The bank maps (video_id, second) to up to K person feature vectors extracted
by a fixed stage-1 network. Retrieval gathers a window of +-R seconds around
a center clip (61 seconds and up to 305 features at the defaults) and pads
to fixed capacity with masked zero slots.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]

BANK_FORMAT = "actiondet-bank"
BANK_VERSION = 1


@dataclass
class BankEntry:
    vector: np.ndarray
    box: Box
    score: float


@dataclass
class BankWindow:
    """Fixed-capacity window of bank features around a center second."""

    features: np.ndarray   # [(2R+1)*K, d_bank]; masked slots are zero
    mask: np.ndarray       # bool, True where the slot holds a real feature
    center_second: int
    radius: int

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class FeatureBank:
    """Write-once store of per-second person features for many videos."""

    dim: int
    persons_per_second: int                      # K
    extractor_hash: str = ""
    videos: dict[str, int] = field(default_factory=dict)   # id -> num seconds
    entries: dict[tuple[str, int], list[BankEntry]] = field(default_factory=dict)

    def register_video(self, video_id: str, num_seconds: int):
        self.videos[video_id] = int(num_seconds)

    def put(self, video_id: str, second: int, vectors, boxes, scores):
        """Store the top-K features (by descending score) for one second."""
        if second < 0:
            raise ValueError("seconds must be non-negative")
        items = []
        for vec, box, score in zip(vectors, boxes, scores):
            vec = np.asarray(vec)
            if vec.shape != (self.dim,):
                raise ValueError(
                    f"feature dim {vec.shape} != bank dim ({self.dim},)")
            items.append(BankEntry(vector=vec, box=tuple(box), score=float(score)))
        items.sort(key=lambda e: -e.score)
        self.entries[(video_id, second)] = items[: self.persons_per_second]

    def at(self, video_id: str, second: int) -> list[BankEntry]:
        return self.entries.get((video_id, second), [])

    def window(self, video_id: str, center_second: int, radius: int) -> BankWindow:
        return window(self, video_id, center_second, radius)


def window(bank: FeatureBank, video_id: str, center_second: int,
           radius: int) -> BankWindow:
    """Gather seconds [center-R, center+R] clipped to the video's range.

    Vectors concatenate in second order then descending-score order and are
    padded with masked zero slots up to (2R+1)*K.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if video_id not in bank.videos:
        raise KeyError(f"unknown video_id {video_id!r}")
    num_seconds = bank.videos[video_id]
    capacity = (2 * radius + 1) * bank.persons_per_second
    features = np.zeros((capacity, bank.dim), dtype=np.float64)
    mask = np.zeros(capacity, dtype=bool)
    slot = 0
    lo = max(0, center_second - radius)
    hi = min(num_seconds - 1, center_second + radius)
    for second in range(lo, hi + 1):
        for entry in bank.at(video_id, second):
            features[slot] = entry.vector
            mask[slot] = True
            slot += 1
    return BankWindow(features=features, mask=mask,
                      center_second=center_second, radius=radius)


def build_bank(extractor, dataset, persons_per_second: int = 5,
               extractor_hash: str = "", video_ids=None) -> FeatureBank:
    """Run the fixed extractor over every (video, second) with detections.

    ``extractor`` must expose ``feature_dim`` and
    ``extract_person_features(video, second, detections) -> [n, d] array``.
    Seconds without detections store an empty list, which is valid.
    """
    bank = FeatureBank(dim=extractor.feature_dim,
                       persons_per_second=persons_per_second,
                       extractor_hash=extractor_hash)
    ids = list(video_ids) if video_ids is not None else list(dataset.video_ids)
    for video_id in ids:
        video = dataset.video(video_id)
        bank.register_video(video_id, video.duration_seconds)
        for second in range(video.duration_seconds):
            dets = dataset.detections_at(video_id, second)
            if not dets:
                bank.entries[(video_id, second)] = []
                continue
            feats = extractor.extract_person_features(video, second, dets)
            bank.put(video_id, second, feats,
                     [d.box for d in dets], [d.score for d in dets])
    return bank


def _pack_arrays(bank: FeatureBank):
    index = []
    vectors, boxes, scores = [], [], []
    for (video_id, second) in sorted(bank.entries):
        entries = bank.entries[(video_id, second)]
        index.append({"video": video_id, "second": second, "count": len(entries)})
        for e in entries:
            vectors.append(np.asarray(e.vector, dtype=np.float64))
            boxes.append(e.box)
            scores.append(e.score)
    feats = (np.stack(vectors) if vectors
             else np.zeros((0, bank.dim), dtype=np.float64))
    boxes_arr = (np.asarray(boxes, dtype=np.float64) if boxes
                 else np.zeros((0, 4), dtype=np.float64))
    scores_arr = np.asarray(scores, dtype=np.float64)
    return index, feats, boxes_arr, scores_arr


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def save_bank(bank: FeatureBank, path) -> None:
    """Write the bank as a zip of tensor blocks plus a JSON manifest."""
    index, feats, boxes, scores = _pack_arrays(bank)
    blobs = {"features.npy": _npy_bytes(feats),
             "boxes.npy": _npy_bytes(boxes),
             "scores.npy": _npy_bytes(scores)}
    digest = hashlib.sha256()
    for name in sorted(blobs):
        digest.update(blobs[name])
    manifest = {
        "format": BANK_FORMAT,
        "version": BANK_VERSION,
        "d_bank": bank.dim,
        "persons_per_second": bank.persons_per_second,
        "extractor_hash": bank.extractor_hash,
        "videos": bank.videos,
        "index": index,
        "tensors_sha256": digest.hexdigest(),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(blobs):
            zf.writestr(name, blobs[name])


def load_bank(path, expected_dim: int | None = None) -> FeatureBank:
    """Read a bank file back; verifies the manifest integrity hash."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != BANK_FORMAT:
            raise ValueError("not a feature-bank file")
        blobs = {name: zf.read(name)
                 for name in ("features.npy", "boxes.npy", "scores.npy")}
    digest = hashlib.sha256()
    for name in sorted(blobs):
        digest.update(blobs[name])
    if digest.hexdigest() != manifest["tensors_sha256"]:
        raise ValueError("bank integrity check failed: tensor hash mismatch")
    if expected_dim is not None and manifest["d_bank"] != expected_dim:
        raise ValueError(
            f"bank dimension {manifest['d_bank']} != expected {expected_dim}")
    feats = np.load(io.BytesIO(blobs["features.npy"]))
    boxes = np.load(io.BytesIO(blobs["boxes.npy"]))
    scores = np.load(io.BytesIO(blobs["scores.npy"]))
    bank = FeatureBank(dim=int(manifest["d_bank"]),
                       persons_per_second=int(manifest["persons_per_second"]),
                       extractor_hash=manifest["extractor_hash"],
                       videos={k: int(v) for k, v in manifest["videos"].items()})
    offset = 0
    for item in manifest["index"]:
        n = int(item["count"])
        entries = [BankEntry(vector=feats[offset + j],
                             box=tuple(boxes[offset + j]),
                             score=float(scores[offset + j]))
                   for j in range(n)]
        bank.entries[(item["video"], int(item["second"]))] = entries
        offset += n
    return bank


def bank_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()
