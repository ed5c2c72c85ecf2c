"""Synthetic corpus: determinism, label construction, persistence."""

import numpy as np
import pytest

from actiondet.config import SyntheticConfig
from actiondet.synthetic import (BEACON_CLASS_ID, BEACON_RECT, EVENT_CLASS_ID,
                                 LABEL_FAMILIES, PERSON_X, _interleaved_flags,
                                 _render_video, _stratified_split,
                                 build_vocabulary, generate_synthetic_dataset,
                                 load_dataset, save_dataset)


def _small_cfg(**kw):
    base = dict(num_videos=8, grid_size=32, fps=2, duration_seconds=27,
                labeled_seconds=2, event_window=(2, 5), min_event_gap=20,
                train_fraction=0.5)
    base.update(kw)
    return SyntheticConfig(**base)


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic_dataset(seed=0, params=_small_cfg())


# ---------------------------------------------------------------------------
# Vocabulary and families


def test_vocabulary_layout():
    vocab = build_vocabulary()
    assert vocab.num_classes == 5
    assert vocab.pose_list == [0, 1, 2]
    assert vocab.non_pose_list == [BEACON_CLASS_ID, EVENT_CLASS_ID]
    assert set(LABEL_FAMILIES) == {"pose", "scene", "long_range"}
    assert LABEL_FAMILIES["long_range"] == [EVENT_CLASS_ID]


# ---------------------------------------------------------------------------
# Determinism


def test_generation_is_deterministic():
    cfg = _small_cfg(num_videos=4)
    a = generate_synthetic_dataset(seed=3, params=cfg)
    b = generate_synthetic_dataset(seed=3, params=_small_cfg(num_videos=4))
    assert a.video_ids == b.video_ids
    for vid in a.video_ids:
        np.testing.assert_array_equal(a.videos_u8[vid], b.videos_u8[vid])
    assert a.detections == b.detections
    assert a.splits == b.splits


def test_different_seeds_differ():
    cfg = _small_cfg(num_videos=2)
    a = generate_synthetic_dataset(seed=0, params=cfg)
    b = generate_synthetic_dataset(seed=1, params=_small_cfg(num_videos=2))
    changed = any(not np.array_equal(a.videos_u8[v], b.videos_u8[v])
                  for v in a.video_ids)
    assert changed


def test_video_index_isolation():
    # video i is a pure function of (seed, i, flags): rendering it alone
    # reproduces the corpus copy exactly
    cfg = _small_cfg()
    ds = generate_synthetic_dataset(seed=5, params=cfg)
    # beacon alternates every second video, event every video
    i = 3
    vid, u8, dets = _render_video(i, 5, cfg, two_persons=False,
                                  has_beacon=(i // 2) % 2 == 1,
                                  has_event=i % 2 == 1)
    two = np.array_equal(ds.videos_u8[vid], u8)
    if not two:  # the corpus flag for two persons may differ; re-render
        vid, u8, dets = _render_video(i, 5, cfg, two_persons=True,
                                      has_beacon=(i // 2) % 2 == 1,
                                      has_event=i % 2 == 1)
    np.testing.assert_array_equal(ds.videos_u8[vid], u8)
    assert {k: v for k, v in ds.detections.items() if k[0] == vid} == dets


# ---------------------------------------------------------------------------
# Label semantics


def test_labels_only_in_final_seconds(small_ds):
    cfg = small_ds.params
    first_labeled = cfg.duration_seconds - cfg.labeled_seconds
    for (vid, sec), dets in small_ds.detections.items():
        for d in dets:
            if sec < first_labeled:
                assert d.labels is None
            else:
                assert d.labels is not None


def test_every_second_has_detections(small_ds):
    cfg = small_ds.params
    for vid in small_ds.video_ids:
        for sec in range(cfg.duration_seconds):
            assert len(small_ds.detections_at(vid, sec)) >= 1


def test_exactly_one_pose_per_person(small_ds):
    for dets in small_ds.detections.values():
        for d in dets:
            if d.labels is None:
                continue
            poses = d.labels & {0, 1, 2}
            assert len(poses) == 1


def test_flags_are_shared_across_persons_and_seconds(small_ds):
    # beacon/event labels are per-video: each labeled detection in a video
    # agrees on both flags
    for vid in small_ds.video_ids:
        flags = {(BEACON_CLASS_ID in d.labels, EVENT_CLASS_ID in d.labels)
                 for dets in (small_ds.detections_at(vid, s)
                              for s in range(small_ds.params.duration_seconds))
                 for d in dets if d.labels is not None}
        assert len(flags) == 1


def test_interleaved_flags_pattern():
    assert _interleaved_flags(6, period=1).tolist() == [
        False, True, False, True, False, True]
    assert _interleaved_flags(8, period=2).tolist() == [
        False, False, True, True, False, False, True, True]
    # both label flags are exactly balanced at any even corpus size
    for n in (4, 8, 100):
        assert _interleaved_flags(n, 1).sum() == n // 2
        assert _interleaved_flags(n, 2).sum() == n // 2


def test_corpus_flag_balance(small_ds):
    beacons = sum(BEACON_CLASS_ID in d.labels
                  for dets in small_ds.detections.values()
                  for d in dets if d.labels and d.person_id == 0
                  ) / small_ds.params.labeled_seconds
    assert beacons == small_ds.params.num_videos // 2


def test_event_pixels_only_in_event_window():
    # rendering the same video with and without the event differs exactly
    # inside the event window and nowhere else
    cfg = _small_cfg(num_videos=1)
    _, with_ev, _ = _render_video(0, 7, cfg, False, False, True)
    _, without, _ = _render_video(0, 7, cfg, False, False, False)
    ev_lo, ev_hi = cfg.event_window
    for f in range(with_ev.shape[0]):
        sec = int((f / cfg.fps))
        same = np.array_equal(with_ev[f], without[f])
        assert same == (not ev_lo <= sec < ev_hi), f"frame {f}"


def test_event_precedes_labels_by_gap(small_ds):
    cfg = small_ds.params
    first_labeled = cfg.duration_seconds - cfg.labeled_seconds
    assert first_labeled - (cfg.event_window[1] - 1) >= cfg.min_event_gap


def test_beacon_outside_person_zone():
    # personal boxes and the beacon bar cannot overlap by construction
    assert PERSON_X[1] < BEACON_RECT[0]


def test_person_boxes_match_painted_pixels(small_ds):
    # labeled boxes sit over clearly non-background pixels at the key frame
    cfg = small_ds.params
    g = cfg.grid_size
    vid = small_ds.video_ids[0]
    sec = cfg.duration_seconds - 1
    video = small_ds.video(vid)
    key = sec * cfg.fps + cfg.fps // 2
    frame = video.pixels[key]
    for d in small_ds.detections_at(vid, sec):
        x1, y1, x2, y2 = d.box
        cx, cy = int((x1 + x2) / 2 * g), int((y1 + y2) / 2 * g)
        assert frame[cy, cx].max() > 0.2  # painted, not noise


def test_splits_are_disjoint_and_stratified(small_ds):
    train = set(small_ds.splits["train"])
    test = set(small_ds.splits["test"])
    assert train and test
    assert not train & test
    assert train | test == set(small_ds.video_ids)
    # the test half keeps both flag prevalences at one half
    test_flags = []
    for vid in small_ds.splits["test"]:
        dets = [d for (v, s), ds_ in small_ds.detections.items()
                if v == vid for d in ds_ if d.labels]
        test_flags.append((BEACON_CLASS_ID in dets[0].labels,
                           EVENT_CLASS_ID in dets[0].labels))
    n = len(test_flags)
    assert sum(b for b, _ in test_flags) == n // 2
    assert sum(e for _, e in test_flags) == n // 2


def test_stratified_split_handles_tiny_corpora():
    splits = _stratified_split(["a"], [True], [False], 0.5)
    assert splits["train"] and splits["test"] == [] or (
        splits["train"] == [] and splits["test"])
    # at least one side non-empty and no overlap
    splits = _stratified_split(["a", "b"], [True, False], [False, True], 0.5)
    assert set(splits["train"]) | set(splits["test"]) == {"a", "b"}
    assert not set(splits["train"]) & set(splits["test"])


def test_labeled_samples_cover_only_test_labeled_seconds(small_ds):
    cfg = small_ds.params
    samples = small_ds.labeled_samples("test")
    expected = cfg.labeled_seconds * len(small_ds.splits["test"])
    assert len(samples) == expected
    first_labeled = cfg.duration_seconds - cfg.labeled_seconds
    assert all(sec >= first_labeled for _, sec in samples)


# ---------------------------------------------------------------------------
# Persistence


def test_save_load_round_trip(tmp_path, small_ds):
    out = tmp_path / "corpus"
    save_dataset(small_ds, out)
    back = load_dataset(out)
    assert back.video_ids == small_ds.video_ids
    for vid in small_ds.video_ids:
        np.testing.assert_array_equal(back.videos_u8[vid],
                                      small_ds.videos_u8[vid])
    assert back.splits == small_ds.splits
    assert back.vocab == small_ds.vocab
    assert back.fps == small_ds.fps
    assert back.params == small_ds.params
    assert back.families == {k: list(v) for k, v in LABEL_FAMILIES.items()}
    # detections round trip exactly, including the unlabeled early seconds
    assert set(back.detections) == set(small_ds.detections)
    for key in small_ds.detections:
        assert back.detections[key] == small_ds.detections[key]


def test_load_rejects_foreign_directory(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not an actiondet synthetic"):
        load_dataset(tmp_path)
