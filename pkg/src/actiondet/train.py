"""Two-stage training driver.

Stage 1 fine-tunes the short-term extractor on ground-truth person boxes.
Its frozen weights populate the feature bank. Stage 2 initializes the
backbone from stage 1, freezes all batch-normalization layers, and trains
the three-branch model against the fixed bank.

Reproducibility: every stochastic choice is derived from the run seed.
Batch indices and augmentation draws come from stateless per-iteration
numpy generators, and the torch RNG state (which drives dropout) is stored
in checkpoints, so an interrupted run resumed from its checkpoint finishes
bitwise identical to an uninterrupted one.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (load_arrays_into, load_checkpoint, save_checkpoint,
                         state_dict_to_arrays)
from .config import ExperimentConfig, StageConfig
from .data import ActionVocabulary
from .featurebank import FeatureBank, build_bank
from .losses import build_targets, total_loss
from .model import (ClipInputs, Stage1Model, ThreeBranchModel, batch_pathways,
                    prepare_clip)
from .optim import SGD, norm_param_names, schedule_lr

_BATCH_STREAM = 77
_AUGMENT_STREAM = 101


@dataclass
class TrainResult:
    checkpoint_path: Path
    content_hash: str
    iterations: int
    final_loss: float
    log_lines: list[str]


def _torch_dtype(cfg: ExperimentConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def _log_line(it, lr, total, breakdown, wall) -> str:
    def val(t):
        return float(t.detach()) if torch.is_tensor(t) else float(t)
    return (f"iter={it:06d} lr={lr:.8f} loss_total={val(total):.6f} "
            f"loss_pose={val(breakdown['pose']):.6f} "
            f"loss_focal={val(breakdown['focal']):.6f} "
            f"loss_scene={val(breakdown['scene']):.6f} wall={wall:.2f}")


def _batch_indices(seed: int, iteration: int, n: int, batch_size: int):
    rng = np.random.default_rng([seed, _BATCH_STREAM, iteration])
    return rng.integers(0, n, size=batch_size)


def _sample_inputs(dataset, sample, cfg: ExperimentConfig, stage: StageConfig,
                   iteration: int, slot: int) -> ClipInputs:
    vid, sec = sample
    dets = dataset.detections_at(vid, sec)
    if stage.augment:
        rng = np.random.default_rng(
            [cfg.seed, _AUGMENT_STREAM, iteration, slot])
        return prepare_clip(dataset.video(vid), sec, dets, cfg.data,
                            cfg.data.augment, rng)
    return prepare_clip(dataset.video(vid), sec, dets, cfg.data)


def batch_targets(det_lists, vocab: ActionVocabulary, dtype):
    """Concatenate per-person targets and stack per-sample scene unions."""
    target_sets = []
    scene_rows = []
    for dets in det_lists:
        sets, scene = build_targets(dets, vocab)
        target_sets.extend(sets)
        scene_rows.append(scene)
    scene_t = torch.as_tensor(np.stack(scene_rows), dtype=dtype)
    return target_sets, scene_t


def _resume(model, opt, resume_from):
    tensors, extra, manifest = load_checkpoint(resume_from)
    load_arrays_into(model, tensors)
    momentum = {k[len("momentum/"):]: v for k, v in extra.items()
                if k.startswith("momentum/")}
    opt.load_state_arrays(momentum)
    torch.set_rng_state(torch.from_numpy(extra["torch_rng"].copy()))
    meta = manifest["meta"]
    return int(meta["iteration"]), list(meta.get("log", []))


def _save(out_path, model, opt, cfg, iteration, final_loss, log_lines, stage,
          extra_meta=None) -> str:
    extra = {f"momentum/{k}": v for k, v in opt.state_arrays().items()}
    extra["torch_rng"] = torch.get_rng_state().numpy()
    meta = {
        "stage": stage,
        "iteration": iteration,
        "seed": cfg.seed,
        "dtype": cfg.dtype,
        "final_loss": final_loss,
        "log": log_lines,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(out_path, state_dict_to_arrays(model),
                           config_hash=cfg.config_hash(), meta=meta,
                           extra_tensors=extra)


def train_stage1(dataset, cfg: ExperimentConfig, out_path, resume_from=None,
                 stop_after=None, samples=None, progress=None) -> TrainResult:
    """Train the short-term extractor on ground-truth boxes."""
    cfg.validate()
    vocab = dataset.vocab
    dtype = _torch_dtype(cfg)
    stage = cfg.stage1
    torch.manual_seed(cfg.seed)
    model = Stage1Model(vocab, cfg.data, cfg.backbone, cfg.roi,
                        head_dropout=cfg.fusion.head_dropout).to(dtype)
    opt = SGD(model.named_parameters(), stage.optim,
              no_decay=norm_param_names(model))
    if samples is None:
        samples = dataset.labeled_samples("train")
    if not samples:
        raise ValueError("training split has no labeled samples")

    start, log_lines = 0, []
    if resume_from is not None:
        start, log_lines = _resume(model, opt, resume_from)
    end = stage.schedule.iter_max
    if stop_after is not None:
        end = min(end, stop_after)

    model.train()
    t0 = time.perf_counter()
    final_loss = float("nan")
    for it in range(start, end):
        lr = schedule_lr(it, stage.schedule)
        idx = _batch_indices(cfg.seed, it, len(samples), stage.batch_size)
        inputs = [_sample_inputs(dataset, samples[int(j)], cfg, stage, it, slot)
                  for slot, j in enumerate(idx)]
        slow, fast = batch_pathways(inputs, dtype)
        pose, other, _ = model(slow, fast, [ci.boxes for ci in inputs])
        target_sets, _ = batch_targets([ci.detections for ci in inputs],
                                       vocab, dtype)
        total, breakdown = total_loss((pose, other, None), (target_sets, None),
                                      cfg.losses)
        if not bool(torch.isfinite(total)):
            raise RuntimeError(f"training diverged at iteration {it}: "
                               "loss is not finite")
        opt.zero_grad()
        total.backward()
        opt.step(lr)
        final_loss = float(total.detach())
        if (it + 1) % stage.log_every == 0 or it + 1 == end:
            line = _log_line(it, lr, total, breakdown,
                             time.perf_counter() - t0)
            log_lines.append(line)
            if progress is not None:
                progress(line)

    content_hash = _save(out_path, model, opt, cfg, end, final_loss,
                         log_lines, stage="stage1",
                         extra_meta={"vocabulary": vocab.to_dict()})
    return TrainResult(checkpoint_path=Path(out_path),
                       content_hash=content_hash, iterations=end,
                       final_loss=final_loss, log_lines=log_lines)


def load_stage1_model(ckpt_path, cfg: ExperimentConfig,
                      vocab: ActionVocabulary) -> Stage1Model:
    tensors, _, _ = load_checkpoint(ckpt_path)
    model = Stage1Model(vocab, cfg.data, cfg.backbone, cfg.roi,
                        head_dropout=cfg.fusion.head_dropout)
    model = model.to(_torch_dtype(cfg))
    load_arrays_into(model, tensors)
    model.eval()
    return model


def extract_bank(dataset, stage1_ckpt, cfg: ExperimentConfig,
                 video_ids=None) -> FeatureBank:
    """Build the long-term feature bank from frozen stage-1 weights.

    The bank's extractor hash is the stage-1 checkpoint content hash, which
    stage 2 verifies before training.
    """
    vocab = dataset.vocab
    model = load_stage1_model(stage1_ckpt, cfg, vocab)
    _, _, manifest = load_checkpoint(stage1_ckpt)
    return build_bank(model, dataset,
                      persons_per_second=cfg.bank.persons_per_second,
                      extractor_hash=manifest["tensors_sha256"],
                      video_ids=video_ids)


def _freeze_norm_params(model: ThreeBranchModel):
    frozen = norm_param_names(model.backbone)
    for name, p in model.backbone.named_parameters():
        if name in frozen:
            p.requires_grad_(False)


def _feature_cache(model, dataset, samples, cfg, dtype):
    """One no-grad pass over the training samples with the frozen backbone."""
    person, pooled = [], []
    batch = cfg.stage2.batch_size
    with torch.no_grad():
        for lo in range(0, len(samples), batch):
            chunk = samples[lo:lo + batch]
            inputs = [prepare_clip(dataset.video(v), s,
                                   dataset.detections_at(v, s), cfg.data)
                      for v, s in chunk]
            slow, fast = batch_pathways(inputs, dtype)
            maps = model.backbone(slow, fast)
            vecs, sizes = model.person_vectors(
                maps, [ci.boxes for ci in inputs])
            glob = model.pooled_globals(maps)
            offset = 0
            for i, n in enumerate(sizes):
                person.append(vecs[offset:offset + n].clone())
                pooled.append(glob[i].clone())
                offset += n
    return person, pooled


def train_stage2(dataset, bank: FeatureBank, stage1_ckpt,
                 cfg: ExperimentConfig, out_path, resume_from=None,
                 stop_after=None, samples=None, progress=None) -> TrainResult:
    """Train the full three-branch model against a fixed feature bank."""
    cfg.validate()
    vocab = dataset.vocab
    dtype = _torch_dtype(cfg)
    stage = cfg.stage2

    s1_tensors, _, s1_manifest = load_checkpoint(stage1_ckpt)
    s1_hash = s1_manifest["tensors_sha256"]
    if not bank.extractor_hash:
        raise ValueError(
            "bank has no extractor hash; rebuild it from a trained stage-1 "
            "checkpoint before stage-2 training")
    if bank.extractor_hash != s1_hash:
        msg = ("bank extractor hash does not match the stage-1 checkpoint; "
               "the bank was built from different weights")
        if stage.hash_mismatch == "error":
            raise ValueError(msg)
        warnings.warn(msg)

    torch.manual_seed(cfg.seed + 1)
    model = ThreeBranchModel(vocab, cfg.data, cfg.backbone, cfg.roi,
                             cfg.fusion, bank_dim=bank.dim).to(dtype)
    model.init_from_stage1(s1_tensors)
    model.backbone.set_norm_frozen(True)
    _freeze_norm_params(model)
    if stage.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    model.train()

    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = SGD(trainable, stage.optim, no_decay=norm_param_names(model))

    if samples is None:
        samples = dataset.labeled_samples("train")
    if not samples:
        raise ValueError("training split has no labeled samples")
    windows = [bank.window(v, s, cfg.bank.window_radius) for v, s in samples]
    targets = [dataset.detections_at(v, s) for v, s in samples]

    use_cache = stage.freeze_backbone and not stage.augment
    if use_cache:
        person_cache, pooled_cache = _feature_cache(model, dataset, samples,
                                                    cfg, dtype)

    start, log_lines = 0, []
    if resume_from is not None:
        start, log_lines = _resume(model, opt, resume_from)
    end = stage.schedule.iter_max
    if stop_after is not None:
        end = min(end, stop_after)

    t0 = time.perf_counter()
    final_loss = float("nan")
    for it in range(start, end):
        lr = schedule_lr(it, stage.schedule)
        idx = _batch_indices(cfg.seed, it, len(samples), stage.batch_size)
        if use_cache:
            person_vecs = torch.cat([person_cache[int(j)] for j in idx])
            sizes = [person_cache[int(j)].shape[0] for j in idx]
            pooled = torch.stack([pooled_cache[int(j)] for j in idx])
            det_lists = [targets[int(j)] for j in idx]
        else:
            inputs = [_sample_inputs(dataset, samples[int(j)], cfg, stage,
                                     it, slot)
                      for slot, j in enumerate(idx)]
            slow, fast = batch_pathways(inputs, dtype)
            if stage.freeze_backbone:
                with torch.no_grad():
                    maps = model.backbone(slow, fast)
            else:
                maps = model.backbone(slow, fast)
            person_vecs, sizes = model.person_vectors(
                maps, [ci.boxes for ci in inputs])
            pooled = model.pooled_globals(maps)
            det_lists = [ci.detections for ci in inputs]
        batch_windows = [windows[int(j)] for j in idx]
        pose, other, scene = model.head_from_features(person_vecs, sizes,
                                                      pooled, batch_windows)
        target_sets, scene_t = batch_targets(det_lists, vocab, dtype)
        total, breakdown = total_loss((pose, other, scene),
                                      (target_sets, scene_t), cfg.losses)
        if not bool(torch.isfinite(total)):
            raise RuntimeError(f"training diverged at iteration {it}: "
                               "loss is not finite")
        opt.zero_grad()
        total.backward()
        opt.step(lr)
        final_loss = float(total.detach())
        if (it + 1) % stage.log_every == 0 or it + 1 == end:
            line = _log_line(it, lr, total, breakdown,
                             time.perf_counter() - t0)
            log_lines.append(line)
            if progress is not None:
                progress(line)

    content_hash = _save(out_path, model, opt, cfg, end, final_loss,
                         log_lines, stage="stage2",
                         extra_meta={"vocabulary": vocab.to_dict(),
                                     "stage1_hash": s1_hash,
                                     "bank_hash": bank.extractor_hash})
    return TrainResult(checkpoint_path=Path(out_path),
                       content_hash=content_hash, iterations=end,
                       final_loss=final_loss, log_lines=log_lines)


def load_stage2_model(ckpt_path, cfg: ExperimentConfig,
                      vocab: ActionVocabulary, bank_dim: int
                      ) -> ThreeBranchModel:
    tensors, _, _ = load_checkpoint(ckpt_path)
    model = ThreeBranchModel(vocab, cfg.data, cfg.backbone, cfg.roi,
                             cfg.fusion, bank_dim=bank_dim)
    model = model.to(_torch_dtype(cfg))
    load_arrays_into(model, tensors)
    model.eval()
    return model
