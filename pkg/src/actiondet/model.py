"""Model assemblies for the two training stages.

Stage 1 is the short-term extractor: SlowFast backbone, RoI pooling over
ground-truth boxes, and a plain per-person classifier. Its frozen weights
populate the long-term feature bank.

Stage 2 is the full three-branch detector: the same backbone feeds a person
branch (RoI vector), a long-term branch (LFB attention over the bank window
of the clip's second) and a global branch (spatio-temporally pooled clip
feature with its own reduction and scene classifier). Branch outputs are
concatenated, never summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import SlowFastBackbone, feature_maps_from_batch
from .config import BackboneConfig, DataConfig, FusionConfig, RoIConfig
from .data import (ActionVocabulary, Detection, VideoTensor, augment,
                   extract_clip, normalize_pixels, sample_pathways)
from .fusion import ActionHead, LFBStack, Preprocess, SceneHead, fuse
from .roipool import roi_pool_3d


@dataclass
class ClipInputs:
    """Prepared arrays for one (video, second) sample."""

    slow: np.ndarray            # [t_slow, H, W, 3] normalized pixels
    fast: np.ndarray            # [t_fast, H, W, 3]
    detections: list[Detection]

    @property
    def boxes(self):
        return [d.box for d in self.detections]


def prepare_clip(video: VideoTensor, second: int, detections,
                 data_cfg: DataConfig, augment_cfg=None,
                 rng: np.random.Generator | None = None) -> ClipInputs:
    """Extract, optionally augment, normalize and subsample one clip."""
    clip = extract_clip(video, second, data_cfg.clip_seconds, data_cfg.n_frames)
    dets = list(detections)
    if augment_cfg is not None:
        clip, dets = augment(clip, dets, augment_cfg, rng)
    clip = normalize_pixels(clip.astype(np.float32), data_cfg.pixel_mean,
                            data_cfg.pixel_std)
    slow, fast = sample_pathways(clip, data_cfg.t_slow, data_cfg.t_fast)
    return ClipInputs(slow=slow, fast=fast, detections=dets)


def batch_pathways(samples: list[ClipInputs], dtype, device=None):
    """Stack per-sample pathway arrays into [N, 3, T, H, W] tensors."""
    slow = torch.stack([torch.from_numpy(np.ascontiguousarray(s.slow))
                        for s in samples]).to(dtype).permute(0, 4, 1, 2, 3)
    fast = torch.stack([torch.from_numpy(np.ascontiguousarray(s.fast))
                        for s in samples]).to(dtype).permute(0, 4, 1, 2, 3)
    if device is not None:
        slow, fast = slow.to(device), fast.to(device)
    return slow, fast


class Stage1Model(nn.Module):
    """Backbone + RoI pooling + per-person classifier, no bank, no global.

    Doubles as the bank extractor: ``feature_dim`` and
    ``extract_person_features`` satisfy the protocol expected by build_bank.
    """

    def __init__(self, vocab: ActionVocabulary, data_cfg: DataConfig,
                 backbone_cfg: BackboneConfig, roi_cfg: RoIConfig,
                 head_dropout: float = 0.5):
        super().__init__()
        self.vocab = vocab
        self.data_cfg = data_cfg
        self.roi_cfg = roi_cfg
        self.backbone = SlowFastBackbone(backbone_cfg)
        self.head = ActionHead(self.backbone.out_channels, vocab,
                               dropout=head_dropout)

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_channels

    def person_vectors(self, maps: torch.Tensor, boxes_per_sample):
        """RoI-pool every box from the batched backbone output.

        Returns stacked vectors [M, C] plus the per-sample box counts.
        """
        fms = feature_maps_from_batch(maps, self.backbone.spatial_stride)
        vectors = []
        sizes = []
        for fm, boxes in zip(fms, boxes_per_sample):
            for box in boxes:
                vectors.append(roi_pool_3d(fm, box, self.roi_cfg.pool_size).vector)
            sizes.append(len(boxes))
        if vectors:
            stacked = torch.stack(vectors)
        else:
            stacked = maps.new_zeros((0, self.backbone.out_channels))
        return stacked, sizes

    def forward(self, slow, fast, boxes_per_sample):
        maps = self.backbone(slow, fast)
        vectors, sizes = self.person_vectors(maps, boxes_per_sample)
        pose_logits, other_logits = self.head(vectors)
        return pose_logits, other_logits, sizes

    @torch.no_grad()
    def extract_person_features(self, video: VideoTensor, second: int,
                                detections) -> np.ndarray:
        """Frozen-weight feature vectors for the bank, [n, C] float32."""
        was_training = self.training
        self.eval()
        try:
            inputs = prepare_clip(video, second, detections, self.data_cfg)
            fm = self.backbone.feature_map(inputs.slow, inputs.fast)
            vecs = [roi_pool_3d(fm, box, self.roi_cfg.pool_size).vector
                    for box in inputs.boxes]
        finally:
            self.train(was_training)
        if not vecs:
            return np.zeros((0, self.feature_dim), dtype=np.float32)
        return torch.stack(vecs).detach().cpu().numpy().astype(np.float32)


class ThreeBranchModel(nn.Module):
    """Full detector: person branch, LFB attention branch, global branch."""

    def __init__(self, vocab: ActionVocabulary, data_cfg: DataConfig,
                 backbone_cfg: BackboneConfig, roi_cfg: RoIConfig,
                 fusion_cfg: FusionConfig, bank_dim: int):
        super().__init__()
        self.vocab = vocab
        self.data_cfg = data_cfg
        self.roi_cfg = roi_cfg
        self.fusion_cfg = fusion_cfg
        self.bank_dim = bank_dim
        self.backbone = SlowFastBackbone(backbone_cfg)
        c = self.backbone.out_channels
        self.short_pre = Preprocess(c, fusion_cfg.d_lfb, fusion_cfg.dropout)
        self.long_pre = Preprocess(bank_dim, fusion_cfg.d_lfb,
                                   fusion_cfg.dropout)
        self.lfb = LFBStack(fusion_cfg.d_lfb, fusion_cfg.d_attn,
                            fusion_cfg.num_blocks, fusion_cfg.dropout)
        self.use_global = fusion_cfg.use_global
        if self.use_global:
            self.global_proj = nn.Linear(c, fusion_cfg.d_global)
            self.scene_head = SceneHead(fusion_cfg.d_global, vocab.num_classes)
            d_fused = c + fusion_cfg.d_lfb + fusion_cfg.d_global
        else:
            d_fused = c + fusion_cfg.d_lfb
        self.head = ActionHead(d_fused, vocab, fusion_cfg.head_dropout)

    def init_from_stage1(self, tensors: dict[str, np.ndarray]):
        """Copy backbone weights (including running stats) from a stage-1
        checkpoint; fusion and head weights keep their fresh initialization."""
        own = self.backbone.state_dict()
        for name, param in own.items():
            key = f"backbone.{name}"
            if key not in tensors:
                raise KeyError(f"stage-1 checkpoint is missing {key}")
            src = torch.as_tensor(tensors[key]).reshape(param.shape)
            param.copy_(src.to(param.dtype))
        return self

    def person_vectors(self, maps, boxes_per_sample):
        fms = feature_maps_from_batch(maps, self.backbone.spatial_stride)
        vectors, sizes = [], []
        for fm, boxes in zip(fms, boxes_per_sample):
            for box in boxes:
                vectors.append(roi_pool_3d(fm, box, self.roi_cfg.pool_size).vector)
            sizes.append(len(boxes))
        if vectors:
            return torch.stack(vectors), sizes
        return maps.new_zeros((0, self.backbone.out_channels)), sizes

    def pooled_globals(self, maps):
        """Spatio-temporal average of each sample's fused map, [N, C]."""
        return maps.mean(dim=(2, 3, 4))

    def head_from_features(self, person_vecs, sizes, pooled, windows):
        """Trainable part of the forward pass, from cached branch inputs.

        person_vecs: [M, C] RoI vectors in sample order; sizes: boxes per
        sample; pooled: [N, C] global pools; windows: one BankWindow per
        sample. Returns (pose_logits, other_logits, scene_logits).
        """
        dtype = person_vecs.dtype
        lfb_parts = []
        offset = 0
        for i, n in enumerate(sizes):
            if n == 0:
                continue
            short = self.short_pre(person_vecs[offset:offset + n])
            w = windows[i]
            feats = torch.as_tensor(w.features, dtype=dtype)
            mask = torch.as_tensor(np.asarray(w.mask, dtype=bool))
            long = self.long_pre(feats, mask)
            lfb_parts.append(self.lfb(short, long, mask))
            offset += n
        if lfb_parts:
            lfb_out = torch.cat(lfb_parts)
        else:
            lfb_out = person_vecs.new_zeros((0, self.fusion_cfg.d_lfb))

        if self.use_global:
            reduced = self.global_proj(pooled)
            per_person = torch.repeat_interleave(
                reduced, torch.as_tensor(sizes), dim=0)
            fused = fuse(person_vecs, lfb_out, per_person)
            scene_logits = self.scene_head(reduced)
        else:
            fused = fuse(person_vecs, lfb_out)
            scene_logits = None
        pose_logits, other_logits = self.head(fused)
        return pose_logits, other_logits, scene_logits

    def forward(self, slow, fast, boxes_per_sample, windows):
        maps = self.backbone(slow, fast)
        person_vecs, sizes = self.person_vectors(maps, boxes_per_sample)
        pooled = self.pooled_globals(maps)
        pose, other, scene = self.head_from_features(person_vecs, sizes,
                                                     pooled, windows)
        return pose, other, scene, sizes
