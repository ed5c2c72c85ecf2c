"""Composite training objective.

Pose classes are mutually exclusive and use softmax cross-entropy; the
remaining multi-label classes use sigmoid focal loss to counter class
imbalance; an auxiliary scene term predicts the union of all actions in the
clip. The total is a weighted sum whose reported breakdown terms add up to
the scalar exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossConfig
from .data import ActionVocabulary, Detection


@dataclass
class TargetSet:
    """Per-person targets: one pose index plus binary non-pose labels."""

    pose_index: int                 # position within the pose logit group
    other_targets: np.ndarray       # binary over non-pose classes


def build_targets(detections: list[Detection], vocab: ActionVocabulary
                  ) -> tuple[list[TargetSet], np.ndarray]:
    """Targets for every labeled person plus the scene-union vector."""
    targets = []
    scene = np.zeros(vocab.num_classes, dtype=np.float64)
    non_pose = vocab.non_pose_list
    for det in detections:
        labels = det.labels or frozenset()
        for c in labels:
            if c < 0 or c >= vocab.num_classes:
                raise ValueError(f"label {c} outside vocabulary")
            scene[c] = 1.0
        pose_labels = sorted(labels & vocab.pose_ids)
        if len(pose_labels) != 1:
            raise ValueError(
                f"person must have exactly one pose action, got {pose_labels}")
        other = np.zeros(len(non_pose), dtype=np.float64)
        for j, c in enumerate(non_pose):
            if c in labels:
                other[j] = 1.0
        targets.append(TargetSet(pose_index=vocab.pose_index(pose_labels[0]),
                                 other_targets=other))
    return targets, scene


def focal_loss(logits, targets, gamma: float = 2.0, alpha: float = 0.25
               ) -> torch.Tensor:
    """Elementwise sigmoid focal loss -alpha_t (1 - p_t)^gamma log(p_t).

    p_t is the probability of the true label; alpha_t is alpha for positives
    and 1-alpha for negatives. Stabilized through log-sigmoid so large
    logits cannot overflow. With gamma=0 the modulating factor disappears:
    alpha=0.5 gives exactly half of plain binary cross-entropy, and alpha=1
    recovers it exactly on positive labels.
    """
    logits = torch.as_tensor(logits)
    y = torch.as_tensor(targets, dtype=logits.dtype, device=logits.device)
    log_pt = y * F.logsigmoid(logits) + (1.0 - y) * F.logsigmoid(-logits)
    one_minus_pt = y * torch.sigmoid(-logits) + (1.0 - y) * torch.sigmoid(logits)
    alpha_t = y * alpha + (1.0 - y) * (1.0 - alpha)
    return -alpha_t * one_minus_pt.pow(gamma) * log_pt


def binary_cross_entropy(logits, targets) -> torch.Tensor:
    """Elementwise BCE on logits, log-sigmoid stabilized."""
    logits = torch.as_tensor(logits)
    y = torch.as_tensor(targets, dtype=logits.dtype, device=logits.device)
    return -(y * F.logsigmoid(logits) + (1.0 - y) * F.logsigmoid(-logits))


def pose_loss(pose_logits, pose_target: int) -> torch.Tensor:
    """Softmax cross-entropy over the pose group, log-sum-exp stabilized."""
    logits = torch.as_tensor(pose_logits)
    n = logits.shape[-1]
    if not 0 <= int(pose_target) < n:
        raise ValueError(f"pose target {pose_target} outside the pose group")
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_probs[..., int(pose_target)].squeeze()


def scene_loss(scene_logits, scene_targets) -> torch.Tensor:
    """Mean per-class binary cross-entropy; no focal modulation."""
    return binary_cross_entropy(scene_logits, scene_targets).mean()


def total_loss(outputs, targets, cfg: LossConfig):
    """Weighted sum of the three terms with an exactly additive breakdown.

    ``outputs`` carries per-person (pose_logits [N, P], other_logits [N, Q])
    and optional scene_logits; ``targets`` carries the matching TargetSets
    and scene vector. Means over zero persons are defined as 0.
    """
    pose_logits, other_logits, scene_logits = outputs
    target_sets, scene_targets = targets
    n = len(target_sets)
    dtype = (pose_logits.dtype if isinstance(pose_logits, torch.Tensor)
             else torch.get_default_dtype())
    zero = torch.zeros((), dtype=dtype)

    if n:
        pose_terms = [pose_loss(pose_logits[i], t.pose_index)
                      for i, t in enumerate(target_sets)]
        pose_mean = torch.stack(pose_terms).mean()
        other_y = torch.stack([
            torch.as_tensor(t.other_targets, dtype=dtype) for t in target_sets])
        focal_mean = focal_loss(other_logits, other_y,
                                cfg.focal_gamma, cfg.focal_alpha).mean()
    else:
        pose_mean = zero
        focal_mean = zero

    if scene_logits is not None and cfg.global_loss_weight != 0.0:
        scene_term = cfg.global_loss_weight * scene_loss(scene_logits, scene_targets)
    else:
        scene_term = zero

    pose_term = cfg.pose_loss_weight * pose_mean
    total = pose_term + focal_mean + scene_term
    breakdown = {"pose": pose_term, "focal": focal_mean, "scene": scene_term}
    return total, breakdown
