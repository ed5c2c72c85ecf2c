"""Three-branch fusion: LFB attention over the bank, concatenation, heads.

Short-term person features attend over the long-term window through stacked
scaled dot-product blocks with residual connection and layer normalization.
Both attention inputs are pre-processed by dropout and dimension reduction.
The person, attention and global features are concatenated (not summed) and
classified by two logit groups: softmax pose classes and sigmoid multi-label
classes; a separate sigmoid head predicts every action in the scene.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ActionVocabulary


class Preprocess(nn.Module):
    """Dimension reduction then dropout; masked slots stay exactly zero."""

    def __init__(self, d_in, d_out, dropout=0.0):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        y = self.dropout(self.linear(x))
        if mask is not None:
            y = y * mask.to(y.dtype).unsqueeze(-1)
        return y


class LFBBlock(nn.Module):
    """One long-term feature bank attention block.

    For each short-term query q over valid long-term slots l:
    weights = softmax(Q(q) . K(l) / sqrt(d_attn)), attended = sum weights V(l),
    output = LayerNorm(q + OutProj(dropout(attended))). A fully masked window
    contributes a zero attended value, so boundary seconds still train.
    """

    def __init__(self, d, d_attn, dropout=0.0):
        super().__init__()
        self.d_attn = d_attn
        self.q_proj = nn.Linear(d, d_attn)
        self.k_proj = nn.Linear(d, d_attn)
        self.v_proj = nn.Linear(d, d_attn)
        self.out_proj = nn.Linear(d_attn, d)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(d)
        # start with near-uniform attention: bank features are unnormalized
        # activations, and full-scale q/k projections would make the initial
        # softmax collapse onto arbitrary slots, hiding the window average
        # from the classifier until attention unlearns the collapse
        with torch.no_grad():
            self.q_proj.weight.mul_(0.1)
            self.k_proj.weight.mul_(0.1)

    def attention_scores(self, short, long):
        """Pre-softmax scaled dot products [S, L]."""
        q = self.q_proj(short)
        k = self.k_proj(long)
        return q @ k.T / math.sqrt(self.d_attn)

    def forward(self, short, long, mask=None):
        if short.shape[-1] != long.shape[-1]:
            raise ValueError("short and long feature widths differ")
        scores = self.attention_scores(short, long)
        if mask is not None:
            valid = torch.as_tensor(mask, dtype=torch.bool, device=scores.device)
            any_valid = bool(valid.any())
            if not any_valid:
                attended = torch.zeros_like(short)
                return self.norm(short + self.out_proj(self.dropout(attended)))
            scores = scores.masked_fill(~valid.unsqueeze(0), float("-inf"))
        weights = F.softmax(scores, dim=1)
        attended = weights @ self.v_proj(long)
        return self.norm(short + self.out_proj(self.dropout(attended)))


def lfb_block(short, long, mask, block: LFBBlock):
    return block(short, long, mask)


class LFBStack(nn.Module):
    """Sequential LFB blocks; the long features stay fixed across blocks."""

    def __init__(self, d, d_attn, num_blocks=2, dropout=0.0):
        super().__init__()
        self.blocks = nn.ModuleList(
            LFBBlock(d, d_attn, dropout) for _ in range(num_blocks))

    def forward(self, short, long, mask=None):
        out = short
        for block in self.blocks:
            out = block(out, long, mask)
        return out


def lfb_stack(short, long, mask, blocks) -> torch.Tensor:
    out = short
    for block in blocks:
        out = block(out, long, mask)
    return out


def fuse(person: torch.Tensor, lfb_out: torch.Tensor,
         global_feat: torch.Tensor | None = None) -> torch.Tensor:
    """Exact concatenation in (person, lfb, global) order."""
    parts = [person, lfb_out] + ([] if global_feat is None else [global_feat])
    return torch.cat(parts, dim=-1)


def split_fused(fused: torch.Tensor, dims: tuple[int, ...]):
    """Inverse of fuse at recorded offsets."""
    if sum(dims) != fused.shape[-1]:
        raise ValueError("dims do not sum to the fused width")
    return torch.split(fused, list(dims), dim=-1)


class ActionHead(nn.Module):
    """Final classifier: dropout then two logit groups split by pose ids."""

    def __init__(self, d_in, vocab: ActionVocabulary, dropout=0.5):
        super().__init__()
        self.vocab = vocab
        self.num_pose = len(vocab.pose_list)
        self.num_other = len(vocab.non_pose_list)
        self.dropout = nn.Dropout(dropout)
        self.pose_fc = nn.Linear(d_in, self.num_pose)
        self.other_fc = nn.Linear(d_in, self.num_other)

    def forward(self, fused):
        x = self.dropout(fused)
        return self.pose_fc(x), self.other_fc(x)


def action_head(fused, vocab: ActionVocabulary, head: ActionHead):
    if head.vocab.num_classes != vocab.num_classes or \
            head.vocab.pose_ids != vocab.pose_ids:
        raise ValueError("vocabulary does not match the head")
    return head(fused)


class SceneHead(nn.Module):
    """Per-class sigmoid classifier over the global clip feature."""

    def __init__(self, d_in, num_classes):
        super().__init__()
        self.fc = nn.Linear(d_in, num_classes)

    def forward(self, global_feat):
        return self.fc(global_feat)
