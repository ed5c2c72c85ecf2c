"""Scaled-down two-pathway 3D convolutional feature extractor.

A slow pathway (few frames, wide channels) and a fast pathway (many frames,
thin channels) run in parallel; time-strided lateral convolutions fuse fast
into slow before every stage, and the two outputs are channel-concatenated
into a single spatio-temporal feature map. The final stage keeps spatial
stride 1 with dilation 2 by default, which halves the output stride of the
equivalent stride-2 design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig


@dataclass
class FeatureMap:
    """Backbone output: values [T, H, W, C] plus input pixels per cell."""

    values: torch.Tensor
    spatial_stride: int

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError("feature map must be [T, H, W, C]")

    @property
    def shape(self):
        return tuple(self.values.shape)


def global_pool(fm: FeatureMap) -> torch.Tensor:
    """Spatio-temporal average over all cells; the global clip feature."""
    return fm.values.mean(dim=(0, 1, 2))


class ResBlock3d(nn.Module):
    """3x3x3 conv + pointwise conv with a projected residual shortcut."""

    def __init__(self, c_in, c_out, spatial_stride=1, spatial_dilation=1,
                 bn_momentum=0.1):
        super().__init__()
        stride = (1, spatial_stride, spatial_stride)
        dilation = (1, spatial_dilation, spatial_dilation)
        padding = (1, spatial_dilation, spatial_dilation)
        self.conv1 = nn.Conv3d(c_in, c_out, (3, 3, 3), stride=stride,
                               padding=padding, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm3d(c_out, momentum=bn_momentum)
        self.conv2 = nn.Conv3d(c_out, c_out, 1, bias=False)
        self.bn2 = nn.BatchNorm3d(c_out, momentum=bn_momentum)
        if c_in != c_out or spatial_stride != 1:
            self.proj = nn.Conv3d(c_in, c_out, 1, stride=stride, bias=False)
            self.proj_bn = nn.BatchNorm3d(c_out, momentum=bn_momentum)
        else:
            self.proj = None

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        if self.proj is not None:
            x = self.proj_bn(self.proj(x))
        return F.relu(x + y)


class LateralFuse(nn.Module):
    """Time-strided conv from the fast pathway, concatenated into slow."""

    def __init__(self, c_fast, alpha, bn_momentum=0.1):
        super().__init__()
        self.conv = nn.Conv3d(c_fast, 2 * c_fast, (alpha, 1, 1),
                              stride=(alpha, 1, 1), bias=False)
        self.bn = nn.BatchNorm3d(2 * c_fast, momentum=bn_momentum)
        self.out_channels = 2 * c_fast

    def forward(self, slow, fast):
        return torch.cat([slow, F.relu(self.bn(self.conv(fast)))], dim=1)


class NonLocalBlock(nn.Module):
    """Scaled dot-product self-attention over all cells with residual add.

    out = x + softmax(Q(x) K(x)^T / sqrt(d_qk)) V(x), attention taken over
    every spatio-temporal position. All projections are bias-free 1x1x1
    convolutions, so a zero value projection makes the block an exact
    identity.
    """

    def __init__(self, channels, qk_dim):
        super().__init__()
        self.qk_dim = qk_dim
        self.q = nn.Conv3d(channels, qk_dim, 1, bias=False)
        self.k = nn.Conv3d(channels, qk_dim, 1, bias=False)
        self.v = nn.Conv3d(channels, channels, 1, bias=False)

    def forward(self, x):
        n, c, t, h, w = x.shape
        q = self.q(x).reshape(n, self.qk_dim, -1)
        k = self.k(x).reshape(n, self.qk_dim, -1)
        v = self.v(x).reshape(n, c, -1)
        attn = torch.einsum("ndq,ndk->nqk", q, k) * (self.qk_dim ** -0.5)
        attn = F.softmax(attn, dim=2)
        out = torch.einsum("nqk,nck->ncq", attn, v).reshape(n, c, t, h, w)
        return x + out


class SlowFastBackbone(nn.Module):
    """Two-pathway residual 3D network producing one fused feature map."""

    def __init__(self, cfg: BackboneConfig, in_channels=3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self._norm_frozen = False
        sw = cfg.stem_width
        fw = cfg.fast_width(sw)
        ss = cfg.stem_stride
        self.slow_stem = nn.Sequential(
            nn.Conv3d(in_channels, sw, (1, 5, 5), stride=(1, ss, ss),
                      padding=(0, 2, 2), bias=False),
            nn.BatchNorm3d(sw, momentum=cfg.bn_momentum),
            nn.ReLU(),
        )
        self.fast_stem = nn.Sequential(
            nn.Conv3d(in_channels, fw, (5, 5, 5), stride=(1, ss, ss),
                      padding=(2, 2, 2), bias=False),
            nn.BatchNorm3d(fw, momentum=cfg.bn_momentum),
            nn.ReLU(),
        )
        self.laterals = nn.ModuleList()
        self.slow_stages = nn.ModuleList()
        self.fast_stages = nn.ModuleList()
        slow_c, fast_c = sw, fw
        n_stages = len(cfg.stage_channels)
        for i, c in enumerate(cfg.stage_channels):
            lat = LateralFuse(fast_c, cfg.alpha, cfg.bn_momentum)
            self.laterals.append(lat)
            last = i == n_stages - 1
            stride = cfg.res5_stride if last else cfg.stage_strides[i]
            dilation = cfg.res5_dilation if last else 1
            fc = cfg.fast_width(c)
            self.slow_stages.append(
                ResBlock3d(slow_c + lat.out_channels, c, stride, dilation,
                           cfg.bn_momentum))
            self.fast_stages.append(
                ResBlock3d(fast_c, fc, stride, dilation, cfg.bn_momentum))
            slow_c, fast_c = c, fc
        self.nonlocal_block = (
            NonLocalBlock(slow_c + fast_c, cfg.nonlocal_qk_dim)
            if cfg.use_nonlocal else None
        )
        self.out_channels = slow_c + fast_c
        self.spatial_stride = cfg.spatial_stride

    def set_norm_frozen(self, frozen: bool = True):
        """Frozen mode: normalization uses running statistics only."""
        self._norm_frozen = frozen
        if frozen:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm3d):
                    m.eval()
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        if self._norm_frozen:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm3d):
                    m.eval()
        return self

    def forward(self, slow: torch.Tensor, fast: torch.Tensor) -> torch.Tensor:
        """[N, 3, T_slow, H, W] + [N, 3, T_fast, H, W] -> [N, C, T_slow, H', W']."""
        if slow.ndim != 5 or fast.ndim != 5:
            raise ValueError("pathway inputs must be [N, C, T, H, W]")
        if fast.shape[2] != self.cfg.alpha * slow.shape[2]:
            raise ValueError("fast pathway must have alpha * T_slow frames")
        if slow.shape[-2:] != fast.shape[-2:]:
            raise ValueError("pathways must share spatial size")
        s = self.slow_stem(slow)
        f = self.fast_stem(fast)
        for lat, sstage, fstage in zip(self.laterals, self.slow_stages,
                                       self.fast_stages):
            s = sstage(lat(s, f))
            f = fstage(f)
        fused = torch.cat([s, f[:, :, :: self.cfg.alpha]], dim=1)
        if self.nonlocal_block is not None:
            fused = self.nonlocal_block(fused)
        return fused

    def feature_map(self, slow_frames, fast_frames) -> FeatureMap:
        """Single-sample forward on [T, H, W, 3] arrays -> FeatureMap."""
        dtype = next(self.parameters()).dtype
        s = _to_nc_thw(slow_frames, dtype)
        f = _to_nc_thw(fast_frames, dtype)
        out = self.forward(s, f)[0]  # [C, T, H, W]
        return FeatureMap(values=out.permute(1, 2, 3, 0),
                          spatial_stride=self.spatial_stride)


def _to_nc_thw(frames, dtype) -> torch.Tensor:
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames))
    return frames.to(dtype).permute(3, 0, 1, 2).unsqueeze(0)


def forward_backbone(slow_frames, fast_frames, cfg_or_model) -> FeatureMap:
    """Functional wrapper: build (or reuse) a backbone and run one sample."""
    model = (cfg_or_model if isinstance(cfg_or_model, SlowFastBackbone)
             else SlowFastBackbone(cfg_or_model))
    return model.feature_map(slow_frames, fast_frames)


def feature_maps_from_batch(out: torch.Tensor, spatial_stride: int) -> list[FeatureMap]:
    """Split a batched backbone output [N, C, T, H, W] into FeatureMaps."""
    return [FeatureMap(values=out[i].permute(1, 2, 3, 0),
                       spatial_stride=spatial_stride)
            for i in range(out.shape[0])]
