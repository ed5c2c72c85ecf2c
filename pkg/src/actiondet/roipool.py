"""3D RoI pooling: per-frame 2D max pooling, temporal average, spatial max.

2D RoI pooling is replicated along the temporal axis; the pooled grid is
averaged over time and max-reduced over space, yielding one feature vector
per person box. Coordinate quantization uses floor for starts and ceil for
ends with at least one cell per bin. Max ties route to the first cell in
row-major order so the backward pass is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backbone import FeatureMap

Box = tuple[float, float, float, float]


@dataclass
class RoIFeature:
    vector: torch.Tensor
    source: tuple[str, int, Box] | None = None


def box_to_cells(box: Box, height: int, width: int) -> tuple[int, int, int, int]:
    """Map a normalized box to half-open feature-cell extents (x0, x1, y0, y1)."""
    x1, y1, x2, y2 = box
    x0 = math.floor(x1 * width)
    xe = math.ceil(x2 * width)
    y0 = math.floor(y1 * height)
    ye = math.ceil(y2 * height)
    x0 = min(max(x0, 0), width - 1)
    y0 = min(max(y0, 0), height - 1)
    xe = min(max(xe, x0 + 1), width)
    ye = min(max(ye, y0 + 1), height)
    return x0, xe, y0, ye


def bin_edges(start: int, stop: int, bins: int) -> list[tuple[int, int]]:
    """Split [start, stop) into `bins` sub-ranges of at least one cell."""
    n = stop - start
    edges = []
    for b in range(bins):
        lo = start + (b * n) // bins
        hi = start + -((-(b + 1) * n) // bins)  # ceil((b+1)*n/bins)
        if hi <= lo:
            hi = lo + 1
        edges.append((lo, min(hi, stop)))
    return edges


def _first_max(chunk: torch.Tensor) -> torch.Tensor:
    """Max over cells [T, cells, C] routing ties to the first cell."""
    idx = chunk.argmax(dim=1, keepdim=True)
    return chunk.gather(1, idx).squeeze(1)


def roi_pool_3d(fm: FeatureMap, box: Box, out_size: int = 7,
                source: tuple[str, int] | None = None) -> RoIFeature:
    """Pool a person box from a feature map into one C-vector."""
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    x1, y1, x2, y2 = box
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ValueError(f"box {box} outside [0, 1] or degenerate")
    t, h, w, c = fm.values.shape
    x0, xe, y0, ye = box_to_cells(box, h, w)
    xbins = bin_edges(x0, xe, out_size)
    ybins = bin_edges(y0, ye, out_size)
    pooled = []
    for ylo, yhi in ybins:
        for xlo, xhi in xbins:
            chunk = fm.values[:, ylo:yhi, xlo:xhi, :].reshape(t, -1, c)
            pooled.append(_first_max(chunk))          # [T, C] per bin
    grid = torch.stack(pooled, dim=0)                 # [P*P, T, C]
    temporal_avg = grid.mean(dim=1)                   # [P*P, C]
    vector = _spatial_max(temporal_avg)
    src = None if source is None else (source[0], source[1], box)
    return RoIFeature(vector=vector, source=src)


def _spatial_max(grid: torch.Tensor) -> torch.Tensor:
    """Max over the P*P bins [bins, C] with first-bin tie routing."""
    idx = grid.argmax(dim=0, keepdim=True)
    return grid.gather(0, idx).squeeze(0)


def roi_batch(fm: FeatureMap, detections, out_size: int = 7) -> list[RoIFeature]:
    """Order-preserving roi_pool_3d over a detection list."""
    out = []
    for i, det in enumerate(detections):
        try:
            out.append(roi_pool_3d(fm, det.box, out_size,
                                   source=(det.video_id, det.second)))
        except ValueError as e:
            raise ValueError(f"detection {i}: {e}") from None
    return out
