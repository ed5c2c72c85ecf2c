"""Independent reference implementations used to cross-check the package.

Everything here is written the slow, obvious way (python loops, exact
rational arithmetic, explicit finite differences) so a bug in the fast
implementation cannot hide in a shared code path.
"""

import math
from fractions import Fraction

import numpy as np
import torch


# ---------------------------------------------------------------------------
# RoI pooling


def roi_pool_oracle(values, box, out_size):
    """Brute-force 3D RoI pool on a [T, H, W, C] array.

    Quantization: floor the start edge, ceil the stop edge, clamp to the
    map; every output bin covers at least one cell; ties inside a max go to
    the cell that comes first in row-major (y, x) order, mirroring numpy's
    argmax. Returns a [C] vector.
    """
    vals = np.asarray(values, dtype=np.float64)
    t, h, w, c = vals.shape
    x1, y1, x2, y2 = box
    x0 = min(max(int(math.floor(x1 * w)), 0), w - 1)
    xe = min(max(int(math.ceil(x2 * w)), x0 + 1), w)
    y0 = min(max(int(math.floor(y1 * h)), 0), h - 1)
    ye = min(max(int(math.ceil(y2 * h)), y0 + 1), h)

    def edges(start, stop, bins):
        n = stop - start
        out = []
        for b in range(bins):
            lo = start + (b * n) // bins
            hi = start + -((-(b + 1) * n) // bins)
            if hi <= lo:
                hi = lo + 1
            out.append((lo, min(hi, stop)))
        return out

    ybins = edges(y0, ye, out_size)
    xbins = edges(x0, xe, out_size)

    bin_vectors = []
    for ylo, yhi in ybins:
        for xlo, xhi in xbins:
            # temporal mean of the per-slice first-tie max over cells
            per_slice = np.empty((t, c))
            for ti in range(t):
                best = None
                for yy in range(ylo, yhi):
                    for xx in range(xlo, xhi):
                        cell = vals[ti, yy, xx]
                        if best is None:
                            best = cell.copy()
                        else:
                            for ci in range(c):
                                if cell[ci] > best[ci]:
                                    best[ci] = cell[ci]
                per_slice[ti] = best
            bin_vectors.append(per_slice.mean(axis=0))
    stacked = np.stack(bin_vectors)
    out = stacked[0].copy()
    for vec in stacked[1:]:
        for ci in range(c):
            if vec[ci] > out[ci]:
                out[ci] = vec[ci]
    return out


# ---------------------------------------------------------------------------
# Attention


def _linear_np(x, layer):
    w = layer.weight.detach().cpu().numpy().astype(np.float64)
    b = layer.bias.detach().cpu().numpy().astype(np.float64)
    return x @ w.T + b


def _layer_norm_np(x, layer):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # biased, as torch uses
    y = (x - mean) / np.sqrt(var + layer.eps)
    w = layer.weight.detach().cpu().numpy().astype(np.float64)
    b = layer.bias.detach().cpu().numpy().astype(np.float64)
    return y * w + b


def lfb_block_oracle(short, long, mask, block):
    """Numpy re-derivation of one attention block in eval mode."""
    s = np.asarray(short, dtype=np.float64)
    l = np.asarray(long, dtype=np.float64)
    q = _linear_np(s, block.q_proj)
    k = _linear_np(l, block.k_proj)
    v = _linear_np(l, block.v_proj)
    scores = q @ k.T / math.sqrt(block.d_attn)
    if mask is None:
        valid = np.ones(l.shape[0], dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
    if valid.any():
        scores = np.where(valid[None, :], scores, -np.inf)
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        weights = e / e.sum(axis=1, keepdims=True)
        attended = weights @ v
    else:
        attended = np.zeros_like(s)
    out = s + _linear_np(attended, block.out_proj)
    return _layer_norm_np(out, block.norm)


# ---------------------------------------------------------------------------
# Average precision


def _iou_frac(a, b):
    ax1, ay1, ax2, ay2 = (Fraction(v).limit_denominator(10**9) for v in a)
    bx1, by1, bx2, by2 = (Fraction(v).limit_denominator(10**9) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def average_precision_oracle(preds, gts, iou_thr=0.5):
    """All-point interpolated AP for one class, exact rationals.

    preds: list of (video_id, second, box, score); gts: list of
    (video_id, second, box). Predictions sort by descending score with
    (video_id, second, box) as the deterministic tiebreak; each one greedily
    matches the unmatched ground truth with the highest IoU >= iou_thr at the
    same (video_id, second), earlier annotations winning exact IoU ties.
    """
    if not gts:
        return None
    order = sorted(preds, key=lambda p: (-p[3], p[0], p[1], p[2]))
    matched = [False] * len(gts)
    flags = []
    thr = Fraction(iou_thr).limit_denominator(10**9)
    for vid, sec, box, _ in order:
        best_i, best_iou = -1, Fraction(-1)
        for gi, (gvid, gsec, gbox) in enumerate(gts):
            if matched[gi] or gvid != vid or gsec != sec:
                continue
            ov = _iou_frac(box, gbox)
            if ov >= thr and ov > best_iou:
                best_i, best_iou = gi, ov
        if best_i >= 0:
            matched[best_i] = True
            flags.append(True)
        else:
            flags.append(False)
    total = Fraction(0)
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
            # interpolated precision: best precision at any rank >= this one
            best = Fraction(0)
            running_tp = sum(flags[:rank])
            for r2 in range(rank, len(flags) + 1):
                if r2 > rank:
                    running_tp += flags[r2 - 1]
                prec = Fraction(running_tp, r2)
                if prec > best:
                    best = prec
            total += best
    return total / len(gts)


def frame_map_oracle(preds_by_class, gts_by_class, iou_thr=0.5):
    """Mean of per-class oracle APs over classes that have ground truth."""
    aps = {}
    for cls, gts in gts_by_class.items():
        if not gts:
            continue
        aps[cls] = average_precision_oracle(
            preds_by_class.get(cls, []), gts, iou_thr)
    if not aps:
        return None, {}
    mean = sum(aps.values()) / len(aps)
    return mean, aps


# ---------------------------------------------------------------------------
# Finite differences


def fd_gradient(fn, tensor, eps=1e-6):
    """Central-difference gradient of a scalar function, same shape as input."""
    flat = tensor.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(flat.reshape(tensor.shape))
        flat[i] = orig - eps
        lo = fn(flat.reshape(tensor.shape))
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(tensor.shape)


def fd_probe_param(fn, param, index, eps=1e-6):
    """Central difference for one scalar entry of a parameter tensor."""
    with torch.no_grad():
        flat = param.reshape(-1)
        orig = flat[index].item()
        flat[index] = orig + eps
        hi = float(fn())
        flat[index] = orig - eps
        lo = float(fn())
        flat[index] = orig
    return (hi - lo) / (2 * eps)
