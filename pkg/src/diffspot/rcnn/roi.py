"""Max RoI pooling.

Bins follow the classic integer-grid rule: the proposal is projected onto the
feature map with ``spatial_scale`` and rounded, its extent (at least one cell)
is split into ``out x out`` bins with floor/ceil boundaries, and each bin takes
the maximum over its cells.  Empty bins output 0.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _bin_edges(start, length, out, limit):
    """Integer ``[lo, hi)`` edges per bin, clipped to ``[0, limit]``."""
    size = length / out
    idx = np.arange(out)
    lo = np.floor(idx[None, :] * size[:, None]).astype(np.int64) + start[:, None]
    hi = np.ceil((idx[None, :] + 1) * size[:, None]).astype(np.int64) + start[:, None]
    return np.clip(lo, 0, limit), np.clip(hi, 0, limit)


def roi_bins(rois, spatial_scale, out_size, feat_h, feat_w):
    """Row and column bin edges for each RoI: four ``(R, out)`` int arrays."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x1 = np.round(rois[:, 0] * spatial_scale).astype(np.int64)
    y1 = np.round(rois[:, 1] * spatial_scale).astype(np.int64)
    x2 = np.round(rois[:, 2] * spatial_scale).astype(np.int64)
    y2 = np.round(rois[:, 3] * spatial_scale).astype(np.int64)
    # x2/y2 are treated as inclusive cell indices
    w = np.maximum(x2 - x1 + 1, 1).astype(np.float64)
    h = np.maximum(y2 - y1 + 1, 1).astype(np.float64)
    ylo, yhi = _bin_edges(y1, h, out_size, feat_h)
    xlo, xhi = _bin_edges(x1, w, out_size, feat_w)
    return ylo, yhi, xlo, xhi



def _roi_cells(rois, spatial_scale):
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x1 = np.round(rois[:, 0] * spatial_scale).astype(np.int64)
    y1 = np.round(rois[:, 1] * spatial_scale).astype(np.int64)
    x2 = np.round(rois[:, 2] * spatial_scale).astype(np.int64)
    y2 = np.round(rois[:, 3] * spatial_scale).astype(np.int64)
    return x1, y1, np.maximum(x2 - x1 + 1, 1), np.maximum(y2 - y1 + 1, 1)


def roi_pool(features, rois, out_size=6, spatial_scale=1.0 / 16):
    """Pool ``features`` (C x H x W tensor or array) over each RoI.

    Returns an ``(R, C, out, out)`` tensor (array for array input); gradients
    flow to ``features``.  Adaptive max pooling uses the same floor/ceil bin
    edges, so each RoI is cut from a map padded with a sentinel that marks
    cells outside the features.
    """
    as_numpy = isinstance(features, np.ndarray)
    feats = torch.as_tensor(features)
    if feats.dim() == 4:
        if feats.shape[0] != 1:
            raise ValueError("roi_pool takes a single feature map")
        feats = feats[0]
    c, h, w = feats.shape
    x1, y1, rw, rh = _roi_cells(rois, spatial_scale)
    if len(x1) == 0:
        out = feats.new_zeros((0, c, out_size, out_size))
        return out.numpy() if as_numpy else out
    left = int(max(0, -x1.min()))
    top = int(max(0, -y1.min()))
    right = int(max(0, (x1 + rw).max() - w))
    bottom = int(max(0, (y1 + rh).max() - h))
    sentinel = torch.finfo(feats.dtype).min
    padded = F.pad(feats, (left, right, top, bottom), value=sentinel) if left or right or top or bottom else feats
    pooled = torch.stack([
        F.adaptive_max_pool2d(padded[:, y + top:y + top + hh, x + left:x + left + ww], out_size)
        for x, y, ww, hh in zip(x1.tolist(), y1.tolist(), rw.tolist(), rh.tolist())
    ])
    pooled = torch.where(pooled == sentinel, torch.zeros((), dtype=feats.dtype), pooled)
    return pooled.detach().numpy() if as_numpy else pooled


def roi_pool_reference(features, rois, out_size=6, spatial_scale=1.0 / 16):
    """Loop implementation of the same binning rule, for checking."""
    feats = np.asarray(features)
    c, h, w = feats.shape
    ylo, yhi, xlo, xhi = roi_bins(rois, spatial_scale, out_size, h, w)
    out = np.zeros((len(ylo), c, out_size, out_size), dtype=feats.dtype)
    for r in range(len(ylo)):
        for i in range(out_size):
            for j in range(out_size):
                cell = feats[:, ylo[r, i]:yhi[r, i], xlo[r, j]:xhi[r, j]]
                if cell.size:
                    out[r, :, i, j] = cell.reshape(c, -1).max(axis=1)
    return out
