"""Box arithmetic, anchors, NMS and RPN target assignment (numpy)."""
from __future__ import annotations

import numpy as np

BBOX_CLIP = np.log(1000.0 / 16)


def _as_boxes(boxes):
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def box_area(boxes):
    b = _as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou(a, b):
    """IoU of two single boxes ``(x1, y1, x2, y2)``."""
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(a, b):
    a, b = _as_boxes(a), _as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(boxes, scores, threshold, max_keep=None):
    """Greedy NMS; returns kept indices in descending score order.

    A box is suppressed when its IoU with an already kept box exceeds
    ``threshold``.  Ties in score keep the lower index first.  ``max_keep``
    stops early once that many boxes are kept.
    """
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    x1, y1, x2, y2 = boxes.T
    areas = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        w = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        union = areas[i] + areas[rest] - inter
        overlap = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        order = rest[overlap <= threshold]
    return np.array(keep, dtype=np.int64)


def clip_boxes(boxes, width, height):
    b = _as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


def encode_boxes(anchors, targets):
    """Centre/log-size offsets ``(tx, ty, tw, th)`` of ``targets`` w.r.t. ``anchors``."""
    a, t = _as_boxes(anchors), _as_boxes(targets)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    ax, ay = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    tx, ty = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_boxes(anchors, offsets):
    a, d = _as_boxes(anchors), np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    ax, ay = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    cx, cy = d[:, 0] * aw + ax, d[:, 1] * ah + ay
    w = np.exp(np.minimum(d[:, 2], BBOX_CLIP)) * aw
    h = np.exp(np.minimum(d[:, 3], BBOX_CLIP)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor, target):
    return tuple(encode_boxes([anchor], [target])[0])


def decode_box(anchor, offsets):
    return tuple(decode_boxes([anchor], [offsets])[0])


def base_anchors(stride, scales, ratios):
    """Anchors centred on ``(stride/2, stride/2)``, ratio-major.

    ``ratio`` is height/width; every ratio keeps the ``scale**2`` area.
    """
    c = stride / 2.0
    out = []
    for ratio in ratios:
        for scale in scales:
            w = scale / np.sqrt(ratio)
            h = scale * np.sqrt(ratio)
            out.append([c - w / 2, c - h / 2, c + w / 2, c + h / 2])
    return np.array(out, dtype=np.float64)


def generate_anchors(feat_h, feat_w, stride, scales, ratios):
    """All anchors on a ``feat_h x feat_w`` grid, ordered (row, column, anchor)."""
    base = base_anchors(stride, scales, ratios)
    ys = np.arange(feat_h) * stride
    xs = np.arange(feat_w) * stride
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    shifts = np.stack([sx, sy, sx, sy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def assign_rpn_labels(anchors, gt_boxes, pos_iou, neg_iou, width=None, height=None, allowed_border=0):
    """Label anchors positive / negative / ignored and compute regression targets.

    Positive: IoU >= ``pos_iou`` with some gt box, or the best anchor for some
    gt box.  Negative: max IoU < ``neg_iou``.  When ``width``/``height`` are
    given, anchors crossing the image border by more than ``allowed_border``
    are ignored.  Returns ``(labels, targets, matched_gt_index)``.
    """
    anchors = _as_boxes(anchors)
    gt = _as_boxes(gt_boxes)
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    matched = np.full(n, -1, dtype=np.int64)
    inside = np.ones(n, dtype=bool)
    if width is not None and height is not None:
        inside = ((anchors[:, 0] >= -allowed_border) & (anchors[:, 1] >= -allowed_border)
                  & (anchors[:, 2] <= width + allowed_border) & (anchors[:, 3] <= height + allowed_border))
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return labels, targets, matched
    if len(gt) == 0:
        labels[idx] = NEGATIVE
        return labels, targets, matched

    overlaps = iou_matrix(anchors[idx], gt)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(idx)), best_gt]
    sub = np.full(len(idx), IGNORE, dtype=np.int64)
    sub[best_iou < neg_iou] = NEGATIVE
    gt_best = overlaps.max(axis=0)
    # every anchor tied for a gt box's best overlap counts
    is_best = (overlaps == gt_best[None, :]) & (gt_best[None, :] > 0)
    sub[is_best.any(axis=1)] = POSITIVE
    sub[best_iou >= pos_iou] = POSITIVE
    labels[idx] = sub
    pos = idx[sub == POSITIVE]
    matched[idx] = best_gt
    targets[pos] = encode_boxes(anchors[pos], gt[best_gt[sub == POSITIVE]])
    return labels, targets, matched


def subsample_labels(labels, batch_size, fg_fraction, rng):
    """Randomly disable surplus positives/negatives (set to IGNORE)."""
    labels = labels.copy()
    pos = np.flatnonzero(labels == POSITIVE)
    max_pos = int(fg_fraction * batch_size)
    if len(pos) > max_pos:
        labels[rng.choice(pos, len(pos) - max_pos, replace=False)] = IGNORE
    n_pos = int((labels == POSITIVE).sum())
    neg = np.flatnonzero(labels == NEGATIVE)
    max_neg = batch_size - n_pos
    if len(neg) > max_neg:
        labels[rng.choice(neg, len(neg) - max_neg, replace=False)] = IGNORE
    return labels


def sample_rois(proposals, gt_boxes, batch_size, fg_fraction, fg_iou, bg_hi, bg_lo, rng, bbox_stds=None):
    """Pick training RoIs for the detection head.

    Ground-truth boxes join the candidate pool.  Returns ``(rois, labels,
    targets)`` with labels 1 (difference) / 0 (background) and targets
    normalised by ``bbox_stds``.
    """
    gt = _as_boxes(gt_boxes)
    rois = np.vstack([_as_boxes(proposals), gt])
    if len(gt):
        overlaps = iou_matrix(rois, gt)
        best_gt = overlaps.argmax(axis=1)
        best_iou = overlaps.max(axis=1)
    else:
        best_gt = np.zeros(len(rois), dtype=np.int64)
        best_iou = np.zeros(len(rois))
    fg = np.flatnonzero(best_iou >= fg_iou)
    bg = np.flatnonzero((best_iou < bg_hi) & (best_iou >= bg_lo))
    n_fg = min(int(round(fg_fraction * batch_size)), len(fg))
    if len(fg) > n_fg:
        fg = rng.choice(fg, n_fg, replace=False)
    n_bg = min(batch_size - n_fg, len(bg))
    if len(bg) > n_bg:
        bg = rng.choice(bg, n_bg, replace=False)
    keep = np.concatenate([fg, bg]).astype(np.int64)
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[:len(fg)] = 1
    targets = np.zeros((len(keep), 4))
    if len(fg):
        targets[:len(fg)] = encode_boxes(rois[fg], gt[best_gt[fg]])
        if bbox_stds is not None:
            targets[:len(fg)] /= np.asarray(bbox_stds, dtype=np.float64)
    return rois[keep], labels, targets
