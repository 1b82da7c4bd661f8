"""Two-stage difference detector over the merge-point backbone."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..defaults import section
from ..detnet import ArchConfig, Backbone, scaled
from ..errors import ModelNotTrained
from ..structures import AlignedPair, DiffBox, as_image
from . import boxes as B
from .losses import detection_losses
from .roi import roi_pool

_R = section("rcnn")


@dataclass(frozen=True)
class DetectorConfig:
    anchor_scales: tuple = tuple(_R["anchor_scales"])
    anchor_ratios: tuple = tuple(_R["anchor_ratios"])
    feat_stride: int = _R["feat_stride"]
    pos_iou: float = _R["pos_iou"]
    neg_iou: float = _R["neg_iou"]
    rpn_batch: int = _R["rpn_batch"]
    rpn_fg_fraction: float = _R["rpn_fg_fraction"]
    allowed_border: float = _R["allowed_border"]
    proposal_nms: float = _R["proposal_nms"]
    pre_nms_train: int = _R["pre_nms_train"]
    post_nms_train: int = _R["post_nms_train"]
    pre_nms_test: int = _R["pre_nms_test"]
    post_nms_test: int = _R["post_nms_test"]
    min_proposal_size: float = _R["min_proposal_size"]
    roi_batch: int = _R["roi_batch"]
    roi_fg_fraction: float = _R["roi_fg_fraction"]
    fg_iou: float = _R["fg_iou"]
    bg_iou_hi: float = _R["bg_iou_hi"]
    bg_iou_lo: float = _R["bg_iou_lo"]
    roi_size: int = _R["roi_size"]
    detection_nms: float = _R["detection_nms"]
    report_threshold: float = _R["report_threshold"]
    max_detections: int = _R["max_detections"]
    bbox_stds: tuple = tuple(_R["bbox_stds"])
    rpn_channels: int = _R["rpn_channels"]
    fc_channels: int = _R["fc_channels"]

    @property
    def num_anchors(self):
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def to_tensor(stacked):
    """H x W x 6 uint8 array -> 1 x 6 x H x W float tensor, roughly unit scale."""
    arr = np.ascontiguousarray(np.asarray(stacked, dtype=np.float32).transpose(2, 0, 1))
    return torch.from_numpy((arr - 127.5) / 64.0)[None]


def stacked_input(pair):
    if isinstance(pair, AlignedPair):
        return pair.stacked()
    return as_image(pair, "stacked pair")


class RPNHead(nn.Module):
    def __init__(self, in_channels, mid_channels, num_anchors):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.cls = nn.Conv2d(mid_channels, 2 * num_anchors, 1)
        self.reg = nn.Conv2d(mid_channels, 4 * num_anchors, 1)

    def forward(self, feats):
        x = F.relu(self.conv(feats))
        logits = self.cls(x)[0].permute(1, 2, 0).reshape(-1, 2)
        deltas = self.reg(x)[0].permute(1, 2, 0).reshape(-1, 4)
        return logits, deltas


class RoIHead(nn.Module):
    def __init__(self, in_channels, roi_size, fc_channels):
        super().__init__()
        self.fc6 = nn.Linear(in_channels * roi_size * roi_size, fc_channels)
        self.fc7 = nn.Linear(fc_channels, fc_channels)
        self.cls = nn.Linear(fc_channels, 2)
        self.reg = nn.Linear(fc_channels, 4)

    def forward(self, pooled):
        x = F.relu(self.fc6(pooled.flatten(1)))
        x = F.relu(self.fc7(x))
        return self.cls(x), self.reg(x)


class DiffDetectorNet(nn.Module):
    """Backbone + region proposal network + RoI classification head.

    Weights start unusable: ``initialized`` is set by the trainer's weight
    initialisation or by loading a checkpoint.
    """

    def __init__(self, arch: ArchConfig, det: DetectorConfig | None = None):
        super().__init__()
        self.arch = arch
        self.det = det or DetectorConfig()
        self.backbone = Backbone(arch)
        c = self.backbone.out_channels
        self.rpn = RPNHead(c, scaled(self.det.rpn_channels, arch.width_factor), self.det.num_anchors)
        self.head = RoIHead(c, self.det.roi_size, scaled(self.det.fc_channels, arch.width_factor))
        self.initialized = False

    def spec(self):
        return {"kind": "detector", "arch": self.arch.to_dict(), "det": self.det.to_dict()}

    @classmethod
    def from_spec(cls, spec):
        return cls(ArchConfig.from_dict(spec["arch"]), DetectorConfig.from_dict(spec["det"]))

    # -- shared pieces -------------------------------------------------------
    def anchors_for(self, feats):
        d = self.det
        return B.generate_anchors(feats.shape[2], feats.shape[3], d.feat_stride, d.anchor_scales, d.anchor_ratios)

    def propose(self, logits, deltas, anchors, width, height, pre_nms, post_nms):
        scores = torch.softmax(logits.detach(), dim=1)[:, 1].double().numpy()
        boxes = B.clip_boxes(B.decode_boxes(anchors, deltas.detach().double().numpy()), width, height)
        ws, hs = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
        ok = np.flatnonzero((ws >= self.det.min_proposal_size) & (hs >= self.det.min_proposal_size))
        boxes, scores = boxes[ok], scores[ok]
        order = np.lexsort((np.arange(len(scores)), -scores))[:pre_nms]
        boxes, scores = boxes[order], scores[order]
        keep = B.nms(boxes, scores, self.det.proposal_nms, max_keep=post_nms)
        return boxes[keep], scores[keep]

    def _head(self, feats, rois):
        pooled = roi_pool(feats[0], rois, self.det.roi_size, 1.0 / self.det.feat_stride)
        return self.head(pooled)

    # -- training ------------------------------------------------------------
    def loss_terms(self, x, gt_boxes, rng):
        """Four loss terms for one image pair (approximate joint training)."""
        d = self.det
        height, width = x.shape[2], x.shape[3]
        gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        feats = self.backbone(x)
        logits, deltas = self.rpn(feats)
        anchors = self.anchors_for(feats)

        labels, targets, _ = B.assign_rpn_labels(anchors, gt, d.pos_iou, d.neg_iou, width, height, d.allowed_border)
        labels = B.subsample_labels(labels, d.rpn_batch, d.rpn_fg_fraction, rng)

        proposals, _ = self.propose(logits, deltas, anchors, width, height, d.pre_nms_train, d.post_nms_train)
        rois, roi_labels, roi_targets = B.sample_rois(
            proposals, gt, d.roi_batch, d.roi_fg_fraction, d.fg_iou, d.bg_iou_hi, d.bg_iou_lo, rng, d.bbox_stds)
        head_logits, head_deltas = self._head(feats, rois)
        return detection_losses(
            logits, deltas, torch.from_numpy(labels), torch.from_numpy(targets).float(),
            head_logits, head_deltas, torch.from_numpy(roi_labels), torch.from_numpy(roi_targets).float(),
        )

    # -- inference -----------------------------------------------------------
    @torch.no_grad()
    def detect_tensor(self, x):
        """Boxes (N x 4) and scores (N,) on the network-input scale."""
        if not self.initialized:
            raise ModelNotTrained("detector weights are not initialised")
        d = self.det
        height, width = x.shape[2], x.shape[3]
        feats = self.backbone(x)
        logits, deltas = self.rpn(feats)
        anchors = self.anchors_for(feats)
        proposals, _ = self.propose(logits, deltas, anchors, width, height, d.pre_nms_test, d.post_nms_test)
        if len(proposals) == 0:
            return np.zeros((0, 4)), np.zeros(0)
        head_logits, head_deltas = self._head(feats, proposals)
        scores = torch.softmax(head_logits, dim=1)[:, 1].double().numpy()
        offsets = head_deltas.double().numpy() * np.asarray(d.bbox_stds)
        boxes = B.clip_boxes(B.decode_boxes(proposals, offsets), width, height)
        ok = np.flatnonzero((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]))
        boxes, scores = boxes[ok], scores[ok]
        keep = B.nms(boxes, scores, d.detection_nms)
        keep = keep[scores[keep] >= d.report_threshold][:d.max_detections]
        return boxes[keep], scores[keep]


def detect(model, pair, scale=1.0):
    """Run the detector on an aligned pair; returns DiffBoxes sorted by score.

    ``scale`` resizes the input before the network (boxes are mapped back).
    """
    stacked = stacked_input(pair)
    h, w = stacked.shape[:2]
    if scale != 1.0:
        nh, nw = int(round(h * scale)), int(round(w * scale))
        halves = [cv2.resize(stacked[:, :, i:i + 3], (nw, nh), interpolation=cv2.INTER_LINEAR) for i in (0, 3)]
        stacked = np.concatenate(halves, axis=2)
    was_training = model.training
    model.eval()
    try:
        boxes, scores = model.detect_tensor(to_tensor(stacked))
    finally:
        model.train(was_training)
    boxes = B.clip_boxes(boxes / scale, w, h)
    out = []
    for box, score in zip(boxes, scores):
        if box[2] > box[0] and box[3] > box[1]:
            out.append(DiffBox(*(float(v) for v in box), score=float(np.clip(score, 0.0, 1.0))))
    return out
