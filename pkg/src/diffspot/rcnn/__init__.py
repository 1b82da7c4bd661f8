"""Region-based difference detection: boxes, anchors, RoI pooling, losses, model."""
from .boxes import (
    assign_rpn_labels,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
)
from .losses import detection_losses, smooth_l1
from .model import DetectorConfig, DiffDetectorNet, detect
from .roi import roi_pool

__all__ = [
    "assign_rpn_labels", "decode_box", "decode_boxes", "encode_box", "encode_boxes",
    "generate_anchors", "iou", "iou_matrix", "nms", "detection_losses", "smooth_l1",
    "DetectorConfig", "DiffDetectorNet", "detect", "roi_pool",
]
