"""Overlays for detections and occlusion maps."""
from __future__ import annotations

import cv2
import numpy as np

from .structures import as_image


def draw_boxes(image, boxes, color=(0, 0, 255), thickness=2):
    """Copy of ``image`` with each DiffBox outlined and labelled with its score."""
    out = as_image(image).copy()
    for box in boxes:
        p1 = (int(round(box.x1)), int(round(box.y1)))
        p2 = (int(round(box.x2)) - 1, int(round(box.y2)) - 1)
        cv2.rectangle(out, p1, p2, color, thickness)
        cv2.putText(out, f"{box.score:.2f}", (p1[0] + 2, p1[1] + 12), cv2.FONT_HERSHEY_SIMPLEX, 0.4, color, 1)
    return out


def heatmap_image(grid, image, alpha=0.5):
    """Blend a colour-mapped occlusion grid, stretched to the image size, over ``image``."""
    image = as_image(image)
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    norm = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    small = np.rint(norm * 255).astype(np.uint8)
    h, w = image.shape[:2]
    heat = cv2.applyColorMap(cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR), cv2.COLORMAP_JET)
    return cv2.addWeighted(image[:, :, :3], 1 - alpha, heat, alpha, 0)
