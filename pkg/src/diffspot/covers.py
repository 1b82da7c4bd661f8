"""Procedural book-cover renderer.

Stands in for the unreleased cover corpus: it draws a textured "digital
design" and simulates photographing it (illumination gradient, colour cast,
blur, sensor noise, sub-pixel drift).  Also places a cover on a dark belt for
exercising the alignment pipeline.
"""
from __future__ import annotations

import string

import cv2
import numpy as np

from .structures import AlignedPair

_FONTS = [
    cv2.FONT_HERSHEY_SIMPLEX,
    cv2.FONT_HERSHEY_DUPLEX,
    cv2.FONT_HERSHEY_COMPLEX,
    cv2.FONT_HERSHEY_TRIPLEX,
    cv2.FONT_HERSHEY_PLAIN,
]
_ALPHABET = string.ascii_uppercase + string.digits + "  "


def _color(rng):
    return tuple(int(c) for c in rng.integers(0, 256, size=3))


def make_cover(rng, height=256, width=192):
    """A random RGB cover design of the given size."""
    img = np.empty((height, width, 3), np.uint8)
    c0 = np.array(_color(rng), np.float64)
    c1 = np.array(_color(rng), np.float64)
    t = np.linspace(0.0, 1.0, height)[:, None, None]
    img[:] = np.clip(c0 * (1 - t) + c1 * t, 0, 255).astype(np.uint8)

    scale = min(height, width) / 256.0
    for _ in range(rng.integers(3, 7)):
        x1, x2 = sorted(rng.integers(0, width, size=2))
        y1, y2 = sorted(rng.integers(0, height, size=2))
        cv2.rectangle(img, (int(x1), int(y1)), (int(x2), int(y2)), _color(rng), -1)
    for _ in range(rng.integers(1, 4)):
        center = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        axes = (int(rng.integers(8, width // 3 + 9)), int(rng.integers(8, height // 3 + 9)))
        cv2.ellipse(img, center, axes, float(rng.uniform(0, 180)), 0, 360, _color(rng), -1)
    for _ in range(rng.integers(2, 6)):
        p1 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        p2 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        cv2.line(img, p1, p2, _color(rng), int(rng.integers(1, 4)))
    for _ in range(rng.integers(4, 10)):
        n = int(rng.integers(3, 12))
        text = "".join(rng.choice(list(_ALPHABET), size=n))
        font = _FONTS[int(rng.integers(len(_FONTS)))]
        font_scale = float(rng.uniform(0.35, 0.9)) * scale
        org = (int(rng.integers(0, max(1, width - 20))), int(rng.integers(12, height)))
        cv2.putText(img, text, org, font, font_scale, _color(rng), int(rng.integers(1, 3)), cv2.LINE_AA)
    return img


def photograph(design, rng, noise=(2.0, 5.0), blur=(0.3, 0.8), light=0.15, drift=0.5):
    """Simulate a camera capture of ``design`` (same size, still aligned)."""
    h, w = design.shape[:2]
    img = design.astype(np.float64)
    dx, dy = rng.uniform(-drift, drift, size=2)
    if drift > 0:
        m = np.float64([[1, 0, dx], [0, 1, dy]])
        img = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    gx, gy = rng.uniform(-light, light, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    illum = 1.0 + gx * (xx / max(w - 1, 1) - 0.5) + gy * (yy / max(h - 1, 1) - 0.5)
    gain = rng.uniform(0.9, 1.1, size=3)
    offset = rng.uniform(-10, 10, size=3)
    img = img * illum[:, :, None] * gain + offset
    sigma = rng.uniform(*blur)
    img = cv2.GaussianBlur(img, (0, 0), sigma)
    img = img + rng.normal(0.0, rng.uniform(*noise), size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_same_pair(rng, height=256, width=192, pair_id="", **photo_kw):
    design = make_cover(rng, height, width)
    return AlignedPair(design, photograph(design, rng, **photo_kw), pair_id=pair_id)


def make_same_pairs(n, seed=0, height=256, width=192, prefix="cover", **photo_kw):
    """``n`` independent same pairs; pair ``i`` depends only on ``(seed, i)``."""
    pairs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        pairs.append(make_same_pair(rng, height, width, pair_id=f"{prefix}{i:05d}", **photo_kw))
    return pairs


def belt_background(rng, height, width, level=25):
    """A dark, lightly textured conveyor belt."""
    base = rng.normal(level, 6.0, size=(height, width, 1))
    stripes = 4.0 * np.sin(np.arange(width)[None, :, None] / 3.0)
    return np.clip(base + stripes, 0, 255).astype(np.uint8).repeat(3, axis=2)


def render_on_belt(cover, rng, canvas=(480, 400), angle_range=10.0, background=None):
    """Place ``cover`` on a belt image.

    Returns ``(photo, background, quad)``; ``quad`` is the cover's corner
    positions in the photo (clockwise from top-left).
    """
    ch, cw = canvas
    if background is None:
        background = belt_background(rng, ch, cw)
    h, w = cover.shape[:2]
    angle = float(rng.uniform(-angle_range, angle_range))
    max_fit = min((cw - 20) / (w * 1.2), (ch - 20) / (h * 1.2), 1.0)
    scale = float(rng.uniform(0.8, 1.0)) * max_fit
    center = (cw / 2 + rng.uniform(-10, 10), ch / 2 + rng.uniform(-10, 10))
    rot = cv2.getRotationMatrix2D((w / 2, h / 2), angle, scale)
    rot[:, 2] += np.array(center) - np.array([w / 2, h / 2])
    shot = cv2.warpAffine(cover, rot, (cw, ch), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask = cv2.warpAffine(np.full((h, w), 255, np.uint8), rot, (cw, ch), flags=cv2.INTER_NEAREST)
    photo = np.where(mask[:, :, None] > 0, shot, 0).astype(np.int32) + background
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], np.float64)
    quad = corners @ rot[:, :2].T + rot[:, 2]
    return np.clip(photo, 0, 255).astype(np.uint8), background, quad
