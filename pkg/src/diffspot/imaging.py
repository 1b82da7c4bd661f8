"""Registration of a cover photo to its digital design.

The pipeline is: subtract the belt background, find the cover quadrilateral,
cut the cover out, then fit an affine transform between local features of the
design and the cover and warp the design onto the photo frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from .defaults import section
from .errors import AlignmentFailed, DimensionMismatch, NoCoverFound
from .structures import AlignedPair, as_image

log = logging.getLogger(__name__)

_EDGE = section("edge")
_MATCH = section("match")


@dataclass(frozen=True)
class EdgeParams:
    blur_ksize: int = _EDGE["blur_ksize"]
    canny_low: float = _EDGE["canny_low"]
    canny_high: float = _EDGE["canny_high"]
    use_otsu: bool = _EDGE["use_otsu"]
    approx_epsilon: float = _EDGE["approx_epsilon"]  # fraction of contour perimeter
    min_area_fraction: float = _EDGE["min_area_fraction"]
    close_ksize: int = _EDGE["close_ksize"]


@dataclass(frozen=True)
class MatchParams:
    ratio: float = _MATCH["ratio"]
    ransac_iters: int = _MATCH["ransac_iters"]
    inlier_threshold: float = _MATCH["inlier_threshold"]
    min_inliers: int = _MATCH["min_inliers"]
    confidence: float = _MATCH["confidence"]
    max_features: int = _MATCH["max_features"]
    seed: int = _MATCH["seed"]


def subtract_background(photo, background):
    """Saturating per-pixel ``photo - background``."""
    photo = as_image(photo, "photo")
    background = as_image(background, "background")
    if photo.shape != background.shape:
        raise DimensionMismatch(f"photo {photo.shape} vs background {background.shape}")
    return cv2.subtract(photo, background).reshape(photo.shape)


def _gray(image):
    if image.shape[2] == 1:
        return image[:, :, 0]
    if image.shape[2] == 3:
        return cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
    raise DimensionMismatch(f"expected 1 or 3 channels, got {image.shape[2]}")


def order_corners(points):
    """Order 4 points clockwise starting from the top-left one."""
    pts = np.asarray(points, dtype=np.float64).reshape(4, 2)
    center = pts.mean(axis=0)
    angles = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    # image y points down, so increasing angle is clockwise on screen
    pts = pts[np.argsort(angles)]
    start = np.argmin(pts.sum(axis=1))
    return np.roll(pts, -start, axis=0)


def polygon_area(points):
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def extract_cover_quad(image, params=None):
    """Corners (4 x 2, clockwise from top-left) of the largest quadrilateral contour.

    Raises NoCoverFound if no 4-vertex contour covers at least
    ``params.min_area_fraction`` of the image.
    """
    params = params or EdgeParams()
    image = as_image(image)
    gray = _gray(image)
    h, w = gray.shape
    k = params.blur_ksize | 1
    smooth = cv2.GaussianBlur(gray, (k, k), 0)
    edges = cv2.Canny(smooth, params.canny_low, params.canny_high)
    if params.use_otsu:
        _, binary = cv2.threshold(smooth, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        if smooth.max() == smooth.min():
            binary = np.zeros_like(smooth)
        mask = cv2.bitwise_or(binary, edges)
    else:
        mask = edges
    if params.close_ksize > 1:
        kernel = np.ones((params.close_ksize, params.close_ksize), np.uint8)
        mask = cv2.morphologyEx(mask, cv2.MORPH_CLOSE, kernel)

    contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    min_area = params.min_area_fraction * h * w
    best, best_area = None, 0.0
    for contour in contours:
        area = cv2.contourArea(contour)
        if area < min_area or area <= best_area:
            continue
        hull = cv2.convexHull(contour)
        eps = params.approx_epsilon * cv2.arcLength(hull, True)
        poly = cv2.approxPolyDP(hull, eps, True)
        if len(poly) != 4:
            continue
        quad_area = polygon_area(poly.reshape(4, 2))
        if quad_area < min_area:
            continue
        best, best_area = poly.reshape(4, 2), area
    if best is None:
        raise NoCoverFound("no quadrilateral contour above the minimum area")
    quad = order_corners(best)
    quad[:, 0] = np.clip(quad[:, 0], 0, w - 1)
    quad[:, 1] = np.clip(quad[:, 1], 0, h - 1)
    return quad


def crop_cover(image, quad):
    """Cut the quadrilateral out as an upright rectangle.

    Uses the affine map fixed by the top-left, top-right and bottom-left
    corners; perspective is not corrected.
    """
    image = as_image(image)
    tl, tr, br, bl = np.asarray(quad, dtype=np.float64)
    out_w = int(round((np.linalg.norm(tr - tl) + np.linalg.norm(br - bl)) / 2)) + 1
    out_h = int(round((np.linalg.norm(bl - tl) + np.linalg.norm(br - tr)) / 2)) + 1
    src = np.float32([tl, tr, bl])
    dst = np.float32([[0, 0], [out_w - 1, 0], [0, out_h - 1]])
    matrix = cv2.getAffineTransform(src, dst)
    out = cv2.warpAffine(image, matrix, (out_w, out_h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return out.reshape(out_h, out_w, image.shape[2])


def warp_affine(image, transform, size):
    """Bilinear warp into a ``size = (width, height)`` frame, black outside."""
    image = as_image(image)
    out = cv2.warpAffine(image, np.asarray(transform, dtype=np.float64), tuple(size),
                         flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return out.reshape(size[1], size[0], image.shape[2])


def invert_affine(transform):
    return cv2.invertAffineTransform(np.asarray(transform, dtype=np.float64))


def compose_affine(outer, inner):
    """Affine equivalent to applying ``inner`` then ``outer``."""
    a = np.vstack([np.asarray(outer, dtype=np.float64), [0, 0, 1]])
    b = np.vstack([np.asarray(inner, dtype=np.float64), [0, 0, 1]])
    return (a @ b)[:2]


def apply_affine(transform, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(transform, dtype=np.float64)
    return pts @ t[:, :2].T + t[:, 2]


def image_corners(width, height):
    return np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)


def _features(gray, max_features):
    sift = cv2.SIFT_create(nfeatures=max_features)
    return sift.detectAndCompute(gray, None)


def estimate_affine(design, photo, params=None):
    """Affine transform (2 x 3) mapping design pixel coordinates onto the photo.

    Returns ``(transform, n_inliers)``.
    """
    params = params or MatchParams()
    kp_d, desc_d = _features(_gray(design), params.max_features)
    kp_p, desc_p = _features(_gray(photo), params.max_features)
    if desc_d is None or desc_p is None or len(kp_d) < 2 or len(kp_p) < 2:
        raise AlignmentFailed("not enough keypoints")

    matcher = cv2.BFMatcher(cv2.NORM_L2)
    knn = matcher.knnMatch(desc_d, desc_p, k=2)
    good = [m for m, n in (pair for pair in knn if len(pair) == 2) if m.distance < params.ratio * n.distance]
    if len(good) < params.min_inliers:
        raise AlignmentFailed(f"{len(good)} ratio-test matches < {params.min_inliers}")

    src = np.float32([kp_d[m.queryIdx].pt for m in good])
    dst = np.float32([kp_p[m.trainIdx].pt for m in good])
    # RANSAC draws from OpenCV's global RNG
    cv2.setRNGSeed(params.seed)
    transform, inliers = cv2.estimateAffine2D(
        src, dst, method=cv2.RANSAC, ransacReprojThreshold=params.inlier_threshold,
        maxIters=params.ransac_iters, confidence=params.confidence, refineIters=10,
    )
    n_inliers = 0 if inliers is None else int(inliers.sum())
    if transform is None or n_inliers < params.min_inliers:
        raise AlignmentFailed(f"{n_inliers} RANSAC inliers < {params.min_inliers}")
    if abs(np.linalg.det(transform[:, :2])) < 1e-6:
        raise AlignmentFailed("estimated transform is singular")
    return transform, n_inliers


def align_pair(design, photo_cover, params=None, pair_id=""):
    """Warp ``design`` onto the frame of ``photo_cover``.

    The returned pair has the photo's size; ``transform`` maps design
    coordinates to photo coordinates.
    """
    design = as_image(design, "design")
    photo_cover = as_image(photo_cover, "photo")
    if design.shape[2] != 3 or photo_cover.shape[2] != 3:
        raise DimensionMismatch("align_pair needs 3-channel images")
    transform, n_inliers = estimate_affine(design, photo_cover, params)
    log.debug("pair %s aligned with %d inliers", pair_id, n_inliers)
    h, w = photo_cover.shape[:2]
    warped = warp_affine(design, transform, (w, h))
    return AlignedPair(warped, photo_cover, transform, pair_id)


def register_photo(design, photo, background=None, edge_params=None, match_params=None, pair_id=""):
    """Full photo-side pipeline: background removal, cover cut-out, alignment."""
    photo = as_image(photo, "photo")
    if background is not None:
        photo = subtract_background(photo, background)
    quad = extract_cover_quad(photo, edge_params)
    cover = crop_cover(photo, quad)
    return align_pair(design, cover, match_params, pair_id)
