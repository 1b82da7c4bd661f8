"""Box-annotated training pairs from weakly labelled "same" pairs.

Two kinds of synthetic difference are produced:

* local: a patch of the design or the photo is copied elsewhere in the same
  image (with feathered edges and slight rescaling); its new location is the
  ground-truth box.  A colour-histogram gate rejects pastes that would look
  like their destination.
* global: a photo is paired with the design of a different cover; the whole
  image is the box.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .defaults import section
from .errors import EmptyRegion, GenerationExhausted, IdentityCollision, InvalidConfig
from .structures import AlignedPair, DiffBox, Kind, SynthSample, as_image

log = logging.getLogger(__name__)

_GEN = section("gen")

AREA_BUCKETS = np.linspace(0.0, 1.0, 11)


@dataclass(frozen=True)
class GenConfig:
    magnification: float = _GEN["magnification"]
    local_fraction: float = _GEN["local_fraction"]
    patch_min: float = _GEN["patch_min"]  # fraction of each image dimension
    patch_max: float = _GEN["patch_max"]
    blur_min: int = _GEN["blur_min"]  # feather width in px
    blur_max: int = _GEN["blur_max"]
    scale_min: float = _GEN["scale_min"]
    scale_max: float = _GEN["scale_max"]
    hist_bins: int = _GEN["hist_bins"]
    hist_threshold: float = _GEN["hist_threshold"]
    max_attempts: int = _GEN["max_attempts"]

    def __post_init__(self):
        if self.magnification < 0:
            raise InvalidConfig("magnification must be >= 0")
        if not 0.0 <= self.local_fraction <= 1.0:
            raise InvalidConfig("local_fraction must be in [0, 1]")
        if not 0.0 < self.patch_min < self.patch_max <= 1.0:
            raise InvalidConfig("need 0 < patch_min < patch_max <= 1")
        if self.hist_threshold <= 0:
            raise InvalidConfig("hist_threshold must be > 0")
        if self.blur_min > self.blur_max or self.scale_min > self.scale_max:
            raise InvalidConfig("disturbance ranges must be ordered")
        if self.max_attempts < 1:
            raise InvalidConfig("max_attempts must be >= 1")

    def to_dict(self):
        return asdict(self)


def color_histogram(region, bins=32):
    """Concatenated per-channel histograms, each normalised to sum to 1."""
    region = np.asarray(region)
    if region.ndim == 2:
        region = region[:, :, None]
    if region.size == 0:
        raise EmptyRegion("histogram of an empty region")
    flat = region.reshape(-1, region.shape[2])
    idx = (flat.astype(np.int64) * bins) // 256
    hists = [np.bincount(idx[:, c], minlength=bins) / flat.shape[0] for c in range(flat.shape[1])]
    return np.concatenate(hists)


def histogram_distance(a, b, bins=32):
    """L1 distance between the normalised colour histograms of two regions."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise EmptyRegion("histogram_distance needs non-empty regions")
    return float(np.abs(color_histogram(a, bins) - color_histogram(b, bins)).sum())


def _feather_mask(h, w, radius):
    r = max(1, min(int(radius), min(h, w) // 4))
    mask = np.zeros((h, w), np.float64)
    mask[r:h - r, r:w - r] = 1.0 if h > 2 * r and w > 2 * r else 0.0
    if not mask.any():
        mask[:] = 1.0
        return mask
    mask = cv2.GaussianBlur(mask, (0, 0), r / 2.0)
    # the blur pulls the centre below 1 on small patches
    return np.clip(mask / mask.max(), 0.0, 1.0)


def _patch_dims(dim, config, rng):
    lo = max(2, int(np.ceil(config.patch_min * dim)))
    hi = max(lo, int(np.floor(config.patch_max * dim)))
    return lo, hi, int(rng.integers(lo, hi + 1))


def synth_local_pair(same_pair, config=None, rng=None, sample_id=None):
    """Copy a patch of one image of ``same_pair`` somewhere else in that image."""
    config = config or GenConfig()
    rng = rng if rng is not None else np.random.default_rng()
    h, w = same_pair.height, same_pair.width
    target = "design" if rng.integers(2) == 0 else "photo"
    image = getattr(same_pair, target)

    for attempt in range(config.max_attempts):
        lo_w, hi_w, pw = _patch_dims(w, config, rng)
        lo_h, hi_h, ph = _patch_dims(h, config, rng)
        scale = rng.uniform(config.scale_min, config.scale_max)
        dw = int(np.clip(round(pw * scale), lo_w, min(hi_w, w)))
        dh = int(np.clip(round(ph * scale), lo_h, min(hi_h, h)))
        if pw > w or ph > h:
            continue
        sx, sy = int(rng.integers(0, w - pw + 1)), int(rng.integers(0, h - ph + 1))
        dx, dy = int(rng.integers(0, w - dw + 1)), int(rng.integers(0, h - dh + 1))
        if abs(dx - sx) < pw and abs(dy - sy) < ph:
            continue
        patch = image[sy:sy + ph, sx:sx + pw]
        dest = image[dy:dy + dh, dx:dx + dw]
        dist = histogram_distance(patch, dest, config.hist_bins)
        if dist <= config.hist_threshold:
            continue

        resized = cv2.resize(patch, (dw, dh), interpolation=cv2.INTER_LINEAR).reshape(dh, dw, 3)
        radius = rng.integers(config.blur_min, config.blur_max + 1)
        alpha = _feather_mask(dh, dw, radius)[:, :, None]
        edited = image.copy()
        blend = alpha * resized + (1.0 - alpha) * dest
        edited[dy:dy + dh, dx:dx + dw] = np.clip(np.rint(blend), 0, 255).astype(np.uint8)

        parts = {"design": same_pair.design, "photo": same_pair.photo, target: edited}
        pair = AlignedPair(parts["design"], parts["photo"], same_pair.transform,
                           sample_id if sample_id is not None else f"{same_pair.pair_id}_local")
        meta = {
            "target": target,
            "source_box": [sx, sy, sx + pw, sy + ph],
            "hist_distance": dist,
            "attempts": attempt + 1,
            "scale": float(scale),
            "feather": int(radius),
            "pre_paste": dest.copy(),
            "source_patch": patch.copy(),
        }
        return SynthSample(pair, [DiffBox(dx, dy, dx + dw, dy + dh)], Kind.LOCAL,
                           (same_pair.pair_id,), meta)
    raise GenerationExhausted(f"no accepted paste for {same_pair.pair_id!r} after {config.max_attempts} attempts")


def synth_global_pair(photo, wrong_design, photo_id=None, design_id=None, sample_id=None):
    """Pair a photo with the design of another cover; the box is the whole image.

    ``photo`` and ``wrong_design`` may be AlignedPairs (their ids are used) or
    bare images with explicit ids.
    """
    if isinstance(photo, AlignedPair):
        photo_id = photo.pair_id if photo_id is None else photo_id
        photo = photo.photo
    if isinstance(wrong_design, AlignedPair):
        design_id = wrong_design.pair_id if design_id is None else design_id
        wrong_design = wrong_design.design
    if photo_id is not None and photo_id == design_id:
        raise IdentityCollision(f"photo and design share pair id {photo_id!r}")
    photo = as_image(photo, "photo")
    wrong_design = as_image(wrong_design, "design")
    h, w = photo.shape[:2]
    resized = cv2.resize(wrong_design, (w, h), interpolation=cv2.INTER_AREA).reshape(h, w, -1)
    sid = sample_id if sample_id is not None else f"{photo_id}_x_{design_id}"
    pair = AlignedPair(resized, photo, pair_id=sid)
    return SynthSample(pair, [DiffBox(0, 0, w, h)], Kind.GLOBAL, (photo_id, design_id))


@dataclass
class DistributionReport:
    n_local: int = 0
    n_global: int = 0
    n_skipped: int = 0
    area_edges: list = field(default_factory=lambda: AREA_BUCKETS.tolist())
    area_hist_local: list = field(default_factory=lambda: [0] * 10)
    area_hist_global: list = field(default_factory=lambda: [0] * 10)
    seed: object = None
    config: dict = field(default_factory=dict)

    @property
    def area_hist(self):
        return [a + b for a, b in zip(self.area_hist_local, self.area_hist_global)]

    def modal_local_bucket(self):
        return int(np.argmax(self.area_hist_local))

    def to_dict(self):
        d = asdict(self)
        d["area_hist"] = self.area_hist
        return d


def area_bucket(fraction):
    return int(min(np.searchsorted(AREA_BUCKETS, fraction, side="right") - 1, 9))


def _sample_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _make_sample(index, n_local, same_pairs, config, seed):
    rng = _sample_rng(seed, index)
    sid = f"s{index:06d}"
    if index < n_local:
        src = same_pairs[int(rng.integers(len(same_pairs)))]
        return synth_local_pair(src, config, rng, sample_id=sid)
    if len({p.pair_id for p in same_pairs}) < 2:
        raise IdentityCollision("global pairs need at least two distinct identities")
    i = int(rng.integers(len(same_pairs)))
    j = int(rng.integers(len(same_pairs) - 1))
    j = j + 1 if j >= i else j
    while same_pairs[j].pair_id == same_pairs[i].pair_id:
        j = int(rng.integers(len(same_pairs)))
    return synth_global_pair(same_pairs[i], same_pairs[j], sample_id=sid)


def build_dataset(same_pairs, config=None, seed=0, workers=1):
    """Synthesise ``round(magnification * len(same_pairs))`` samples.

    The first ``round(n * local_fraction)`` indices are local pairs, the rest
    global.  Sample ``i`` depends only on ``(seed, i)``, so the result does not
    depend on ``workers``.  Samples that exhaust their attempts are skipped.
    """
    config = config or GenConfig()
    same_pairs = list(same_pairs)
    n = int(round(config.magnification * len(same_pairs)))
    report = DistributionReport(seed=seed, config=config.to_dict())
    if n == 0:
        return [], report
    if not same_pairs:
        raise ValueError("build_dataset needs same pairs when magnification > 0")
    n_local = int(round(n * config.local_fraction))

    def make(i):
        try:
            return _make_sample(i, n_local, same_pairs, config, seed)
        except (GenerationExhausted, IdentityCollision) as exc:
            log.warning("sample %d skipped: %s", i, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(make, range(n)))
    else:
        results = [make(i) for i in range(n)]

    samples = []
    for sample in results:
        if sample is None:
            report.n_skipped += 1
            continue
        samples.append(sample)
        frac = sample.boxes[0].area / (sample.pair.width * sample.pair.height)
        if sample.kind is Kind.LOCAL:
            report.n_local += 1
            report.area_hist_local[area_bucket(frac)] += 1
        else:
            report.n_global += 1
            report.area_hist_global[area_bucket(frac)] += 1
    return samples, report


# ---------------------------------------------------------------------------
# on-disk layout

def _write_png(path, image):
    ok = cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    if not ok:
        raise OSError(f"could not write {path}")


def read_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"could not read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _write_png(path, as_image(image))


def annotation_record(sample):
    return {
        "id": sample.sample_id,
        "kind": sample.kind.value,
        "boxes": [[_num(v) for v in b.as_tuple()] for b in sample.boxes],
        "width": sample.pair.width,
        "height": sample.pair.height,
    }


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def save_dataset(samples, directory, report=None):
    """Write samples in the ``pairs/`` + ``annotations.jsonl`` layout."""
    directory = Path(directory)
    (directory / "pairs").mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in sorted(samples, key=lambda s: s.sample_id):
        sid = sample.sample_id
        _write_png(directory / "pairs" / f"{sid}_design.png", sample.pair.design)
        _write_png(directory / "pairs" / f"{sid}_photo.png", sample.pair.photo)
        lines.append(json.dumps(annotation_record(sample), sort_keys=True))
    _atomic_write(directory / "annotations.jsonl", "".join(line + "\n" for line in lines))
    if report is not None:
        _atomic_write(directory / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def _atomic_write(path, text):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_dataset(directory, kinds=None):
    """Read a dataset directory back into SynthSamples (sorted by id)."""
    directory = Path(directory)
    samples = []
    with open(directory / "annotations.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = Kind(rec["kind"])
            if kinds is not None and kind not in kinds:
                continue
            sid = rec["id"]
            design = read_image(directory / "pairs" / f"{sid}_design.png")
            photo = read_image(directory / "pairs" / f"{sid}_photo.png")
            pair = AlignedPair(design, photo, pair_id=sid)
            boxes = [DiffBox(*b) for b in rec.get("boxes", [])]
            samples.append(SynthSample(pair, boxes, kind, (sid,)))
    return sorted(samples, key=lambda s: s.sample_id)


def same_samples(pairs):
    """Wrap weakly labelled same pairs as box-free samples."""
    return [SynthSample(p, [], Kind.SAME, (p.pair_id,)) for p in pairs]
