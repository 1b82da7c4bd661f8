import json

import numpy as np
import pytest

from diffspot.errors import EmptyRegion, GenerationExhausted, IdentityCollision, InvalidConfig
from diffspot.structures import AlignedPair, Kind
from diffspot.synthgen import (
    GenConfig,
    area_bucket,
    build_dataset,
    color_histogram,
    histogram_distance,
    load_dataset,
    save_dataset,
    synth_global_pair,
    synth_local_pair,
)


def hand_histogram(region, bins=32):
    """Per-pixel loop oracle for the normalised concatenated histogram."""
    region = np.asarray(region)
    h, w, c = region.shape
    out = np.zeros(bins * c)
    for i in range(h):
        for j in range(w):
            for k in range(c):
                out[k * bins + int(region[i, j, k]) * bins // 256] += 1
    return out / (h * w)


# -- histograms ------------------------------------------------------------------

def test_histogram_identity(rng):
    a = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    assert histogram_distance(a, a) == 0.0


def test_histogram_red_vs_blue():
    red = np.zeros((5, 5, 3), np.uint8)
    red[..., 0] = 255
    blue = np.zeros((5, 5, 3), np.uint8)
    blue[..., 2] = 255
    expected = np.abs(hand_histogram(red) - hand_histogram(blue)).sum()
    assert expected == pytest.approx(4.0)
    assert histogram_distance(red, blue) == pytest.approx(expected, abs=1e-12)


def test_histogram_nearest_upscale_is_zero(rng):
    a = rng.integers(0, 256, (7, 9, 3), dtype=np.uint8)
    big = a.repeat(2, axis=0).repeat(2, axis=1)
    assert histogram_distance(a, big) == pytest.approx(0.0, abs=1e-12)


def test_histogram_matches_loop_oracle(rng):
    a = rng.integers(0, 256, (6, 8, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (9, 4, 3), dtype=np.uint8)
    assert np.allclose(color_histogram(a), hand_histogram(a))
    expected = np.abs(hand_histogram(a) - hand_histogram(b)).sum()
    assert histogram_distance(a, b) == pytest.approx(expected, abs=1e-12)


def test_histogram_empty_region():
    with pytest.raises(EmptyRegion):
        histogram_distance(np.zeros((0, 3, 3), np.uint8), np.zeros((2, 2, 3), np.uint8))


# -- local pairs --------------------------------------------------------------------

def test_local_pair_box_inside_and_sized(same_pairs):
    config = GenConfig()
    for i, pair in enumerate(same_pairs):
        s = synth_local_pair(pair, config, np.random.default_rng(i))
        assert s.kind is Kind.LOCAL and len(s.boxes) == 1
        b = s.boxes[0]
        assert b.inside(pair.width, pair.height)
        bw, bh = b.x2 - b.x1, b.y2 - b.y1
        assert np.ceil(config.patch_min * pair.width) <= bw <= np.floor(config.patch_max * pair.width)
        assert np.ceil(config.patch_min * pair.height) <= bh <= np.floor(config.patch_max * pair.height)


def test_local_pair_edits_one_image_inside_box(same_pairs):
    pair = same_pairs[0]
    s = synth_local_pair(pair, GenConfig(), np.random.default_rng(5))
    target = s.meta["target"]
    other = "photo" if target == "design" else "design"
    assert np.array_equal(getattr(s.pair, other), getattr(pair, other))
    changed = np.any(getattr(s.pair, target) != getattr(pair, target), axis=2)
    x1, y1, x2, y2 = (int(v) for v in s.boxes[0].as_tuple())
    outside = changed.copy()
    outside[y1:y2, x1:x2] = False
    assert changed.any() and not outside.any()


def test_local_pair_uniform_image_exhausts():
    flat = np.full((64, 64, 3), 90, np.uint8)
    with pytest.raises(GenerationExhausted):
        synth_local_pair(AlignedPair(flat, flat, pair_id="flat"), GenConfig(), np.random.default_rng(0))


def test_checkerboard_identical_cell_rejected():
    # cells of 16 px; with patch and destination both a single cell-aligned
    # 16 x 16 square, every candidate is a single colour, so only
    # opposite-colour destinations pass the gate
    board = ((np.indices((64, 64)).sum(axis=0) // 16) % 2 * 255).astype(np.uint8)
    img = np.dstack([board] * 3)
    black, white = img[0:16, 0:16], img[0:16, 16:32]
    assert histogram_distance(black, img[16:32, 16:32]) == 0.0
    assert histogram_distance(black, white) == pytest.approx(
        np.abs(hand_histogram(black) - hand_histogram(white)).sum())
    config = GenConfig(patch_min=0.25, patch_max=0.26, scale_min=1.0, scale_max=1.0, max_attempts=200)
    for seed in range(10):
        s = synth_local_pair(AlignedPair(img, img, pair_id="cb"), config, np.random.default_rng(seed))
        patch, dest = s.meta["source_patch"], s.meta["pre_paste"]
        assert histogram_distance(patch, dest) == pytest.approx(
            np.abs(hand_histogram(patch) - hand_histogram(dest)).sum())
        assert histogram_distance(patch, dest) > config.hist_threshold


def test_local_gate_holds_for_every_sample(same_pairs):
    samples, _ = build_dataset(same_pairs, GenConfig(magnification=3), seed=1)
    local = [s for s in samples if s.kind is Kind.LOCAL]
    assert local
    for s in local:
        d = np.abs(hand_histogram(s.meta["source_patch"]) - hand_histogram(s.meta["pre_paste"])).sum()
        assert d > GenConfig().hist_threshold


# -- global pairs -------------------------------------------------------------------

def test_global_pair_resizes_design():
    photo = np.zeros((600, 800, 3), np.uint8)
    design = np.full((512, 512, 3), 200, np.uint8)
    s = synth_global_pair(photo, design, "a", "b")
    assert s.pair.design.shape == (600, 800, 3)
    assert s.boxes[0].as_tuple() == (0, 0, 800, 600)
    assert s.kind is Kind.GLOBAL and s.source_ids == ("a", "b")


def test_global_pair_identity_collision():
    img = np.zeros((10, 10, 3), np.uint8)
    with pytest.raises(IdentityCollision):
        synth_global_pair(img, img, "same", "same")


def test_global_pair_random_sizes(rng):
    for _ in range(20):
        ph, pw, dh, dw = rng.integers(8, 200, 4)
        s = synth_global_pair(np.zeros((ph, pw, 3), np.uint8), np.zeros((dh, dw, 3), np.uint8), "p", "d")
        assert s.pair.design.shape == (ph, pw, 3)
        assert s.boxes[0].as_tuple() == (0, 0, pw, ph)


# -- datasets -------------------------------------------------------------------------

def test_build_dataset_counts(same_pairs):
    samples, report = build_dataset(same_pairs[:10], GenConfig(magnification=2), seed=0)
    assert len(samples) == 20
    n_local = sum(s.kind is Kind.LOCAL for s in samples)
    assert abs(n_local - round(20 * 2 / 3)) <= 1
    assert report.n_local == n_local and report.n_global == 20 - n_local


def test_build_dataset_empty(same_pairs):
    samples, report = build_dataset(same_pairs, GenConfig(magnification=0))
    assert samples == [] and report.n_local == report.n_global == 0


def test_global_samples_use_distinct_identities(same_pairs):
    samples, _ = build_dataset(same_pairs, GenConfig(magnification=2, local_fraction=0.0), seed=4)
    for s in samples:
        assert s.source_ids[0] != s.source_ids[1]
        assert s.boxes[0].as_tuple() == (0, 0, s.pair.width, s.pair.height)


def test_build_dataset_deterministic_and_worker_independent(same_pairs, tmp_path):
    a, ra = build_dataset(same_pairs, GenConfig(), seed=9)
    b, rb = build_dataset(same_pairs, GenConfig(), seed=9, workers=4)
    save_dataset(a, tmp_path / "a", ra)
    save_dataset(b, tmp_path / "b", rb)
    for name in ("annotations.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for s, t in zip(a, b):
        assert np.array_equal(s.pair.stacked(), t.pair.stacked())


def test_build_dataset_seed_changes_samples(same_pairs):
    a, _ = build_dataset(same_pairs, GenConfig(), seed=1)
    b, _ = build_dataset(same_pairs, GenConfig(), seed=2)
    assert len(a) == len(b)
    assert any(s.boxes[0].as_tuple() != t.boxes[0].as_tuple() for s, t in zip(a, b))


def test_dataset_roundtrip(same_pairs, tmp_path):
    samples, report = build_dataset(same_pairs[:4], GenConfig(magnification=1.5), seed=2)
    save_dataset(samples, tmp_path, report)
    back = load_dataset(tmp_path)
    assert [s.sample_id for s in back] == sorted(s.sample_id for s in samples)
    by_id = {s.sample_id: s for s in samples}
    for s in back:
        orig = by_id[s.sample_id]
        assert np.array_equal(s.pair.stacked(), orig.pair.stacked())
        assert [b.as_tuple() for b in s.boxes] == [b.as_tuple() for b in orig.boxes]
        assert s.kind == orig.kind
    rec = json.loads((tmp_path / "annotations.jsonl").read_text().splitlines()[0])
    assert set(rec) >= {"id", "kind", "boxes", "width", "height"}
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["seed"] == 2 and "area_hist" in rep


def test_area_buckets():
    assert area_bucket(0.0) == 0 and area_bucket(0.099) == 0
    assert area_bucket(0.1) == 1 and area_bucket(1.0) == 9


@pytest.mark.parametrize("kwargs", [
    {"magnification": -1}, {"local_fraction": 1.5}, {"patch_min": 0.5, "patch_max": 0.2},
    {"hist_threshold": 0}, {"max_attempts": 0},
])
def test_genconfig_validation(kwargs):
    with pytest.raises(InvalidConfig):
        GenConfig(**kwargs)
