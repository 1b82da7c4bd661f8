import csv
import math

import numpy as np
import pytest
import torch
from torch import nn

from diffspot.checkpoint import load_model, read_checkpoint, save_checkpoint
from diffspot.detnet import ArchConfig
from diffspot.errors import DivergenceDetected, InvalidConfig, ShapeMismatch
from diffspot.rcnn.model import DetectorConfig, DiffDetectorNet
from diffspot.structures import AlignedPair, DiffBox, Kind, SynthSample
from diffspot.synthgen import GenConfig, build_dataset
from diffspot.trainer import (
    HISTORY_FIELDS,
    MomentumSGD,
    TrainSchedule,
    augment_flip,
    desk_schedule,
    fit,
    flip_sample,
    init_weights,
    rescale_to_s,
    train,
    write_history,
)

SMALL_DET = DetectorConfig(anchor_scales=(16, 32, 64), min_proposal_size=4, pre_nms_train=300,
                           post_nms_train=50, pre_nms_test=300, post_nms_test=50)


def sample_with_box(h=40, w=100, box=(10, 5, 30, 25), seed=0):
    r = np.random.default_rng(seed)
    pair = AlignedPair(r.integers(0, 256, (h, w, 3), dtype=np.uint8), r.integers(0, 256, (h, w, 3), dtype=np.uint8),
                       pair_id="p")
    return SynthSample(pair, [DiffBox(*box)], Kind.LOCAL)


@pytest.fixture(scope="module")
def tiny_set():
    from diffspot.covers import make_same_pairs

    pairs = make_same_pairs(4, seed=11, height=96, width=80)
    samples, _ = build_dataset(pairs, GenConfig(magnification=1), seed=0)
    return samples


# -- schedule -------------------------------------------------------------------------------

def test_schedule_step_function():
    s = TrainSchedule()
    assert s.epochs == 14
    assert [s.lr_at(e) for e in range(14)] == [0.001] * 10 + [0.0001] * 4


@pytest.mark.parametrize("kwargs", [{"base_lr": 0}, {"epochs_at_base": -1}, {"input_scale": 0},
                                    {"epochs_at_drop": 1.5}])
def test_schedule_validation(kwargs):
    with pytest.raises(InvalidConfig):
        TrainSchedule(**kwargs)


def test_desk_schedule_split():
    s = desk_schedule(7, 0.01)
    assert (s.epochs_at_base, s.epochs_at_drop, s.base_lr, s.drop_lr) == (5, 2, 0.01, 0.001)


# -- initialisation ---------------------------------------------------------------------------

def test_xavier_moments():
    layer = nn.Linear(9, 9)
    model = nn.Sequential(*[nn.Linear(9, 9) for _ in range(124)])
    init_weights(model, "xavier_all", seed=0)
    values = torch.cat([m.weight.detach().flatten() for m in model]).numpy()
    assert values.size >= 10_000
    bound = math.sqrt(6 / 18)
    assert np.abs(values).max() <= bound
    assert abs(values.var() - 2 / 18) / (2 / 18) < 0.2
    assert layer.weight.shape == (9, 9)


def test_init_deterministic():
    a = init_weights(DiffDetectorNet(ArchConfig(1, "1/8"), SMALL_DET), seed=3)
    b = init_weights(DiffDetectorNet(ArchConfig(1, "1/8"), SMALL_DET), seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert a.initialized


def test_pretrained_shape_mismatch():
    full = init_weights(DiffDetectorNet(ArchConfig(3, "1/4"), SMALL_DET))
    arrays = {k: v.numpy() for k, v in full.state_dict().items()}
    half = DiffDetectorNet(ArchConfig(3, "1/8"), SMALL_DET)
    with pytest.raises(ShapeMismatch):
        init_weights(half, "pretrained_pre_concat", pretrained=arrays)


def test_pretrained_loads_pre_merge_only():
    src = init_weights(DiffDetectorNet(ArchConfig(3, "1/8"), SMALL_DET), seed=1)
    arrays = {k: v.numpy() for k, v in src.state_dict().items()}
    dst = init_weights(DiffDetectorNet(ArchConfig(3, "1/8"), SMALL_DET), "pretrained_pre_concat", 2, arrays)
    assert torch.equal(dst.backbone.branch.conv1.weight, src.backbone.branch.conv1.weight)
    assert not torch.equal(dst.backbone.trunk.conv3.weight, src.backbone.trunk.conv3.weight)


# -- flips and rescaling ----------------------------------------------------------------------

def test_flip_box_arithmetic():
    flipped = flip_sample(sample_with_box())
    assert flipped.boxes[0].as_tuple() == (70, 5, 90, 25)


def test_flip_involution_bit_exact():
    s = sample_with_box()
    twice = flip_sample(flip_sample(s))
    assert np.array_equal(twice.pair.design, s.pair.design)
    assert np.array_equal(twice.pair.photo, s.pair.photo)
    assert twice.boxes[0].as_tuple() == s.boxes[0].as_tuple()


def test_flip_fuzz_keeps_bounds(rng):
    s = sample_with_box()
    n_flipped = 0
    for _ in range(1000):
        out = augment_flip(s, rng)
        n_flipped += out is not s
        assert all(b.inside(out.pair.width, out.pair.height) for b in out.boxes)
    assert 400 < n_flipped < 600


def test_rescale_examples():
    s = rescale_to_s(sample_with_box(300, 400, (10, 20, 30, 40)), 600, 1000)
    assert (s.pair.height, s.pair.width) == (600, 800)
    assert s.boxes[0].as_tuple() == (20, 40, 60, 80)
    capped = rescale_to_s(sample_with_box(600, 1600, (0, 0, 1600, 600)), 600, 1000)
    assert (capped.pair.height, capped.pair.width) == (375, 1000)
    assert capped.boxes[0].as_tuple() == (0, 0, 1000, 375)
    fixed = sample_with_box(600, 900)
    assert rescale_to_s(fixed, 600, 1000) is fixed


# -- optimiser -----------------------------------------------------------------------------------

def test_momentum_closed_form():
    w = nn.Parameter(torch.tensor([2.0, -1.0], dtype=torch.float64))
    opt = MomentumSGD([w], momentum=0.9)
    g = torch.tensor([0.5, 0.25], dtype=torch.float64)
    v = torch.zeros(2, dtype=torch.float64)
    expected = w.detach().clone()
    for _ in range(3):
        w.grad = g.clone()
        opt.step(0.1)
        v = 0.9 * v - 0.1 * g
        expected = expected + v
    assert torch.allclose(w.detach(), expected, atol=1e-12)


def test_weight_decay_skips_biases():
    weight = nn.Parameter(torch.ones(2, 2))
    bias = nn.Parameter(torch.ones(2))
    opt = MomentumSGD([weight, bias], momentum=0.0, weight_decay=0.5)
    weight.grad, bias.grad = torch.zeros(2, 2), torch.zeros(2)
    opt.step(1.0)
    assert torch.allclose(weight, torch.full((2, 2), 0.5)) and torch.equal(bias.detach(), torch.ones(2))


# -- training loop ---------------------------------------------------------------------------------

def quick_schedule(epochs=1, **kw):
    return TrainSchedule(base_lr=0.001, drop_lr=0.0001, epochs_at_base=epochs, epochs_at_drop=0,
                         input_scale=80, max_side=128, **kw)


def test_zero_epochs_returns_init(tiny_set):
    model, history = train(tiny_set, ArchConfig(1, "1/8"), quick_schedule(0), seed=5, det_config=SMALL_DET)
    ref = init_weights(DiffDetectorNet(ArchConfig(1, "1/8"), SMALL_DET), seed=5)
    assert history == []
    for a, b in zip(model.state_dict().values(), ref.state_dict().values()):
        assert torch.equal(a, b)


def test_training_deterministic(tiny_set, tmp_path):
    _, h1 = train(tiny_set, ArchConfig(1, "1/8"), quick_schedule(2), seed=1, det_config=SMALL_DET,
                  checkpoint_dir=tmp_path)
    _, h2 = train(tiny_set, ArchConfig(1, "1/8"), quick_schedule(2), seed=1, det_config=SMALL_DET)
    assert h1 == h2
    assert len(h1) == 2 * len(tiny_set)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_001.ckpt", "epoch_002.ckpt"]
    assert set(HISTORY_FIELDS) <= set(h1[0])


def test_history_lr_matches_schedule(tiny_set, tmp_path):
    schedule = TrainSchedule(base_lr=0.002, drop_lr=0.0002, epochs_at_base=1, epochs_at_drop=1,
                             input_scale=80, max_side=128)
    _, history = train(tiny_set, ArchConfig(1, "1/8"), schedule, det_config=SMALL_DET)
    assert all(r["lr"] == schedule.lr_at(r["epoch"]) for r in history)
    path = tmp_path / "history.csv"
    write_history(history, path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == list(HISTORY_FIELDS)
    assert float(rows[-1]["lr"]) == 0.0002


def test_frozen_loss_order_invariant(tiny_set):
    from diffspot.trainer import detector_loss

    model = init_weights(DiffDetectorNet(ArchConfig(1, "1/8"), SMALL_DET), seed=0)

    def losses(order):
        out = {}
        for i in order:
            terms = detector_loss(model, tiny_set[i], np.random.default_rng(i))
            out[i] = float(sum(terms.values()).detach())
        return out

    n = len(tiny_set)
    assert losses(range(n)) == losses(reversed(range(n)))


def test_divergence_restores_good_state(tiny_set):
    model = init_weights(nn.Linear(2, 1), seed=0)
    model.initialized = True
    before = {k: v.clone() for k, v in model.state_dict().items()}
    calls = {"n": 0}

    def loss_fn(m, sample, rng):
        calls["n"] += 1
        out = m(torch.ones(1, 2)).sum()
        if calls["n"] == 3:
            out = out * float("nan")
        return {"total": out}

    with pytest.raises(DivergenceDetected) as info:
        fit(model, tiny_set[:4], loss_fn, quick_schedule(1, flip=False))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    assert len(info.value.history) == 2


def test_checkpoint_roundtrip(tmp_path):
    model = init_weights(DiffDetectorNet(ArchConfig(2, "1/8"), SMALL_DET), seed=4)
    path = save_checkpoint(model, tmp_path / "m.ckpt", {"note": "x"})
    manifest, arrays = read_checkpoint(path)
    assert manifest["model"]["arch"]["width_factor"] == "1/8"
    assert manifest["meta"] == {"note": "x"}
    raw = path.read_bytes()
    assert raw[:8] == b"DSPTCKPT"
    loaded, _ = load_model(path)
    for k, v in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)
    entry = manifest["tensors"][0]
    assert arrays[entry["name"]].dtype == np.float32


def test_accumulate_averages_gradients(tiny_set):
    samples = tiny_set[:4]

    def loss_fn(m, sample, rng):
        x = torch.tensor([[float(sample.pair.design.mean()) / 255, 1.0]])
        return {"total": (m(x) ** 2).sum()}

    schedule = TrainSchedule(base_lr=0.1, drop_lr=0.1, epochs_at_base=1, epochs_at_drop=0, weight_decay=0.0,
                             input_scale=80, max_side=128, flip=False, clip_norm=0.0)
    model = init_weights(nn.Linear(2, 1, bias=False), seed=0)
    start = model.weight.detach().clone()
    grads = []
    for s in samples:
        w = start.clone().requires_grad_(True)
        x = torch.tensor([[float(s.pair.design.mean()) / 255, 1.0]])
        ((x @ w.T) ** 2).sum().backward()
        grads.append(w.grad)
    fit(model, samples, loss_fn, schedule, accumulate=4)
    expected = start - 0.1 * torch.stack(grads).mean(0)
    assert torch.allclose(model.weight.detach(), expected, atol=1e-6)
