"""Learned verification baselines: a Siamese embedding and a 6-channel classifier."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .defaults import section
from .detnet import ArchConfig, Backbone, _make_layers, parse_width, scaled
from .errors import ModelNotTrained
from .rcnn.model import stacked_input, to_tensor
from .trainer import TrainSchedule, fit, init_weights, rescale_to_s

_B = section("baselines")


def contrastive_loss(d, y, margin=_B["margin"]):
    """``(1 - y) d^2 + y max(0, margin - d)^2``; y = 0 same, 1 different.

    Works on floats, numpy arrays and tensors.
    """
    if torch.is_tensor(d):
        y = torch.as_tensor(y, dtype=d.dtype)
        return (1 - y) * d ** 2 + y * torch.clamp(margin - d, min=0) ** 2
    d = np.asarray(d, dtype=np.float64)
    return (1 - y) * d ** 2 + y * np.maximum(0.0, margin - d) ** 2


def contrastive_grad(d, y, margin=_B["margin"]):
    """Closed-form ``dL/dd`` of :func:`contrastive_loss`."""
    d = np.asarray(d, dtype=np.float64)
    return 2 * (1 - y) * d - 2 * y * np.maximum(0.0, margin - d)


class SiameseNet(nn.Module):
    """Shared 3-channel backbone -> pooled conv5 -> linear embedding (L2-normalised)."""

    def __init__(self, width=1, embedding_dim=_B["embedding_dim"], pool_size=_B["pool_size"], margin=_B["margin"]):
        super().__init__()
        self.width = parse_width(width)
        self.embedding_dim = embedding_dim
        self.pool_size = pool_size
        self.margin = margin
        arch = ArchConfig(1, self.width)
        self.features, out_c = _make_layers(arch.scaled_blocks(), 3)
        self.pool = nn.AdaptiveMaxPool2d(pool_size)
        self.project = nn.Linear(out_c * pool_size * pool_size, embedding_dim)
        self.initialized = False

    def spec(self):
        return {"kind": "siamese", "width": str(self.width), "embedding_dim": self.embedding_dim,
                "pool_size": self.pool_size, "margin": self.margin}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["width"], spec["embedding_dim"], spec["pool_size"], spec["margin"])

    def embed(self, x3):
        z = self.project(self.pool(self.features(x3)).flatten(1))
        return F.normalize(z, dim=1)

    def forward(self, x6):
        return torch.linalg.vector_norm(self.embed(x6[:, :3]) - self.embed(x6[:, 3:]), dim=1)


class SixChannelNet(nn.Module):
    """Early-merge backbone -> max pool to a fixed grid -> fc -> fc -> 2-way logits."""

    def __init__(self, width=1, pool_size=_B["pool_size"], fc_channels=4096):
        super().__init__()
        self.width = parse_width(width)
        self.pool_size = pool_size
        self.fc_channels = fc_channels
        self.backbone = Backbone(ArchConfig(1, self.width))
        hidden = scaled(fc_channels, self.width)
        self.pool = nn.AdaptiveMaxPool2d(pool_size)
        self.fc6 = nn.Linear(self.backbone.out_channels * pool_size * pool_size, hidden)
        self.fc_out = nn.Linear(hidden, 2)
        self.initialized = False

    def spec(self):
        return {"kind": "classify6", "width": str(self.width), "pool_size": self.pool_size,
                "fc_channels": self.fc_channels}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["width"], spec["pool_size"], spec["fc_channels"])

    def forward(self, x6):
        x = self.pool(self.backbone(x6)).flatten(1)
        return self.fc_out(F.relu(self.fc6(x)))


def _check(model):
    if not model.initialized:
        raise ModelNotTrained(f"{type(model).__name__} weights are not initialised")


@torch.no_grad()
def siamese_distance(model, pair):
    """Euclidean distance between the embeddings of the design and the photo."""
    _check(model)
    model.eval()
    stacked = stacked_input(pair)
    x = to_tensor(stacked)
    za, zb = model.embed(x[:, :3]), model.embed(x[:, 3:])
    return float(torch.linalg.vector_norm((za - zb).double()))


@torch.no_grad()
def sixchannel_proba(model, stacked_batch):
    """P(same), P(different) for a batch of H x W x 6 arrays -> (N, 2)."""
    _check(model)
    model.eval()
    arr = np.asarray(stacked_batch)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.cat([to_tensor(a) for a in arr])
    return torch.softmax(model(x).double(), dim=1).numpy()


def sixchannel_classify(model, pair):
    """Probability that the pair differs."""
    return float(sixchannel_proba(model, stacked_input(pair))[0, 1])


def _siamese_loss(model, sample, rng):
    d = model(to_tensor(sample.pair.stacked()))[0]
    return {"contrastive": contrastive_loss(d, float(sample.label), model.margin)}


def _classify_loss(model, sample, rng):
    logits = model(to_tensor(sample.pair.stacked()))
    return {"cls": F.cross_entropy(logits, torch.tensor([sample.label]))}


def train_baseline(kind, samples, width=1, schedule=None, seed=0, checkpoint_dir=None, accumulate=None):
    """Train ``"siamese"`` or ``"classify6"`` on labelled samples; returns ``(model, history)``.

    One pair gives a single loss value, so gradients are averaged over
    ``accumulate`` pairs per update (the detector averages over sampled
    anchors and RoIs within one pair instead).
    """
    accumulate = _B["accumulate"] if accumulate is None else accumulate
    schedule = schedule or TrainSchedule()
    if kind == "siamese":
        model, loss = SiameseNet(width), _siamese_loss
    elif kind == "classify6":
        model, loss = SixChannelNet(width), _classify_loss
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    init_weights(model, "xavier_all", seed)
    history = fit(model, samples, loss, schedule, seed, checkpoint_dir,
                  {"kind": kind, "input_scale": schedule.input_scale, "max_side": schedule.max_side},
                  prepare=lambda s: rescale_to_s(s, schedule.input_scale, schedule.max_side), accumulate=accumulate)
    return model, history
