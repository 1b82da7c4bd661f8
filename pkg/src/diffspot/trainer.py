"""Approximate-joint training of the detector (and the shared loop the baselines use)."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import cv2
import numpy as np
import torch
from torch import nn

from .checkpoint import load_arrays, save_checkpoint
from .defaults import section
from .errors import DivergenceDetected, InvalidConfig, ShapeMismatch
from .rcnn.losses import LOSS_NAMES
from .rcnn.model import DiffDetectorNet, to_tensor
from .structures import AlignedPair, DiffBox, SynthSample

log = logging.getLogger(__name__)

_S = section("schedule")


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = _S["base_lr"]
    drop_lr: float = _S["drop_lr"]
    epochs_at_base: int = _S["epochs_at_base"]
    epochs_at_drop: int = _S["epochs_at_drop"]
    momentum: float = _S["momentum"]
    weight_decay: float = _S["weight_decay"]
    input_scale: int = _S["input_scale"]
    max_side: int = _S["max_side"]
    flip: bool = _S["flip"]
    clip_norm: float = _S["clip_norm"]

    def __post_init__(self):
        if min(self.base_lr, self.drop_lr, self.input_scale, self.max_side) <= 0:
            raise InvalidConfig("learning rates and sizes must be positive")
        if self.epochs_at_base < 0 or self.epochs_at_drop < 0:
            raise InvalidConfig("epoch counts must be >= 0")
        if int(self.epochs_at_base) != self.epochs_at_base or int(self.epochs_at_drop) != self.epochs_at_drop:
            raise InvalidConfig("epoch counts must be integers")

    @property
    def epochs(self):
        return self.epochs_at_base + self.epochs_at_drop

    def lr_at(self, epoch):
        return self.base_lr if epoch < self.epochs_at_base else self.drop_lr

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# initialisation

def _layers(model):
    return [m for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]


def _pre_merge_names(model):
    backbone = getattr(model, "backbone", None)
    if backbone is None or not hasattr(backbone, "branch"):
        return set()
    names = set()
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d) and any(module is m for m in backbone.pre_merge_convs()):
            names.update({f"{name}.weight", f"{name}.bias"})
    return names


def init_weights(model, mode="xavier_all", seed=0, pretrained=None):
    """Xavier-uniform weights and zero biases for every conv / linear layer.

    ``pretrained_pre_concat`` then overwrites the shared pre-merge convs from
    ``pretrained`` (a checkpoint path, ``.npz`` path or name -> array dict).
    """
    if mode not in ("xavier_all", "pretrained_pre_concat"):
        raise InvalidConfig(f"unknown init mode {mode!r}")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in _layers(model):
            nn.init.xavier_uniform_(layer.weight, generator=gen)
            if layer.bias is not None:
                layer.bias.zero_()
        if mode == "pretrained_pre_concat":
            if pretrained is None:
                raise InvalidConfig("pretrained_pre_concat needs a weight file")
            arrays = pretrained if isinstance(pretrained, dict) else load_arrays(pretrained)
            params = dict(model.named_parameters())
            for name in sorted(_pre_merge_names(model)):
                if name not in arrays:
                    raise ShapeMismatch(f"pretrained weights lack {name}")
                src = np.asarray(arrays[name])
                if tuple(src.shape) != tuple(params[name].shape):
                    raise ShapeMismatch(f"{name}: file {tuple(src.shape)} vs model {tuple(params[name].shape)}")
                params[name].copy_(torch.from_numpy(src.astype(np.float32)))
    model.initialized = True
    return model


# ---------------------------------------------------------------------------
# sample transforms

def flip_sample(sample):
    """Mirror both images horizontally and remap the boxes."""
    pair = sample.pair
    w = pair.width
    flipped = AlignedPair(pair.design[:, ::-1].copy(), pair.photo[:, ::-1].copy(), pair.transform, pair.pair_id)
    boxes = [DiffBox(w - b.x2, b.y1, w - b.x1, b.y2, b.score) for b in sample.boxes]
    meta = dict(sample.meta, flipped=not sample.meta.get("flipped", False))
    return SynthSample(flipped, boxes, sample.kind, sample.source_ids, meta)


def augment_flip(sample, rng, p=0.5):
    return flip_sample(sample) if rng.random() < p else sample


def rescale_factor(height, width, s, max_side):
    scale = s / min(height, width)
    if max(height, width) * scale > max_side:
        scale = max_side / max(height, width)
    return scale


def rescale_to_s(sample, s=600, max_side=1000):
    """Scale so the shorter side is ``s`` unless the longer would pass ``max_side``."""
    pair = sample.pair
    h, w = pair.height, pair.width
    scale = rescale_factor(h, w, s, max_side)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) == (h, w):
        return sample
    interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR
    design = cv2.resize(pair.design, (nw, nh), interpolation=interp)
    photo = cv2.resize(pair.photo, (nw, nh), interpolation=interp)
    sx, sy = nw / w, nh / h
    boxes = [DiffBox(min(b.x1 * sx, nw), min(b.y1 * sy, nh), min(b.x2 * sx, nw), min(b.y2 * sy, nh), b.score)
             for b in sample.boxes]
    return SynthSample(AlignedPair(design, photo, pair.transform, pair.pair_id), boxes, sample.kind,
                       sample.source_ids, dict(sample.meta, scale=scale))


# ---------------------------------------------------------------------------
# optimisation

class MomentumSGD:
    """``v <- mu v - lr (g + wd w); w <- w + v``; decay skips 1-d params (biases)."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.dim() > 1:
                g = g + self.weight_decay * p
            v.mul_(self.momentum).sub_(lr * g)
            p.add_(v)


def fit(model, samples, loss_fn, schedule, seed=0, checkpoint_dir=None, checkpoint_meta=None, prepare=None,
        accumulate=1):
    """Generic SGD loop, one sample per forward pass.

    ``loss_fn(model, sample, rng)`` returns a dict of scalar loss tensors; their
    sum is minimised.  ``prepare(sample)`` runs once per sample before training
    (e.g. rescaling).  With ``accumulate=k`` the gradients of k consecutive
    samples are averaged before each update.  Returns the loss history as a
    list of dicts, one row per sample.
    """
    if accumulate < 1:
        raise InvalidConfig("accumulate must be >= 1")
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    if prepare is not None:
        samples = [prepare(s) for s in samples]
    rng = np.random.default_rng(int(seed))
    torch.manual_seed(int(seed))
    opt = MomentumSGD(model.parameters(), schedule.momentum, schedule.weight_decay)
    good_state = copy.deepcopy(model.state_dict())
    history = []
    step = 0
    model.train()
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(len(samples))
        opt.zero_grad()
        for i, index in enumerate(order):
            sample = samples[index]
            if schedule.flip:
                sample = augment_flip(sample, rng)
            terms = loss_fn(model, sample, rng)
            total = sum(terms.values())
            if not torch.isfinite(total):
                model.load_state_dict(good_state)
                raise DivergenceDetected(f"non-finite loss at step {step}", good_state, history)
            (total / accumulate if accumulate > 1 else total).backward()
            if (i + 1) % accumulate == 0 or i + 1 == len(order):
                if schedule.clip_norm:
                    nn.utils.clip_grad_norm_(opt.params, schedule.clip_norm)
                opt.step(lr)
                opt.zero_grad()
            row = {"step": step, "epoch": epoch, "lr": lr}
            row.update({k: float(v.detach()) for k, v in terms.items()})
            row["total"] = float(total.detach())
            history.append(row)
            step += 1
        good_state = copy.deepcopy(model.state_dict())
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.ckpt"
            save_checkpoint(model, path, dict(checkpoint_meta or {}, epoch=epoch + 1))
        ep = [r["total"] for r in history if r["epoch"] == epoch]
        log.info("epoch %d lr %g mean loss %.4f", epoch + 1, lr, float(np.mean(ep)) if ep else float("nan"))
    return history


def detector_loss(model, sample, rng):
    return model.loss_terms(to_tensor(sample.pair.stacked()), sample.box_array(), rng)


def train(dataset, config, schedule=None, seed=0, det_config=None, checkpoint_dir=None,
          init_mode="xavier_all", pretrained=None):
    """Train a detector from scratch on ``dataset`` (SynthSamples).

    Returns ``(model, history)``; history rows carry the four loss terms.
    """
    schedule = schedule or TrainSchedule()
    model = DiffDetectorNet(config, det_config)
    init_weights(model, init_mode, seed, pretrained)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training set is empty")
    history = fit(
        model, dataset, detector_loss, schedule, seed, checkpoint_dir,
        {"kind": "detector", "input_scale": schedule.input_scale, "max_side": schedule.max_side},
        prepare=lambda s: rescale_to_s(s, schedule.input_scale, schedule.max_side),
    )
    return model, history


HISTORY_FIELDS = ("step", "epoch", "lr") + LOSS_NAMES + ("total",)


def write_history(history, path, fields=None):
    if fields is None:
        fields = HISTORY_FIELDS if history and "rpn_cls" in history[0] else tuple(history[0]) if history else HISTORY_FIELDS
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def epoch_mean(history, key="total", epoch=None):
    if not history:
        return math.nan
    epoch = history[-1]["epoch"] if epoch is None else epoch
    return float(np.mean([r[key] for r in history if r["epoch"] == epoch]))


def desk_schedule(epochs=14, lr=0.01, input_scale=192, max_side=320, **kw):
    """Schedule for small desk-scale runs: same shape, shorter first phase scaled to ``epochs``."""
    base = min(epochs, max(1, int(round(epochs * 10 / 14))))
    return TrainSchedule(base_lr=lr, drop_lr=lr / 10, epochs_at_base=base, epochs_at_drop=epochs - base,
                         input_scale=input_scale, max_side=max_side, **kw)


def with_lr(schedule, lr):
    return replace(schedule, base_lr=lr, drop_lr=lr / 10)
