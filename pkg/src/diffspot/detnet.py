"""Merge-point backbone family and its analytic cost.

The backbone is the five-block ZF layout.  Two 3-channel images either enter
stacked as one 6-channel input (merge before conv1) or run through shared
blocks conv1..conv(K-1) separately and are concatenated before conv K.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from fractions import Fraction

import torch
from torch import nn

from .errors import InputTooSmall, InvalidConfig


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv", "relu", "lrn", "pool"
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind == "conv" and (self.kernel < 1 or self.stride < 1 or self.out_channels < 1):
            raise InvalidConfig(f"bad conv layer {self}")


# each block is (conv, relu[, lrn, pool]); blocks are the merge granularity
ZF_BLOCKS = (
    (LayerSpec("conv1", "conv", 96, 7, 2, 3), LayerSpec("relu1", "relu"), LayerSpec("norm1", "lrn"),
     LayerSpec("pool1", "pool", kernel=3, stride=2)),
    (LayerSpec("conv2", "conv", 256, 5, 2, 2), LayerSpec("relu2", "relu"), LayerSpec("norm2", "lrn"),
     LayerSpec("pool2", "pool", kernel=3, stride=2)),
    (LayerSpec("conv3", "conv", 384, 3, 1, 1), LayerSpec("relu3", "relu")),
    (LayerSpec("conv4", "conv", 384, 3, 1, 1), LayerSpec("relu4", "relu")),
    (LayerSpec("conv5", "conv", 256, 3, 1, 1), LayerSpec("relu5", "relu")),
)

FEAT_STRIDE = 16
WIDTHS = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))


def parse_width(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str) and value.startswith("1by"):
        value = "1/" + value[3:]
    try:
        return Fraction(value).limit_denominator(1024)
    except (ValueError, ZeroDivisionError) as exc:
        raise InvalidConfig(f"bad width factor {value!r}") from exc


def scaled(channels, width) -> int:
    """``round(channels * width)`` with halves rounded up."""
    return int(Fraction(channels) * width + Fraction(1, 2))


@dataclass(frozen=True)
class ArchConfig:
    concat_index: int = 1
    width_factor: Fraction = Fraction(1)
    input_scale: int = 600
    blocks: tuple = field(default=ZF_BLOCKS, repr=False)
    input_channels_per_branch: int = 3

    def __post_init__(self):
        object.__setattr__(self, "width_factor", parse_width(self.width_factor))
        if not 1 <= self.concat_index <= len(self.blocks):
            raise InvalidConfig(f"concat_index must be in 1..{len(self.blocks)}, got {self.concat_index}")
        if self.width_factor <= 0:
            raise InvalidConfig("width_factor must be positive")
        for spec in self.conv_specs():
            if spec.out_channels < 1:
                raise InvalidConfig(f"{spec.name} has no channels at width {self.width_factor}")

    @classmethod
    def from_name(cls, name, width=1, input_scale=600):
        """``conv1``..``conv5`` pick the merge point; ``1by8`` etc. are conv1 width variants."""
        name = name.lower().removeprefix("arch-")
        if name.startswith("conv") and name[4:].isdigit():
            return cls(int(name[4:]), parse_width(width), input_scale)
        if name.startswith("1by"):
            return cls(1, parse_width(name), input_scale)
        raise InvalidConfig(f"unknown architecture {name!r}")

    @property
    def name(self):
        if self.width_factor == 1:
            return f"Arch-conv{self.concat_index}"
        if self.concat_index == 1 and self.width_factor.numerator == 1:
            return f"Arch-1by{self.width_factor.denominator}"
        return f"Arch-conv{self.concat_index}-w{self.width_factor}"

    def conv_specs(self):
        """Conv layers with width-scaled channel counts, in order."""
        return [replace(b[0], out_channels=scaled(b[0].out_channels, self.width_factor)) for b in self.blocks]

    def scaled_blocks(self):
        out = []
        for block in self.blocks:
            conv = replace(block[0], out_channels=scaled(block[0].out_channels, self.width_factor))
            out.append((conv,) + tuple(block[1:]))
        return out

    @property
    def out_channels(self):
        return self.conv_specs()[-1].out_channels

    def to_dict(self):
        return {"concat_index": self.concat_index, "width_factor": str(self.width_factor),
                "input_scale": self.input_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["concat_index"]), parse_width(d["width_factor"]), int(d.get("input_scale", 600)))


@dataclass(frozen=True)
class CostReport:
    params_unique: int
    params_per_branch: int
    mac: int

    def row(self, name):
        return f"{name:<12} {human_count(self.params_per_branch):>9} {human_count(self.mac):>9}"


def human_count(n):
    for unit, div in (("G", 1e9), ("M", 1e6), ("k", 1e3)):
        if n >= div:
            text = f"{n / div:.2f}".rstrip("0").rstrip(".")
            return text + unit
    return str(int(n))


def _out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def feature_shape(config, input_h, input_w):
    """Per-layer ``(name, h, w, c)`` trace from the input to relu5.

    Pre-merge entries are per branch and carry a ``branch`` prefix; the
    concat entry shows the doubled channel count.
    """
    k = config.concat_index
    channels = 2 * config.input_channels_per_branch if k == 1 else config.input_channels_per_branch
    h, w = int(input_h), int(input_w)
    trace = [("input", h, w, channels)]
    for index, block in enumerate(config.scaled_blocks(), start=1):
        if index == k and k > 1:
            channels *= 2
            trace.append(("concat", h, w, channels))
        prefix = "branch/" if index < k else ""
        for spec in block:
            if spec.kind in ("conv", "pool"):
                h = _out_size(h, spec.kernel, spec.stride, spec.padding)
                w = _out_size(w, spec.kernel, spec.stride, spec.padding)
                if h < 1 or w < 1:
                    raise InputTooSmall(f"{spec.name} output would be {h}x{w} for input {input_h}x{input_w}")
            if spec.kind == "conv":
                channels = spec.out_channels
            trace.append((prefix + spec.name, h, w, channels))
    return trace


def _conv_costs(config, input_h, input_w):
    """Yield ``(name, params, mac, branch_multiplier)`` for every conv layer."""
    trace = feature_shape(config, input_h, input_w)
    prev_c = trace[0][3]
    k = config.concat_index
    specs = {s.name: s for s in config.conv_specs()}
    for name, h, w, c in trace[1:]:
        base = name.split("/")[-1]
        if base in specs:
            spec = specs[base]
            params = spec.kernel * spec.kernel * prev_c * spec.out_channels
            mult = 2 if int(base[4:]) < k else 1
            yield base, params, h * w * params, mult
        prev_c = c


def count_params(config):
    """Conv weights from the input through conv5, biases excluded.

    Returns ``(params_unique, params_per_branch)``; the second counts shared
    pre-merge layers once per branch.
    """
    unique = per_branch = 0
    # params do not depend on spatial size; any input large enough works
    for _, params, _, mult in _conv_costs(config, 1024, 1024):
        unique += params
        per_branch += mult * params
    return unique, per_branch


def count_mac(config, input_h, input_w):
    """Multiply-accumulates of all conv layers; pre-merge layers run once per branch."""
    return sum(mult * mac for _, _, mac, mult in _conv_costs(config, input_h, input_w))


def mac_from_trace(trace, config):
    """Recompute MACs from a ``feature_shape`` trace (consistency oracle)."""
    specs = {s.name: s for s in config.conv_specs()}
    total, prev_c = 0, trace[0][3]
    for name, h, w, c in trace[1:]:
        base = name.split("/")[-1]
        if base in specs:
            s = specs[base]
            mult = 2 if name.startswith("branch/") else 1
            total += mult * h * w * s.out_channels * s.kernel * s.kernel * prev_c
        prev_c = c
    return total


def cost_report(config, input_h=600, input_w=1000):
    unique, per_branch = count_params(config)
    return CostReport(unique, per_branch, count_mac(config, input_h, input_w))


TABLE1 = {
    # name: (params, mac) at 1000 x 600 as published
    "Arch-conv1": (3.74e6, 17.9e9),
    "Arch-conv2": (4.35e6, 23.82e9),
    "Arch-conv3": (5.24e6, 26.04e9),
    "Arch-conv4": (6.57e6, 29.35e9),
    "Arch-conv5": (7.45e6, 31.56e9),
    "Arch-1by2": (941.86e3, 5.55e9),
    "Arch-1by4": (239e3, 1.92e9),
    "Arch-1by8": (61.52e3, 748.22e6),
    "Arch-1by16": (16.16e3, 320.93e6),
}


def table1_configs():
    return [ArchConfig.from_name(f"conv{k}") for k in range(1, 6)] + [
        ArchConfig.from_name(f"1by{d}") for d in (2, 4, 8, 16)
    ]


# ---------------------------------------------------------------------------
# torch modules

def _make_layers(blocks, in_channels):
    layers = []
    for block in blocks:
        for spec in block:
            if spec.kind == "conv":
                layers.append((spec.name, nn.Conv2d(in_channels, spec.out_channels, spec.kernel,
                                                    spec.stride, spec.padding)))
                in_channels = spec.out_channels
            elif spec.kind == "relu":
                layers.append((spec.name, nn.ReLU(inplace=True)))
            elif spec.kind == "lrn":
                layers.append((spec.name, nn.LocalResponseNorm(3, alpha=5e-5, beta=0.75, k=1.0)))
            elif spec.kind == "pool":
                layers.append((spec.name, nn.MaxPool2d(spec.kernel, spec.stride, spec.padding)))
    return nn.Sequential(OrderedDict(layers)), in_channels


class Backbone(nn.Module):
    """Maps a 6-channel (design, photo) tensor to conv5 features.

    Merge before conv1 stacks the inputs; later merge points run the shared
    ``branch`` blocks on each 3-channel half and concatenate.
    """

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        blocks = config.scaled_blocks()
        k = config.concat_index
        per_branch = config.input_channels_per_branch
        self.branch, branch_out = _make_layers(blocks[:k - 1], per_branch)
        trunk_in = 2 * branch_out if k > 1 else 2 * per_branch
        self.trunk, self.out_channels = _make_layers(blocks[k - 1:], trunk_in)
        self.feat_stride = FEAT_STRIDE

    @property
    def merge_index(self):
        return self.config.concat_index

    def forward(self, x):
        if self.config.concat_index == 1:
            return self.trunk(x)
        c = self.config.input_channels_per_branch
        a = self.branch(x[:, :c])
        b = self.branch(x[:, c:2 * c])
        return self.trunk(torch.cat([a, b], dim=1))

    def pre_merge_convs(self):
        return [m for m in self.branch.modules() if isinstance(m, nn.Conv2d)]

    def post_merge_convs(self):
        return [m for m in self.trunk.modules() if isinstance(m, nn.Conv2d)]


def build_backbone(config):
    return Backbone(config)


def stored_conv_weights(module):
    """Brute-force weight count of an instantiated network (conv weights only)."""
    return sum(m.weight.numel() for m in module.modules() if isinstance(m, nn.Conv2d))
