"""Single-file checkpoints.

Layout::

    b"DSPTCKPT"               8-byte magic
    uint64 little-endian       manifest length in bytes
    manifest                   UTF-8 JSON: model spec, metadata, tensor table
    tensor data                little-endian float32, in tensor-table order

Every tensor entry gives ``name``, ``shape``, ``offset`` (bytes from the start
of the data block) and ``count``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DSPTCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model, path, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, blobs, offset = [], [], 0
    for name, value in model.state_dict().items():
        arr = np.ascontiguousarray(value.detach().cpu().numpy().astype("<f4"))
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.spec(),
        "meta": meta or {},
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    """Return ``(manifest, {name: float32 array})``."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a diffspot checkpoint")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=entry["count"], offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return manifest, arrays


def load_arrays(path):
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as npz:
            return {k: npz[k] for k in npz.files}
    return read_checkpoint(path)[1]


def load_model(path):
    """Rebuild the model recorded in a checkpoint, weights loaded."""
    from .baselines import SiameseNet, SixChannelNet
    from .rcnn.model import DiffDetectorNet

    manifest, arrays = read_checkpoint(path)
    spec = manifest["model"]
    builders = {"detector": DiffDetectorNet, "siamese": SiameseNet, "classify6": SixChannelNet}
    if spec["kind"] not in builders:
        raise ValueError(f"unknown model kind {spec['kind']!r}")
    model = builders[spec["kind"]].from_spec(spec)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.initialized = True
    model.eval()
    return model, manifest
