"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .structures import AlignedPair, SynthSample, as_image


def check_pairs(X, name="X"):
    """Coerce ``X`` into a list of AlignedPairs.

    Accepts AlignedPairs, SynthSamples, H x W x 6 arrays, an (N, H, W, 6)
    array, or ``(design, photo)`` tuples.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if isinstance(X, (AlignedPair, SynthSample)) or (isinstance(X, np.ndarray) and X.ndim == 3):
        X = [X]
    pairs = []
    for i, item in enumerate(X):
        if isinstance(item, SynthSample):
            pairs.append(item.pair)
        elif isinstance(item, AlignedPair):
            pairs.append(item)
        elif isinstance(item, tuple) and len(item) == 2:
            pairs.append(AlignedPair(item[0], item[1], pair_id=str(i)))
        else:
            arr = as_image(item, f"{name}[{i}]")
            if arr.ndim != 3 or arr.shape[2] != 6:
                raise ValueError(f"{name}[{i}] must be H x W x 6, got shape {arr.shape}")
            pairs.append(AlignedPair.from_stacked(arr, pair_id=str(i)))
    if not pairs:
        raise ValueError(f"{name} is empty")
    return pairs


def check_labels(y, n, name="y"):
    """Binary labels, 0 = same and 1 = different, one per pair."""
    y = np.asarray(y).reshape(-1)
    if y.dtype.kind in "US":
        y = np.array([0 if v == "same" else 1 if v in ("different", "local", "global") else -1 for v in y])
    if len(y) != n:
        raise ValueError(f"{name} has {len(y)} labels for {n} pairs")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 (same) and 1 (different)")
    return y.astype(np.int64)


def check_samples(X, y=None):
    """Training samples: SynthSamples pass through; bare pairs need labels ``y``.

    Bare pairs labelled different carry no boxes, so they only help the
    baselines; the detector needs annotated SynthSamples.
    """
    from .structures import Kind

    items = list(X) if not isinstance(X, SynthSample) else [X]
    if items and all(isinstance(s, SynthSample) for s in items):
        return items
    pairs = check_pairs(X)
    if y is None:
        raise ValueError("labels y are required when X holds bare pairs")
    labels = check_labels(y, len(pairs))
    return [SynthSample(p, [], Kind.DIFFERENT if lab else Kind.SAME) for p, lab in zip(pairs, labels)]


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value
