"""Plain value types passed between the pipeline stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionMismatch


class Kind(str, Enum):
    LOCAL = "local"
    GLOBAL = "global"
    SAME = "same"
    DIFFERENT = "different"

    @property
    def is_different(self) -> bool:
        return self is not Kind.SAME


def as_image(pixels, name="image") -> np.ndarray:
    """Validate an H x W x C uint8 image (C in 1, 3, 6); 2-D input gains a channel axis."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"{name} must be H x W x C, got shape {arr.shape}")
    if arr.shape[2] not in (1, 3, 6):
        raise DimensionMismatch(f"{name} must have 1, 3 or 6 channels, got {arr.shape[2]}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


@dataclass
class AlignedPair:
    """A design image and a photo of the same size, registered by ``transform``.

    ``transform`` maps design coordinates onto the photo frame (2 x 3 affine).
    """

    design: np.ndarray
    photo: np.ndarray
    transform: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    pair_id: str = ""

    def __post_init__(self):
        self.design = as_image(self.design, "design")
        self.photo = as_image(self.photo, "photo")
        if self.design.shape != self.photo.shape or self.design.shape[2] != 3:
            raise DimensionMismatch(
                f"design {self.design.shape} and photo {self.photo.shape} must both be H x W x 3"
            )
        self.transform = np.asarray(self.transform, dtype=np.float64).reshape(2, 3)

    @property
    def height(self) -> int:
        return self.photo.shape[0]

    @property
    def width(self) -> int:
        return self.photo.shape[1]

    def stacked(self) -> np.ndarray:
        """The 6-channel detector input: design channels first, then photo."""
        return np.concatenate([self.design, self.photo], axis=2)

    @classmethod
    def from_stacked(cls, stacked, pair_id=""):
        stacked = as_image(stacked, "stacked pair")
        if stacked.shape[2] != 6:
            raise DimensionMismatch(f"stacked pair must have 6 channels, got {stacked.shape[2]}")
        return cls(stacked[:, :, :3].copy(), stacked[:, :, 3:].copy(), pair_id=pair_id)


@dataclass(frozen=True)
class DiffBox:
    """Axis-aligned difference region in pixel-edge coordinates (x2, y2 exclusive)."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def inside(self, width, height) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


@dataclass
class SynthSample:
    """An aligned pair plus its ground-truth boxes.

    ``source_ids`` records which originals contributed; local samples also keep
    ``meta`` with the source box, the edited image and the pre-paste content so
    the histogram gate can be re-checked after the fact.
    """

    pair: AlignedPair
    boxes: list = field(default_factory=list)
    kind: Kind = Kind.SAME
    source_ids: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind(self.kind)
        for box in self.boxes:
            if not box.inside(self.pair.width, self.pair.height):
                raise ValueError(f"box {box.as_tuple()} outside {self.pair.width}x{self.pair.height}")

    @property
    def sample_id(self) -> str:
        return self.pair.pair_id

    @property
    def label(self) -> int:
        """0 for same, 1 for different."""
        return int(self.kind.is_different)

    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)
