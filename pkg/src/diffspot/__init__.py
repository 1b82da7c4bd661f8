"""Difference detection between aligned image pairs with a stacked-input region detector."""
__version__ = "0.1.0"

from .structures import AlignedPair, DiffBox, Kind, SynthSample  # noqa: E402

__all__ = ["AlignedPair", "DiffBox", "Kind", "SynthSample", "__version__"]
