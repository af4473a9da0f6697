"""Bitemporal landslide detection with a from-scratch 3D CNN."""

from lsw._backend import BACKEND

__version__ = "0.1.0"

DEFAULT_BANDS = (2, 3, 4, 8, 12)

__all__ = ["BACKEND", "DEFAULT_BANDS", "__version__"]
