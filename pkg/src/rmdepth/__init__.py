"""Unsupervised recurrent monocular depth and 3D motion estimation,
verified end to end on procedurally generated scenes."""

from . import autodiff  # noqa: F401

__version__ = "0.1.0"
