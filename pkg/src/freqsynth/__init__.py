"""Frequency-supervised 3D image-to-image synthesis (MR to CT) on numpy."""

__version__ = "0.1.0"
