"""Coordinate-gated spatially varying deconvolution for multi-aperture imaging."""

__version__ = "0.1.0"
