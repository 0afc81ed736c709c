"""Spatio-temporal snippet segmentation: temporal context blending plus a
shifted-window attention encoder over a residual CNN backbone, trained end
to end with a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
