"""Proximal Newton solvers with black-box denoiser regularization, applied to
2D frequency-domain waveform inversion."""

__version__ = "0.1.0"
