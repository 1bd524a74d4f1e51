"""Two-step cascaded video denoiser built on numpy kernels."""

__version__ = "0.1.0"
