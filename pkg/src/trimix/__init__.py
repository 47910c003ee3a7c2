"""Three-stream multiview appearance transfer on a from-scratch numpy diffusion stack."""

__version__ = "0.1.0"
