"""Auto-encoder guided GAN for glyph style transfer, on a numpy autodiff engine."""

__version__ = "0.1.0"
