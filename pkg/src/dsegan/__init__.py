"""Text-to-image GAN with per-stage word re-composition, built on a small numpy autograd core."""

__version__ = "0.1.0"
