"""Synthetic data augmentation with a class-conditional GAN."""

__version__ = "0.1.0"
