"""Adversarial fake images searched on a generator's face manifold, plus pixel-space baselines."""

__version__ = "0.1.0"
