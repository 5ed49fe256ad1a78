"""Differentially-private optimizers, their SDE weak-approximation models,
closed-form theory, and a Monte-Carlo experiment harness."""

from . import harness, noise, objectives, optimizers, privacy, sde, theory

__all__ = ["harness", "noise", "objectives", "optimizers", "privacy", "sde", "theory"]

__version__ = "0.1.0"
