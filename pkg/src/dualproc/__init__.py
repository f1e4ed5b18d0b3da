"""Dual-process latent-verb humanoid control at desk scale."""

__version__ = "0.1.0"
