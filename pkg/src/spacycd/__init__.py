"""Spatiotemporal causal discovery with spatial factors and latent SCMs."""

__version__ = "0.1.0"
