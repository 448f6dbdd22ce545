"""Joint latent-space EBM prior for multi-layer generator models."""

__version__ = "0.1.0"
