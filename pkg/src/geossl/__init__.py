"""Contrastive self-supervised learning with a spatial-transform regression objective."""

__version__ = "0.1.0"
