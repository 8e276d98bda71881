"""Desk-scale distilled momentum-contrastive self-supervised learning."""

__version__ = "0.1.0"
