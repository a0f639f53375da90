"""Ranked contrastive learning on synthetic hierarchies: losses, encoder, training, evaluation."""

__version__ = "0.1.0"
