"""Syntactic-field Gaussian attention biases, occurrence recoupling and
consistency-regularised training for a small numpy transformer."""

__version__ = "0.1.0"
