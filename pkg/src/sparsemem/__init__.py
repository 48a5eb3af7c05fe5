"""Kernel approximation by attention-head mixtures, explicit transformer
constructions for long-but-sparse memory tasks, and the training experiments
that probe them."""

__version__ = "0.1.0"
