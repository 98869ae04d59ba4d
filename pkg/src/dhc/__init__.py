"""Dual-debiased heterogeneous co-training on synthetic imbalanced phantoms."""

__version__ = "0.1.0"
