"""Gradient-guided pruning for domain generalization, with a numpy autodiff core."""

__version__ = "0.1.0"
