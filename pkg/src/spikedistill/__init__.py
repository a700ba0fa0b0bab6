"""Attention-calibrated ANN-to-SNN knowledge distillation on a numpy autodiff engine."""

__version__ = "0.1.0"
