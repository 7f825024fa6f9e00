"""Quantization-aware training, Jacobian regularization and adversarial attacks on numpy."""

__version__ = "0.1.0"
