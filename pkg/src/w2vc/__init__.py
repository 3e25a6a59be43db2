"""Self-supervised speech representation learning with a consistency-regularised
product quantizer, built on a small float64 autodiff engine."""

__version__ = "0.1.0"
