"""Label-aware text classification on a small from-scratch autodiff engine."""

__version__ = "0.1.0"
