"""Matrix-free Gaussian process inference by stochastic optimisation."""

__version__ = "0.1.0"
