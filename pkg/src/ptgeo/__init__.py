"""Parallel-tempered MCMC for layered geophysical inversion."""
__version__ = "0.1.0"
