"""Transport distance and entropic cost on truncated Poisson configuration spaces."""

__version__ = "0.1.0"
