"""Multi-modal Cox survival modelling with transformer fusion."""

__version__ = "0.1.0"
