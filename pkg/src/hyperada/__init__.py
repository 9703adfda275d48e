"""Hyperbolic active domain adaptation toolkit for desk-scale dense prediction."""

from hyperada.backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
