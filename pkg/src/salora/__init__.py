"""Safety-preserving low-rank adaptation on small dense models."""
from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
