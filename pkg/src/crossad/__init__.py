"""Deterministic cross-lingual speech screening toolkit.

Trains a micro attention-pooling network on English picture-description
acoustic features, transfers it to Greek with mixed-language batches and
parameter averaging, and evaluates detection/score-regression quality.
Every run is bit-reproducible from its seeds.
"""

from .kernels import backend_name, has_compiled

__version__ = "0.1.0"

__all__ = ["backend_name", "has_compiled", "__version__"]
