"""Explainable classification of lung and colon histopathology tiles.

Pipeline: dataset -> preprocess -> models -> training -> evaluation ->
attribution -> visualization, driven by ``histoxai.config`` and the
``histoxai`` command line.
"""

from __future__ import annotations

from .errors import HistoxaiError, InputError

__version__ = "0.1.0"

__all__ = ["HistoxaiError", "InputError", "__version__"]
