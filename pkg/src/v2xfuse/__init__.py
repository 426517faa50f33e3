"""Desk-scale engine for multi-level V2X cooperation.

Sparse mixture-of-experts perception backbone, perception-level and
prediction-level cross-agent fusion, a byte-exact communication layer
with bandwidth accounting, and an evaluation harness over synthetic
intersection scenes. All model math runs in float64 with pinned
accumulation order; float32 appears only on the wire.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
