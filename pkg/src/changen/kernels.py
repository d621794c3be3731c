"""Mask kernels, compiled when available.

Set ``CHANGEN_PURE_PYTHON=1`` to force the pure-Python implementation.
"""
import os

BACKEND = "python"

if os.environ.get("CHANGEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._kernels import footprint_overlaps, label_components

        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from ._kernels_py import footprint_overlaps, label_components

__all__ = ["BACKEND", "footprint_overlaps", "label_components"]
