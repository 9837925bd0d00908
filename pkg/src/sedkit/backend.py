"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise, or
when ``SEDKIT_PURE=1`` is set, the numpy twins in ``_fallback`` are used.
"""
import os

from sedkit import _fallback

NAME = "python"
kernels = _fallback

if os.environ.get("SEDKIT_PURE", "") not in ("1", "true", "yes"):
    try:
        from sedkit import _kernels as kernels  # noqa: F811
        NAME = "cython"
    except ImportError:
        pass


def get(name):
    """Return the kernel module for ``name`` in {"cython", "python"}."""
    if name == "python":
        return _fallback
    if name == "cython":
        from sedkit import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
