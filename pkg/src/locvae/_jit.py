"""Numba availability switch.

Set ``LOCVAE_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
numba is unavailable or when comparing the two paths.  When numba cannot be
imported the numpy path is used regardless of the flag.
"""
from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}


def _flag_disabled() -> bool:
    return os.environ.get("LOCVAE_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _flag_disabled()


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise.

    Compilation happens regardless of ``USE_NUMBA`` so the benchmark can time
    both paths in one process; dispatch is decided in ``kernels``.
    """
    if _njit is None:
        return func
    return _njit(cache=True)(func)
