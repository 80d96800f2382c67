"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``STEREOPRIOR_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("STEREOPRIOR_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

visibility_mask = _impl.visibility_mask
bilateral_correction = _impl.bilateral_correction
left_right_check = _impl.left_right_check

__all__ = ["BACKEND", "visibility_mask", "bilateral_correction", "left_right_check"]
