"""Kernel backend selection.

The compiled extension is used when it was built and importable; otherwise,
or when ``SEGFLOW_PURE_PYTHON`` is set to a non-empty value other than ``0``,
the numpy fallback is used. ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

_force_python = os.environ.get("SEGFLOW_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

gmm_velocity_batch = _impl.gmm_velocity_batch
gmm_logpdf_batch = _impl.gmm_logpdf_batch

__all__ = ["BACKEND", "gmm_velocity_batch", "gmm_logpdf_batch"]
