"""Pick the compositing kernels at import time.

The compiled core is used when it imports; set ``GAUSSSURF_BACKEND=python`` to
force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _raster_py

kernels = _raster_py
if os.environ.get("GAUSSSURF_BACKEND", "").lower() != "python":
    try:
        from . import _raster_ext as kernels  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on the build
        kernels = _raster_py

BACKEND = kernels.NAME


def get_kernels(name: str | None = None):
    """Kernel module by name (``"cython"``/``"python"``), or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _raster_py
    if name == "cython":
        from . import _raster_ext
        return _raster_ext
    raise ValueError(f"unknown backend {name!r}")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GAUSSSURF_THREADS", "1")))
    except ValueError:
        return 1
