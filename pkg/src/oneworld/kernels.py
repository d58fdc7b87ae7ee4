"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when importable. Setting
``ONEWORLD_BACKEND=python`` forces the numpy fallback.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("ONEWORLD_BACKEND", "").lower() not in ("python", "numpy", "fallback"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

philox4x32 = _impl.philox4x32
uniform_pairs = _impl.uniform_pairs
normal_pairs = _impl.normal_pairs
interp_periodic = _impl.interp_periodic
em_step = _impl.em_step

# counter "purpose" words keep draws for different uses disjoint
PURPOSE_STEP = 0
PURPOSE_INIT = 1
PURPOSE_AUX = 2

__all__ = ["BACKEND", "philox4x32", "uniform_pairs", "normal_pairs",
           "interp_periodic", "em_step", "PURPOSE_STEP", "PURPOSE_INIT", "PURPOSE_AUX"]
