"""Kernel backend selection.

The compiled Cython extension is preferred when present; setting
CONEMAFLOW_FORCE_PY=1 in the environment forces the numpy fallback
(used by the benchmark to compare both).
"""
import os

if os.environ.get("CONEMAFLOW_FORCE_PY") == "1":
    from . import _stencil_np as _impl
else:
    try:
        from . import _stencil as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _stencil_np as _impl

BACKEND = _impl.BACKEND
lap5_periodic = _impl.lap5_periodic
newton_apply = _impl.newton_apply

__all__ = ["BACKEND", "lap5_periodic", "newton_apply"]
