"""Hot-loop kernels: the compiled extension when built, else the NumPy fallback.

Set ``VPNCT_PURE=1`` to force the fallback (used by the parity tests and the
benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_py

MODE_NOCHECK = _kernels_py.MODE_NOCHECK
MODE_INWINDOW = _kernels_py.MODE_INWINDOW
MODE_STRICT = _kernels_py.MODE_STRICT

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("VPNCT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

rst_next_hit = _impl.rst_next_hit
first_match = _impl.first_match
pick_free = _impl.pick_free
count_free = _impl.count_free

__all__ = [
    "BACKEND", "MODE_NOCHECK", "MODE_INWINDOW", "MODE_STRICT",
    "rst_next_hit", "first_match", "pick_free", "count_free",
]
