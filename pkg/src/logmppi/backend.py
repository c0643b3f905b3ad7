"""Rollout-kernel backend selection.

The compiled ``logmppi._core`` extension is used when it imports; otherwise
the numpy implementation in ``logmppi._core_py`` is.  Either can be asked
for by name through :func:`get`.  ``LOGMPPI_THREADS`` overrides the default
worker count.
"""
from __future__ import annotations

import os

from . import _core_py

try:
    from . import _core as _compiled  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

BACKENDS = {"python": _core_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

#: name of the backend picked at import
NAME = "compiled" if _compiled is not None else "python"
_active = BACKENDS[NAME]


def get(name: str | None = None):
    """Kernel module by name (``"compiled"`` or ``"python"``); default is the active one."""
    if name is None:
        return _active
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available (have {sorted(BACKENDS)})") from None


def default_threads() -> int:
    env = os.environ.get("LOGMPPI_THREADS")
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
