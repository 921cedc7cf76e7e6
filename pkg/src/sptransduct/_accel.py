"""Optional numba acceleration.

Hot loops are written once in numba-compatible Python and wrapped with
:func:`kernel`.  Each wrapped kernel keeps both the interpreted function and
the jitted one; the active backend is chosen per call, so the pure-numpy path
can be exercised in the same process (tests, benchmarks).

Set ``SPTRANSDUCT_PURE_NUMPY=1`` to start with numba disabled.
"""

from __future__ import annotations

import contextlib
import functools
import os

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

_TRUTHY = {"1", "true", "yes", "on"}

_state = {
    "backend": (
        "numpy"
        if os.environ.get("SPTRANSDUCT_PURE_NUMPY", "").strip().lower() in _TRUTHY
        or not NUMBA_AVAILABLE
        else "numba"
    )
}


def get_backend() -> str:
    return _state["backend"]


def set_backend(name: str) -> None:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not importable")
    _state["backend"] = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = get_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def kernel(func):
    """Wrap ``func`` so it dispatches to its jitted twin when numba is active."""
    jitted = njit(cache=True)(func) if NUMBA_AVAILABLE else func

    @functools.wraps(func)
    def dispatch(*args):
        if _state["backend"] == "numba":
            return jitted(*args)
        return func(*args)

    dispatch.py_func = func
    dispatch.jit_func = jitted
    return dispatch
