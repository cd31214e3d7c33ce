"""Kernel backend selection.

Two interchangeable implementations of the row-batched mapping kernels exist:
a Cython extension (built at install time when a compiler is available) and a
pure-numpy fallback. The compiled one is preferred; ``MOSGEOM_BACKEND`` forces
the choice (``compiled`` or ``python``). Selection happens once at import.
"""
import os

from . import _kernels_py

_requested = os.environ.get("MOSGEOM_BACKEND", "").strip().lower()

if _requested not in ("", "compiled", "python"):
    raise RuntimeError(
        f"MOSGEOM_BACKEND={_requested!r} not understood (use 'compiled' or 'python')")

if _requested == "python":
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _compiled
        kernels = _compiled
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError(
                "MOSGEOM_BACKEND=compiled but the extension is not built; "
                "reinstall with a C compiler or unset MOSGEOM_BACKEND")
        kernels = _kernels_py
        BACKEND = "python"


def backend_name():
    """Name of the active kernel backend, 'compiled' or 'python'."""
    return BACKEND


def get_kernels(name=None):
    """Return a kernel module by name, defaulting to the active one.

    name : None | 'compiled' | 'python'
    """
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels as _compiled  # raises if not built
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    out = ["python"]
    try:
        from . import _kernels  # noqa: F401
        out.insert(0, "compiled")
    except ImportError:
        pass
    return out
