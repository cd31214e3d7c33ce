"""Mixture-of-space geometric experts.

Constant-curvature lifts and stereographic projections, low-rank geometric
expert layers with learnable per-expert curvature and grouped top-K routing,
a split optimizer for curvature vs capacity parameters, a synthetic-task
training harness, and a mapping benchmark against the exp/log baseline.
"""
__version__ = "0.1.0"

__all__ = ["BACKEND", "available_backends", "backend_name", "__version__"]

_BACKEND_ATTRS = ("BACKEND", "available_backends", "backend_name")


def __getattr__(name):
    # deferred so that the command-line entry point can pin BLAS thread
    # counts before anything imports numpy
    if name in _BACKEND_ATTRS:
        from . import backend
        return getattr(backend, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_BACKEND_ATTRS))
