"""Hot kernels of the covariance pipeline.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is selected. ``CAMCOV_BACKEND=python`` forces the fallback.
"""
import os

from . import _schur_py

try:
    from . import _schur as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _schur_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None):
    """Kernel module by name; ``None`` picks the default backend."""
    if name is None:
        name = DEFAULT_BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; "
                         f"available: {available_backends()}") from None


DEFAULT_BACKEND = os.environ.get("CAMCOV_BACKEND") or ("cython" if _compiled is not None else "python")
if DEFAULT_BACKEND not in _BACKENDS:
    raise ImportError(f"CAMCOV_BACKEND={DEFAULT_BACKEND!r} is not available")
