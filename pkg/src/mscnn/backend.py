"""Kernel backend selection.

Two interchangeable kernel sets implement the hot numeric inner loops:

* ``numba`` -- @njit compiled loops (default when numba imports cleanly)
* ``numpy`` -- pure-numpy fallback (im2col + BLAS matmul and friends)

The default is chosen once at import from the ``MSCNN_BACKEND`` environment
variable (``auto`` | ``numba`` | ``numpy``); ``set_backend`` overrides it at
runtime (used by tests and the backend benchmark). Results are deterministic
per backend: repeated calls on identical inputs are bit-identical.
"""

import os

_VALID = ("auto", "numba", "numpy")

_backend_name = None
_kernels = None


def _numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _resolve(name):
    if name not in _VALID:
        raise ValueError(f"MSCNN_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "auto":
        return "numba" if _numba_available() else "numpy"
    if name == "numba" and not _numba_available():
        raise RuntimeError("MSCNN_BACKEND=numba but numba is not importable")
    return name


def set_backend(name):
    """Select the kernel backend ('auto', 'numba' or 'numpy')."""
    global _backend_name, _kernels
    resolved = _resolve(name)
    if resolved == "numba":
        from . import _numba_kernels as kernels
    else:
        from . import _numpy_kernels as kernels
    _backend_name = resolved
    _kernels = kernels
    return resolved


def backend_name():
    """Name of the active backend ('numba' or 'numpy')."""
    if _backend_name is None:
        set_backend(os.environ.get("MSCNN_BACKEND", "auto"))
    return _backend_name


def kernels():
    """The active kernel module."""
    if _kernels is None:
        set_backend(os.environ.get("MSCNN_BACKEND", "auto"))
    return _kernels
