"""Backend selection for the hot loops.

Set ``RSMOE_BACKEND=numpy`` to force the pure-numpy path (useful where numba
is missing or when debugging); the default is ``numba`` when importable.
"""
import os
import warnings

_requested = os.environ.get("RSMOE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"RSMOE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False
    if _requested == "numba":
        warnings.warn("numba not found, falling back to numpy kernels (slow)")

USE_NUMBA = HAVE_NUMBA and _requested == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def identity(fn):
        return fn
    return identity


if HAVE_NUMBA:
    prange = nb.prange
else:  # pragma: no cover
    prange = range


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
