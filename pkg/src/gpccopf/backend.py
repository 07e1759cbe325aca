"""Select the compiled kernel extension, falling back to numpy.

Set ``GPCCOPF_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

from . import _core_py

if os.environ.get("GPCCOPF_PURE_PYTHON", "") not in ("", "0"):
    core = _core_py
    COMPILED = False
else:
    try:
        from . import _core as core
        COMPILED = True
    except ImportError:  # extension not built
        core = _core_py
        COMPILED = False

NAME = "cython" if COMPILED else "numpy"

# above this many kernel entries the BLAS-backed numpy version is faster
GRAM_CUTOFF = 4000


def se_ard(X1, X2, inv_ls2, sf2):
    """SE-ARD kernel matrix through whichever backend suits its size."""
    if len(X1) * len(X2) >= GRAM_CUTOFF:
        return _core_py.se_ard(X1, X2, inv_ls2, sf2)
    return core.se_ard(X1, X2, inv_ls2, sf2)


__all__ = ["core", "COMPILED", "NAME", "GRAM_CUTOFF", "se_ard", "_core_py"]
