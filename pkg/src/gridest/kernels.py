"""Hot kernels, compiled when the extension is built, numpy otherwise.

Set ``GRIDEST_PURE_PYTHON=1`` before import to force the numpy fallback.
"""
import os

import numpy as np

from .structvec import RegressorPattern

if os.environ.get("GRIDEST_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _pykernels as _impl

        BACKEND = "python"

__all__ = ["BACKEND", "regressor", "regressor_adjoint", "injection_jacobian"]


def regressor(v: np.ndarray, pat: RegressorPattern) -> np.ndarray:
    """``(v^T kron I) S`` for the structure map ``S`` described by ``pat``."""
    v = np.ascontiguousarray(v, dtype=complex)
    if v.shape != (pat.n,):
        raise ValueError(f"voltage vector has shape {v.shape}, expected ({pat.n},)")
    return _impl.regressor(v, pat.rows, pat.cols, pat.params, pat.coefs, pat.n, pat.dim)


def regressor_adjoint(w: np.ndarray, pat: RegressorPattern) -> np.ndarray:
    """``g`` with ``sum(w * regressor(u)) == g @ u`` for every ``u``."""
    w = np.ascontiguousarray(w, dtype=complex)
    return _impl.regressor_adjoint(w, pat.rows, pat.cols, pat.params, pat.coefs, pat.n)


def injection_jacobian(y: np.ndarray, v: np.ndarray):
    """Complex injections ``s = v * conj(Y v)`` and their polar derivatives.

    Returns ``(s, dS/dtheta, dS/d|v|)``.
    """
    y = np.ascontiguousarray(y, dtype=complex)
    v = np.ascontiguousarray(v, dtype=complex)
    return _impl.injection_jacobian(y, v)
