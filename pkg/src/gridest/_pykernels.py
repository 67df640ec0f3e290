"""Pure-numpy kernels.  Same signatures and results as the compiled ``_ckernels``."""
import numpy as np


def regressor(v, rows, cols, params, coefs, n, dim):
    w = coefs * v[cols]
    flat = rows * dim + params
    out = np.bincount(flat, weights=w.real, minlength=n * dim) + 1j * np.bincount(
        flat, weights=w.imag, minlength=n * dim
    )
    return out.reshape(n, dim)


def regressor_adjoint(w, rows, cols, params, coefs, n):
    vals = coefs * w[rows, params]
    return np.bincount(cols, weights=vals.real, minlength=n) + 1j * np.bincount(
        cols, weights=vals.imag, minlength=n
    )


def injection_jacobian(y, v):
    cur = y @ v
    s = v * np.conj(cur)
    vnorm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(y * vnorm[None, :])
    ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(cur) * vnorm
    ds_dva = -1j * v[:, None] * np.conj(y * v[None, :])
    ds_dva[np.diag_indices_from(ds_dva)] += 1j * v * np.conj(cur)
    return s, ds_dva, ds_dvm
