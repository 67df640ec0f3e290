"""Complex recursive least squares with forgetting, batch least squares, error metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as la

from . import kernels
from .netmodel import AdmittanceMatrix, is_laplacian
from .structvec import Mode, Parametrization, reconstruct_admittance, regressor_pattern

__all__ = [
    "EstimatorState",
    "ErrorMetrics",
    "RankDeficientError",
    "regressor",
    "initial_state",
    "rls_update",
    "ols_batch",
    "stacked_regressor",
    "error_metrics",
    "estimate_admittance",
    "lyapunov",
    "save_state",
    "load_state",
    "STATE_FORMAT_VERSION",
]

STATE_FORMAT_VERSION = 1


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, rank: int, dim: int):
        super().__init__(
            f"stacked regressor has rank {rank} < {dim} parameters "
            f"({dim - rank} directions not identifiable from the data)"
        )
        self.rank = rank
        self.dim = dim


def regressor(v, p: Parametrization) -> np.ndarray:
    """``A = (v^T kron I_n) S`` so that ``A @ x == Y(x) @ v``."""
    return kernels.regressor(v, regressor_pattern(p))


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """RLS state.

    ``Z`` is the noise-normalised covariance of ``x_hat`` and ``Z_inv`` the
    matching information matrix; both are carried so neither is ever inverted.
    """

    x_hat: np.ndarray
    Z: np.ndarray
    Z_inv: np.ndarray
    lam: float
    parametrization: Parametrization
    t: int = 0
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        d = self.parametrization.dim
        if self.x_hat.shape != (d,) or self.Z.shape != (d, d) or self.Z_inv.shape != (d, d):
            raise ValueError("state dimensions do not match the parametrization")
        if not 0 < self.lam <= 1:
            raise ValueError(f"forgetting factor must lie in (0, 1], got {self.lam}")

    @property
    def n(self) -> int:
        return self.parametrization.n


def initial_state(
    p: Parametrization,
    lam: float = 0.8,
    delta: float = 1e-4,
    K: float = 1e4,
    x0=None,
    Z0=None,
    weights=None,
) -> EstimatorState:
    """Defaults: ``x0 = delta * 1``, ``Z0 = K * I``."""
    d = p.dim
    x = np.full(d, delta, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex).copy()
    if Z0 is None:
        Z = K * np.eye(d, dtype=complex)
        Z_inv = np.eye(d, dtype=complex) / K
    else:
        Z = np.asarray(Z0, dtype=complex).copy()
        Z_inv = la.inv(Z)
        Z_inv = 0.5 * (Z_inv + Z_inv.conj().T)
    w = None if weights is None else np.asarray(weights, dtype=float)
    return EstimatorState(x, Z, Z_inv, float(lam), p, 0, w)


def _weighted(state: EstimatorState, a, i):
    if state.weights is None:
        return a, i
    sw = np.sqrt(state.weights)
    return a * sw[:, None], i * sw


def rls_update(state: EstimatorState, v, i) -> EstimatorState:
    """One RLS step on the sample ``(v, i)``."""
    v = np.asarray(v, dtype=complex)
    i = np.asarray(i, dtype=complex)
    n = state.n
    if v.shape != (n,) or i.shape != (n,):
        raise ValueError(f"expected voltage and current vectors of length {n}")
    lam = state.lam
    a, i = _weighted(state, regressor(v, state.parametrization), i)
    za = state.Z @ a.conj().T
    gram = lam * np.eye(n) + a @ za
    try:
        cho = la.cho_factor(gram)
    except la.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is not positive definite") from exc
    z = (state.Z - za @ la.cho_solve(cho, za.conj().T)) / lam
    z = 0.5 * (z + z.conj().T)
    z_inv = lam * state.Z_inv + a.conj().T @ a
    z_inv = 0.5 * (z_inv + z_inv.conj().T)
    x = state.x_hat + z @ (a.conj().T @ (i - a @ state.x_hat))
    return replace(state, x_hat=x, Z=z, Z_inv=z_inv, t=state.t + 1)


def stacked_regressor(V, p: Parametrization) -> np.ndarray:
    """Rows ``A_1; ...; A_t`` for samples ``V`` of shape ``(t, n)``."""
    V = np.atleast_2d(np.asarray(V, dtype=complex))
    return np.vstack([regressor(v, p) for v in V])


def ols_batch(V, I, p: Parametrization, *, prior=None, lam: float = 1.0, rcond: float = 1e-10):
    """Least squares on the stacked samples via a column-pivoted QR.

    ``V`` and ``I`` hold one sample per row.  ``prior=(x0, Z0)`` adds the ridge
    term ``lam^t (x - x0)^H Z0^{-1} (x - x0)`` and ``lam`` discounts older
    samples, which reproduces what recursive least squares computes.

    Raises
    ------
    RankDeficientError
        If the (unregularised) stacked regressor does not have full column rank.
    """
    V = np.atleast_2d(np.asarray(V, dtype=complex))
    I = np.atleast_2d(np.asarray(I, dtype=complex))
    if V.shape != I.shape or V.shape[1] != p.n:
        raise ValueError("V and I must both have shape (t, n)")
    t = V.shape[0]
    scale = np.sqrt(lam ** np.arange(t - 1, -1, -1))
    a = stacked_regressor(V, p) * np.repeat(scale, p.n)[:, None]
    b = (I * scale[:, None]).reshape(-1)
    if prior is not None:
        x0, z0 = prior
        x0 = np.asarray(x0, dtype=complex)
        z0_inv = la.inv(np.asarray(z0, dtype=complex))
        r = la.cholesky(0.5 * (z0_inv + z0_inv.conj().T) * lam**t)  # R^H R
        a = np.vstack([a, r])
        b = np.concatenate([b, r @ x0])
    q, r, perm = la.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > rcond * diag[0])) if diag.size else 0
    if rank < p.dim:
        raise RankDeficientError(rank, p.dim)
    y = la.solve_triangular(r, q.conj().T @ b)
    x = np.empty(p.dim, dtype=complex)
    x[perm] = y
    return x


@dataclass(frozen=True)
class ErrorMetrics:
    m_F: float
    m_max: float
    m_R: float


def error_metrics(Y_true, Y_hat) -> ErrorMetrics:
    y = np.asarray(Y_true)
    d = y - np.asarray(Y_hat)
    if y.shape != d.shape:
        raise ValueError("matrices must have the same shape")
    ref = np.linalg.norm(y)
    if ref == 0:
        raise ValueError("true admittance matrix has zero norm")
    m_f = float(np.linalg.norm(d))
    return ErrorMetrics(m_f, float(np.max(np.abs(d))), m_f / float(ref))


def estimate_admittance(state: EstimatorState) -> AdmittanceMatrix:
    y = reconstruct_admittance(state.x_hat, state.parametrization)
    mode = state.parametrization.mode
    sym = mode is not Mode.FULL or bool(np.array_equal(y, y.T))
    lap = mode is Mode.LAPLACIAN or (sym and is_laplacian(y))
    return AdmittanceMatrix(y, is_symmetric=sym, is_laplacian=lap)


def lyapunov(state: EstimatorState, x_true) -> float:
    """``(x_hat - x)^H Z^{-1} (x_hat - x)``, non-increasing on noise-free data."""
    e = state.x_hat - np.asarray(x_true)
    return float(np.real(e.conj() @ state.Z_inv @ e))


def save_state(state: EstimatorState, path) -> None:
    """Checkpoint to ``.npz``; the parametrization and version go in a JSON header."""
    header = {
        "format_version": STATE_FORMAT_VERSION,
        "mode": state.parametrization.mode.value,
        "n": state.parametrization.n,
        "lam": state.lam,
        "t": state.t,
    }
    arrays = dict(x_hat=state.x_hat, Z=state.Z, Z_inv=state.Z_inv)
    if state.weights is not None:
        arrays["weights"] = state.weights
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_state(path) -> EstimatorState:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != STATE_FORMAT_VERSION:
            raise ValueError(f"unsupported state format {header.get('format_version')}")
        p = Parametrization(Mode(header["mode"]), int(header["n"]))
        return EstimatorState(
            x_hat=data["x_hat"].copy(),
            Z=data["Z"].copy(),
            Z_inv=data["Z_inv"].copy(),
            lam=float(header["lam"]),
            parametrization=p,
            t=int(header["t"]),
            weights=data["weights"].copy() if "weights" in data.files else None,
        )
