"""AC power flow and synthetic phasor measurements."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .kernels import injection_jacobian
from .netmodel import GridSpec, build_admittance

__all__ = [
    "PowerFlowDivergence",
    "InfeasibleSetpoint",
    "PhasorSample",
    "NoiseModel",
    "solve_power_flow",
    "currents_from_voltages",
    "power_mismatch",
    "add_measurement_noise",
    "injections",
    "make_sample",
]


class PowerFlowDivergence(RuntimeError):
    """Newton-Raphson did not reach the mismatch tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (max mismatch {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class InfeasibleSetpoint(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PhasorSample:
    t: int
    v: np.ndarray
    i: np.ndarray
    v_noisy: np.ndarray
    i_noisy: np.ndarray


@dataclass(frozen=True)
class NoiseModel:
    """Std. dev. of the i.i.d. Gaussian error on each of the real and imaginary parts."""

    sigma_i: float = 0.0
    sigma_v: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.sigma_i < 0 or self.sigma_v < 0:
            raise ValueError("noise standard deviations must be non-negative")


def currents_from_voltages(y, v) -> np.ndarray:
    y = np.asarray(y)
    v = np.asarray(v)
    if y.shape != (v.shape[0], v.shape[0]):
        raise ValueError(f"Y has shape {y.shape} but v has length {v.shape[0]}")
    return y @ v


def injections(y, v) -> np.ndarray:
    """Complex power injections ``[v] conj(Y v)``."""
    v = np.asarray(v)
    return v * np.conj(currents_from_voltages(y, v))


def power_mismatch(y, v, s) -> np.ndarray:
    return np.abs(np.asarray(s) - injections(y, v))


def _specified_injections(spec: GridSpec, demands, gen_p) -> np.ndarray:
    s = np.zeros(spec.n, dtype=complex)
    s[spec.load_indices] = -np.asarray(demands, dtype=complex)
    s[spec.gen_indices] = np.asarray(gen_p, dtype=float)
    return s


def solve_power_flow(
    spec: GridSpec,
    demands=None,
    gen_vm=None,
    gen_p=None,
    *,
    Y=None,
    tol: float = 1e-10,
    max_iter: int = 30,
    v0=None,
) -> np.ndarray:
    """Newton-Raphson power flow in polar coordinates.

    Loads are PQ buses consuming ``demands`` (ordered as ``spec.load_indices``),
    generators are PV buses with magnitudes ``gen_vm`` and active injections
    ``gen_p`` (nominal values when omitted), the slack holds ``v_set`` at angle 0.
    ``Y`` overrides the grid's own admittance matrix.  Starts flat unless ``v0``
    is given.

    Raises
    ------
    PowerFlowDivergence
        If the mismatch is not below ``tol`` after ``max_iter`` iterations.
    """
    demands = spec.nominal_demands if demands is None else np.asarray(demands, dtype=complex)
    gen_vm = spec.nominal_gen_vm if gen_vm is None else np.asarray(gen_vm, dtype=float)
    gen_p = spec.nominal_gen_p if gen_p is None else np.asarray(gen_p, dtype=float)
    if demands.shape != spec.load_indices.shape:
        raise ValueError(f"expected {spec.load_indices.size} load demands, got {demands.shape}")
    if gen_vm.shape != spec.gen_indices.shape or gen_p.shape != spec.gen_indices.shape:
        raise ValueError("one voltage and one power set-point per generator required")
    if np.any(gen_vm <= 0) or not np.all(np.isfinite(gen_vm)):
        raise InfeasibleSetpoint(f"generator voltage magnitudes must be positive, got {gen_vm}")
    y = build_admittance(spec).Y if Y is None else np.asarray(Y, dtype=complex)

    n = spec.n
    slack, pv, pq = spec.slack_index, spec.gen_indices, spec.load_indices
    s_spec = _specified_injections(spec, demands, gen_p)
    pvpq = np.r_[pv, pq]
    npv, npq = pv.size, pq.size

    if v0 is None:
        vm = np.ones(n)
        va = np.zeros(n)
    else:
        vm = np.abs(v0).astype(float)
        va = np.angle(v0)
    vm[slack] = spec.buses[slack].v_set
    va[slack] = 0.0
    vm[pv] = gen_vm

    def mismatch(vm, va):
        v = vm * np.exp(1j * va)
        s, ds_dva, ds_dvm = injection_jacobian(y, v)
        d = s - s_spec
        f = np.r_[d.real[pvpq], d.imag[pq]]
        return v, f, ds_dva, ds_dvm

    v, f, ds_dva, ds_dvm = mismatch(vm, va)
    norm = np.max(np.abs(f)) if f.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowDivergence("power flow did not converge", norm, it)
        if not np.isfinite(norm):
            raise PowerFlowDivergence("power flow diverged", norm, it)
        jac = np.block(
            [
                [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
                [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
            ]
        )
        try:
            dx = -np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDivergence("singular power-flow Jacobian", norm, it) from exc
        step = 1.0
        for _ in range(8):
            va_new = va.copy()
            vm_new = vm.copy()
            va_new[pvpq] += step * dx[: npv + npq]
            vm_new[pq] += step * dx[npv + npq :]
            v_new, f_new, dva_new, dvm_new = mismatch(vm_new, va_new)
            norm_new = np.max(np.abs(f_new))
            if norm_new < norm:
                break
            step *= 0.5
        va, vm = va_new, vm_new
        v, f, ds_dva, ds_dvm, norm = v_new, f_new, dva_new, dvm_new, norm_new
        it += 1
    return v


def make_sample(t: int, y, v) -> PhasorSample:
    """Clean sample; noisy fields equal the clean ones until noise is added."""
    v = np.asarray(v, dtype=complex)
    i = currents_from_voltages(y, v)
    return PhasorSample(t=t, v=v, i=i, v_noisy=v.copy(), i_noisy=i.copy())


def _complex_normal(rng, sigma, size):
    if sigma == 0:
        return np.zeros(size, dtype=complex)
    return sigma * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def add_measurement_noise(sample: PhasorSample, noise: NoiseModel, rng=None) -> PhasorSample:
    """Add i.i.d. N(0, sigma^2) to the real and imaginary parts of every phasor.

    Without ``rng`` a generator seeded from ``noise.seed`` is used, so the
    result is deterministic given the seed.
    """
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    n = sample.v.shape[0]
    # currents first so that sigma_v = 0 leaves the current noise stream unchanged
    i_noisy = sample.i + _complex_normal(rng, noise.sigma_i, n)
    v_noisy = sample.v + _complex_normal(rng, noise.sigma_v, n)
    return replace(sample, v_noisy=v_noisy, i_noisy=i_noisy)
