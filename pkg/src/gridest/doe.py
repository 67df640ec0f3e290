"""D-optimal choice of generator voltages.

At step ``t`` the design maximises ``log det(lam * Z_inv + A(v)^H A(v))`` over
the nodal voltages ``v`` reachable under the current admittance estimate, i.e.
subject to load-bus power balance under ``Y_hat`` and to the voltage, angle and
generator power limits of the grid.

The program is solved in polar coordinates (magnitudes and angles of all
non-slack buses) with an augmented Lagrangian: power balance is an equality,
generator P/Q limits are inequalities, and the box limits on magnitudes and
angles are left to L-BFGS-B.  Generator active powers are not separate
variables; they follow from ``v`` as the real part of the injection.  Every
candidate is finally re-solved as a power flow under ``Y_hat`` with the
generator set-points it implies, so a returned solution satisfies the balance
equations to power-flow accuracy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy.optimize import minimize

from . import kernels
from .estimator import EstimatorState, estimate_admittance, regressor, rls_update
from .netmodel import GridSpec, build_admittance
from .powerflow import (
    NoiseModel,
    PhasorSample,
    PowerFlowDivergence,
    add_measurement_noise,
    injections,
    make_sample,
    solve_power_flow,
)
from .structvec import Parametrization, regressor_pattern

log = logging.getLogger(__name__)

__all__ = [
    "DoEProblem",
    "DoESolution",
    "DoEInfeasible",
    "DoESettings",
    "StepResult",
    "information_objective",
    "check_feasibility",
    "solve_doe",
    "problem_from_state",
    "doe_step",
]


class DoEInfeasible(RuntimeError):
    """No start produced a point satisfying the design constraints."""


@dataclass(frozen=True)
class DoESettings:
    """Solver controls.

    ``method`` is ``"sqp"`` (SLSQP with exact constraint Jacobians) or ``"al"``
    (augmented Lagrangian around L-BFGS-B).  Both work on limits shrunk inward
    by ``margin`` so that the power-flow restoration cannot push a solution
    onto the wrong side of an active bound.
    """

    method: str = "sqp"
    starts: int = 5
    seed: int | None = 0
    feas_tol: float = 1e-6
    al_tol: float = 1e-5
    max_outer: int = 25
    max_inner: int = 300
    rho0: float = 1e5
    pf_tol: float = 1e-10
    margin: float = 1e-5

    def __post_init__(self):
        if self.method not in ("sqp", "al"):
            raise ValueError(f"unknown DoE method {self.method!r}")
        if self.starts < 1:
            raise ValueError("at least one start is required")


@dataclass(frozen=True, eq=False)
class DoEProblem:
    """Inputs of one design step.

    ``Z_prev`` is optional; when given, the optimiser works with the n x n form
    ``log det(I + A Z A^H / lam)`` of the objective instead of the p x p one.
    """

    Z_inv_prev: np.ndarray
    Y_hat_prev: np.ndarray
    lam: float
    demands: np.ndarray
    spec: GridSpec
    parametrization: Parametrization
    Z_prev: np.ndarray | None = None

    def __post_init__(self):
        d = self.parametrization.dim
        if self.Z_inv_prev.shape != (d, d):
            raise ValueError("information matrix does not match the parametrization")
        if self.Y_hat_prev.shape != (self.spec.n, self.spec.n):
            raise ValueError("admittance estimate does not match the grid")


@dataclass(frozen=True, eq=False)
class DoESolution:
    v_star: np.ndarray
    p_star: np.ndarray
    objective: float
    feasible: bool
    solver_iterations: int
    start: int = 0
    max_violation: float = 0.0

    @property
    def gen_vm(self) -> np.ndarray:
        return np.abs(self.v_star)


def information_objective(v, prob: DoEProblem) -> float:
    """``-log det(lam * Z_inv + A^H A)`` from a Cholesky factor of the full matrix."""
    a = regressor(np.asarray(v, dtype=complex), prob.parametrization)
    m = prob.lam * prob.Z_inv_prev + a.conj().T @ a
    m = 0.5 * (m + m.conj().T)
    try:
        c = la.cholesky(m, lower=True)
    except la.LinAlgError as exc:
        raise np.linalg.LinAlgError("information matrix is not positive definite") from exc
    return -2.0 * float(np.sum(np.log(np.real(np.diag(c)))))


class _Objective:
    """Objective and gradient in the low-rank form, plus the constant offset."""

    def __init__(self, prob: DoEProblem):
        self.prob = prob
        self.pat = regressor_pattern(prob.parametrization)
        lam = prob.lam
        z_inv = 0.5 * (prob.Z_inv_prev + prob.Z_inv_prev.conj().T)
        c = la.cholesky(lam * z_inv, lower=True)
        self.logdet0 = 2.0 * float(np.sum(np.log(np.real(np.diag(c)))))
        if prob.Z_prev is None:
            z = la.cho_solve((c, True), np.eye(z_inv.shape[0])) * lam
        else:
            z = prob.Z_prev
        self.z_scaled = 0.5 * (z + z.conj().T) / lam
        self.eye = np.eye(prob.spec.n)

    def __call__(self, v):
        """Objective and ``g`` with ``df = -2 Re(g . dv)``."""
        a = kernels.regressor(v, self.pat)
        az = a @ self.z_scaled
        g = self.eye + az @ a.conj().T
        try:
            c = np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("information matrix is not positive definite") from exc
        logdet = 2.0 * float(np.sum(np.log(c.diagonal().real)))
        b = np.linalg.solve(g, az)
        return -(self.logdet0 + logdet), kernels.regressor_adjoint(np.conj(b), self.pat)


def _shrink(lo, hi, margin):
    """Move finite interval ends inward by ``margin`` unless the interval is too narrow."""
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    ok = (hi - lo > 4 * margin) & np.isfinite(lo) & np.isfinite(hi)
    lo[ok] += margin
    hi[ok] -= margin
    return lo, hi


class _Program:
    """The design program in the variables ``u = (|v|, theta)`` of the non-slack buses."""

    def __init__(self, prob: DoEProblem, margin: float = 0.0):
        spec = prob.spec
        self.prob = prob
        self.obj = _Objective(prob)
        self.y = np.ascontiguousarray(prob.Y_hat_prev, dtype=complex)
        self.yt = np.ascontiguousarray(self.y.T)
        n = spec.n
        self.n = n
        self.slack = spec.slack_index
        self.free = np.array([k for k in range(n) if k != self.slack])
        self.loads = spec.load_indices
        self.gens = spec.gen_indices
        self.s_load = -np.asarray(prob.demands, dtype=complex)
        self.v_slack = spec.buses[self.slack].v_set
        nf = self.free.size
        lo = np.empty(2 * nf)
        hi = np.empty(2 * nf)
        for j, k in enumerate(self.free):
            b = spec.buses[k]
            lo[j], hi[j] = b.v_limits
            lo[nf + j], hi[nf + j] = b.theta_limits
        g = [spec.buses[k] for k in self.gens]
        self.lo, self.hi = _shrink(lo, hi, margin)
        self.bounds = list(zip(self.lo, self.hi))
        self.p_lo, self.p_hi = _shrink(
            np.array([b.p_limits[0] for b in g]), np.array([b.p_limits[1] for b in g]), margin
        )
        self.q_lo, self.q_hi = _shrink(
            np.array([b.q_limits[0] for b in g]), np.array([b.q_limits[1] for b in g]), margin
        )
        self._jac_rows = np.r_[self.loads, self.gens]
        self._jac_cols = np.r_[self.free, self.n + self.free]
        pos = {k: j for j, k in enumerate(self.free)}
        self.gen_pos = np.array([pos[k] for k in self.gens])

    def voltages(self, u):
        nf = self.free.size
        v = np.empty(self.n, dtype=complex)
        v[self.slack] = self.v_slack
        v[self.free] = u[:nf] * np.exp(1j * u[nf:])
        return v

    def to_u(self, v):
        return np.r_[np.abs(v[self.free]), np.angle(v[self.free])]

    def residuals(self, v):
        """Balance residuals ``h`` (= 0) and generator limit residuals ``c`` (<= 0)."""
        i = self.y @ v
        s = v * np.conj(i)
        d = s[self.loads] - self.s_load
        sg = s[self.gens]
        h = np.concatenate((d.real, d.imag))
        c = np.concatenate(
            (sg.real - self.p_hi, self.p_lo - sg.real, sg.imag - self.q_hi, self.q_lo - sg.imag)
        )
        return h, c, i

    def _polar(self, gamma, v):
        # d phi = Re(gamma . dv) mapped to (|v|, theta) of the free buses
        gf, vf = gamma[self.free], v[self.free]
        return np.concatenate((np.real(gf * vf / np.abs(vf)), -np.imag(gf * vf)))

    def objective(self, u):
        v = self.voltages(u)
        f, g = self.obj(v)
        return f, self._polar(-2.0 * g, v)

    def merit(self, u, mu, nu, rho):
        v = self.voltages(u)
        h, c, i = self.residuals(v)
        f, g = self.obj(v)
        lh = mu + rho * h
        shifted = np.maximum(0.0, nu + rho * c)
        val = f + mu @ h + 0.5 * rho * h @ h + (shifted @ shifted - nu @ nu) / (2.0 * rho)
        # complex weights on the injections, Re(conj(w) . ds) = penalty derivative
        nl, ng = self.loads.size, self.gens.size
        w = np.zeros(self.n, dtype=complex)
        w[self.loads] = lh[:nl] + 1j * lh[nl:]
        sp = shifted.reshape(4, ng)
        w[self.gens] = (sp[0] - sp[1]) + 1j * (sp[2] - sp[3])
        gamma = np.conj(w * i) + self.yt @ (w * np.conj(v)) - 2.0 * g
        return val, self._polar(gamma, v)

    def jacobians(self, v):
        """Dense Jacobians of ``h`` and ``c`` with respect to ``u``."""
        _, ds_dva, ds_dvm = kernels.injection_jacobian(self.y, v)
        j = np.concatenate((ds_dvm, ds_dva), axis=1)[np.ix_(self._jac_rows, self._jac_cols)]
        nl = self.loads.size
        jl, jg = j[:nl], j[nl:]
        jh = np.concatenate((jl.real, jl.imag))
        jc = np.concatenate((jg.real, -jg.real, jg.imag, -jg.imag))
        return jh, jc

    def violation(self, u):
        h, c, _ = self.residuals(self.voltages(u))
        return max(np.max(np.abs(h), initial=0.0), np.max(c, initial=0.0))


def _augmented_lagrangian(prog: _Program, u0, settings: DoESettings):
    """PHR augmented Lagrangian; returns the final iterate and total inner iterations."""
    u = np.clip(u0, prog.lo, prog.hi)
    h, c, _ = prog.residuals(prog.voltages(u))
    mu = np.zeros_like(h)
    nu = np.zeros_like(c)
    rho = settings.rho0
    viol = prog.violation(u)
    iters = 0
    for _ in range(settings.max_outer):
        res = minimize(
            prog.merit,
            u,
            args=(mu, nu, rho),
            jac=True,
            method="L-BFGS-B",
            bounds=prog.bounds,
            options={"maxiter": settings.max_inner, "ftol": 1e-10, "gtol": 1e-6},
        )
        iters += int(res.nit)
        u = res.x
        h, c, _ = prog.residuals(prog.voltages(u))
        new_viol = max(np.max(np.abs(h), initial=0.0), np.max(c, initial=0.0))
        mu = mu + rho * h
        nu = np.maximum(0.0, nu + rho * c)
        if new_viol < settings.al_tol:
            break
        if new_viol > 0.25 * viol:
            rho = min(rho * 10.0, 1e12)
        viol = new_viol
    return u, iters


def _sqp(prog: _Program, u0, settings: DoESettings):
    """SLSQP on the same program; the objective is normalised by its starting gradient."""
    u0 = np.clip(u0, prog.lo, prog.hi)
    scale = 1.0 / max(float(np.max(np.abs(prog.objective(u0)[1]))), 1e-12)

    def fun(u):
        f, g = prog.objective(u)
        return f * scale, g * scale

    cache = {}

    def parts(u):
        key = u.tobytes()
        if key not in cache:
            cache.clear()
            v = prog.voltages(u)
            h, c, _ = prog.residuals(v)
            cache[key] = (h, c) + prog.jacobians(v)
        return cache[key]

    cons = [
        {"type": "eq", "fun": lambda u: parts(u)[0], "jac": lambda u: parts(u)[2]},
        {"type": "ineq", "fun": lambda u: -parts(u)[1], "jac": lambda u: -parts(u)[3]},
    ]
    res = minimize(
        fun,
        u0,
        jac=True,
        method="SLSQP",
        bounds=prog.bounds,
        constraints=cons,
        options={"maxiter": settings.max_inner, "ftol": 1e-12},
    )
    return res.x, int(res.nit)


def check_feasibility(v, prob: DoEProblem, tol: float = 1e-6) -> float:
    """Largest violation of the design constraints at ``v`` (0 when feasible).

    Balance residuals are measured under ``Y_hat_prev``; limits are checked
    exactly, with ``tol`` only absorbing round-off at active bounds.
    """
    spec = prob.spec
    s = injections(prob.Y_hat_prev, v)
    viol = [np.max(np.abs(s[spec.load_indices] + prob.demands), initial=0.0)]
    vm, va = np.abs(v), np.angle(v)
    for k, b in enumerate(spec.buses):
        if k == spec.slack_index:
            continue
        viol += [b.v_limits[0] - vm[k], vm[k] - b.v_limits[1],
                 b.theta_limits[0] - va[k], va[k] - b.theta_limits[1]]
    for k in spec.gen_indices:
        b = spec.buses[k]
        viol += [b.p_limits[0] - s[k].real, s[k].real - b.p_limits[1],
                 b.q_limits[0] - s[k].imag, s[k].imag - b.q_limits[1]]
    worst = max(viol)
    return worst if worst > tol else 0.0


def _restore(prog: _Program, v_guess, settings: DoESettings):
    """Power flow under ``Y_hat`` at the set-points implied by ``v_guess``."""
    prob = prog.prob
    s = injections(prog.y, v_guess)
    gen_vm = np.clip(np.abs(v_guess[prog.gens]), prog.lo[prog.gen_pos], prog.hi[prog.gen_pos])
    gen_p = np.clip(s[prog.gens].real, prog.p_lo, prog.p_hi)
    return solve_power_flow(
        prob.spec, prob.demands, gen_vm, gen_p, Y=prog.y, v0=v_guess, tol=settings.pf_tol
    )


def _starts(prog: _Program, settings: DoESettings, rng):
    """Nominal operating point first, then random generator set-points."""
    spec = prog.prob.spec
    out = []
    for k in range(settings.starts):
        if k == 0:
            gen_vm, gen_p = spec.nominal_gen_vm, spec.nominal_gen_p
        else:
            gen_vm = rng.uniform(prog.lo[prog.gen_pos], prog.hi[prog.gen_pos])
            p_lo = np.maximum(prog.p_lo, -1e2)
            p_hi = np.minimum(prog.p_hi, 1e2)
            gen_p = rng.uniform(p_lo, p_hi)
        try:
            v = solve_power_flow(spec, prog.prob.demands, gen_vm, gen_p, Y=prog.y,
                                 tol=settings.pf_tol)
            pf_ok = True
        except PowerFlowDivergence:
            v = np.ones(spec.n, dtype=complex)
            v[spec.gen_indices] = gen_vm
            pf_ok = False
        out.append((v, pf_ok))
    return out


def solve_doe(prob: DoEProblem, settings: DoESettings | None = None) -> DoESolution:
    """Best feasible design over several starts.

    Raises
    ------
    DoEInfeasible
        If no start yields a point meeting all constraints.
    """
    settings = settings or DoESettings()
    prog = _Program(prob, settings.margin)
    local = _sqp if settings.method == "sqp" else _augmented_lagrangian
    rng = np.random.default_rng(settings.seed)
    best: DoESolution | None = None
    for k, (v0, pf_ok) in enumerate(_starts(prog, settings, rng)):
        candidates = []
        if k == 0 and pf_ok:
            candidates.append((v0, 0))
        try:
            u, iters = local(prog, prog.to_u(v0), settings)
        except (np.linalg.LinAlgError, ValueError) as exc:
            log.debug("start %d failed: %s", k, exc)
        else:
            try:
                candidates.append((_restore(prog, prog.voltages(u), settings), iters))
            except PowerFlowDivergence as exc:
                log.debug("start %d: restoration failed: %s", k, exc)
        for v, iters in candidates:
            viol = check_feasibility(v, prob, settings.feas_tol)
            if viol > 0:
                continue
            f = information_objective(v, prob)
            if best is None or f < best.objective:
                p = injections(prob.Y_hat_prev, v)[prob.spec.gen_indices].real
                best = DoESolution(v, p, f, True, iters, start=k)
    if best is None:
        raise DoEInfeasible("no feasible design found from any start")
    return best


def problem_from_state(state: EstimatorState, spec: GridSpec, demands, Y_constraint=None) -> DoEProblem:
    """Design problem for the step after ``state``; ``Y_constraint`` overrides ``Y_hat``."""
    y_hat = estimate_admittance(state).Y if Y_constraint is None else np.asarray(Y_constraint)
    return DoEProblem(
        Z_inv_prev=state.Z_inv,
        Y_hat_prev=y_hat,
        lam=state.lam,
        demands=np.asarray(demands, dtype=complex),
        spec=spec,
        parametrization=state.parametrization,
        Z_prev=state.Z,
    )


@dataclass(frozen=True, eq=False)
class StepResult:
    solution: DoESolution | None
    sample: PhasorSample
    state: EstimatorState
    fallback: bool = False
    gen_vm: np.ndarray | None = None
    gen_p: np.ndarray | None = None


def doe_step(
    state: EstimatorState,
    spec: GridSpec,
    demands,
    *,
    noise: NoiseModel | None = None,
    rng=None,
    true_spec: GridSpec | None = None,
    Y_constraint=None,
    settings: DoESettings | None = None,
) -> StepResult:
    """Design, actuate, measure, update.

    ``spec`` supplies limits and bus roles; ``true_spec`` (default ``spec``) is
    the physical grid on which the set-points are applied.  When the design is
    infeasible the nominal set-points are used and ``fallback`` is set.
    Power-flow divergence on the physical grid propagates.
    """
    true_spec = spec if true_spec is None else true_spec
    demands = np.asarray(demands, dtype=complex)
    try:
        sol = solve_doe(problem_from_state(state, spec, demands, Y_constraint), settings)
        gen_vm, gen_p = sol.gen_vm[spec.gen_indices], sol.p_star
        fallback = False
    except (DoEInfeasible, np.linalg.LinAlgError) as exc:
        log.debug("DoE step %d falls back to nominal set-points: %s", state.t + 1, exc)
        sol = None
        gen_vm, gen_p = spec.nominal_gen_vm, spec.nominal_gen_p
        fallback = True
    y_true = build_admittance(true_spec).Y
    v = solve_power_flow(true_spec, demands, gen_vm, gen_p)
    sample = make_sample(state.t + 1, y_true, v)
    if noise is not None:
        sample = add_measurement_noise(sample, noise, rng)
    new_state = rls_update(state, sample.v_noisy, sample.i_noisy)
    return StepResult(sol, sample, new_state, fallback, gen_vm, gen_p)
