import dataclasses

import numpy as np
import pytest

from gridest.doe import (
    DoEInfeasible,
    DoEProblem,
    DoESettings,
    _Objective,
    check_feasibility,
    doe_step,
    information_objective,
    problem_from_state,
    solve_doe,
)
from gridest.estimator import initial_state, regressor, rls_update
from gridest.netmodel import Bus, GridSpec, build_admittance
from gridest.powerflow import NoiseModel, solve_power_flow
from gridest.structvec import Mode, Parametrization


def warmed_state(spec, mode, steps=30, seed=0, sigma=1e-5):
    """RLS state after a few noisy samples at nominal set-points."""
    rng = np.random.default_rng(seed)
    y = build_admittance(spec).Y
    state = initial_state(Parametrization(mode, spec.n))
    nominal = spec.nominal_demands
    for _ in range(steps):
        d = nominal.real * (1 + 0.3 * rng.standard_normal(nominal.size))
        d = np.abs(d) + 1j * np.abs(nominal.imag * (1 + 0.3 * rng.standard_normal(nominal.size)))
        v = solve_power_flow(spec, d)
        i = y @ v + sigma * (rng.standard_normal(spec.n) + 1j * rng.standard_normal(spec.n))
        state = rls_update(state, v, i)
    return state


@pytest.fixture(scope="module")
def prob_d(grid_d):
    return problem_from_state(warmed_state(grid_d, Mode.LAPLACIAN), grid_d, grid_d.nominal_demands)


@pytest.fixture(scope="module")
def prob_t(grid_t):
    state = warmed_state(grid_t, Mode.SYMMETRIC, sigma=1e-4)
    return problem_from_state(state, grid_t, grid_t.nominal_demands)


def brute_force(v, prob):
    a = regressor(v, prob.parametrization)
    sign, logdet = np.linalg.slogdet(prob.lam * prob.Z_inv_prev + a.conj().T @ a)
    assert sign.real > 0
    return -logdet


# --- objective -----------------------------------------------------------------------

def test_objective_at_zero_voltage(prob_d):
    sign, logdet = np.linalg.slogdet(prob_d.lam * prob_d.Z_inv_prev)
    assert information_objective(np.zeros(13), prob_d) == pytest.approx(-logdet, rel=1e-10)


def test_objective_matches_dense_determinant(prob_d, prob_t, rng):
    for prob in (prob_d, prob_t):
        n = prob.spec.n
        for _ in range(5):
            v = 1 + 0.05 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
            assert information_objective(v, prob) == pytest.approx(brute_force(v, prob), rel=1e-8)


def test_objective_decreases_with_scale(prob_d, rng):
    v = 1 + 0.05 * (rng.standard_normal(13) + 1j * rng.standard_normal(13))
    values = [information_objective(c * v, prob_d) for c in (0.5, 1.0, 1.5, 3.0)]
    assert all(b < a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("with_z", [True, False])
def test_low_rank_objective_and_gradient(prob_d, rng, with_z):
    prob = prob_d if with_z else dataclasses.replace(prob_d, Z_prev=None)
    obj = _Objective(prob)
    v = solve_power_flow(prob.spec, prob.demands)
    f, g = obj(v)
    assert f == pytest.approx(information_objective(v, prob), rel=1e-9)
    dv = 1e-6 * (rng.standard_normal(13) + 1j * rng.standard_normal(13))
    df = obj(v + dv)[0] - obj(v - dv)[0]
    assert df == pytest.approx(-2 * 2 * np.real(g @ dv), rel=1e-4)


def test_objective_rejects_indefinite_prior(prob_d):
    bad = dataclasses.replace(prob_d, Z_inv_prev=-np.eye(78, dtype=complex))
    with pytest.raises(np.linalg.LinAlgError):
        information_objective(np.ones(13), bad)


def test_problem_validation(prob_d):
    with pytest.raises(ValueError):
        dataclasses.replace(prob_d, Z_inv_prev=np.eye(3))
    with pytest.raises(ValueError):
        dataclasses.replace(prob_d, Y_hat_prev=np.eye(3))
    with pytest.raises(ValueError):
        DoESettings(method="ipopt")
    with pytest.raises(ValueError):
        DoESettings(starts=0)


# --- solver --------------------------------------------------------------------------

def limits_ok(v, spec):
    vm = np.abs(v)
    return all(b.v_limits[0] - 1e-12 <= vm[k] <= b.v_limits[1] + 1e-12 for k, b in enumerate(spec.buses))


def test_grid_d_design(prob_d):
    sol = solve_doe(prob_d)
    spec = prob_d.spec
    assert sol.feasible
    assert check_feasibility(sol.v_star, prob_d) == 0.0
    assert limits_ok(sol.v_star, spec)
    assert np.all((sol.gen_vm[spec.gen_indices] >= 0.95) & (sol.gen_vm[spec.gen_indices] <= 1.05))
    # never worse than the warm start: nominal set-points under the estimate
    warm = solve_power_flow(spec, prob_d.demands, Y=prob_d.Y_hat_prev)
    assert sol.objective <= information_objective(warm, prob_d) + 1e-9
    assert sol.objective == pytest.approx(information_objective(sol.v_star, prob_d))


def test_grid_t_design_respects_per_bus_limits(prob_t):
    sol = solve_doe(prob_t)
    gens = prob_t.spec.gen_indices
    vm = sol.gen_vm[gens]
    assert 0.95 <= vm[0] <= 1.05
    assert 0.93 <= vm[1] <= 1.07
    assert check_feasibility(sol.v_star, prob_t) == 0.0


def test_sqp_and_augmented_lagrangian_agree(prob_t):
    sqp = solve_doe(prob_t, DoESettings(method="sqp", starts=3))
    al = solve_doe(prob_t, DoESettings(method="al", starts=3))
    assert check_feasibility(al.v_star, prob_t) == 0.0
    assert al.objective == pytest.approx(sqp.objective, abs=1e-3 * abs(sqp.objective))


def test_design_is_deterministic(prob_t):
    a = solve_doe(prob_t, DoESettings(seed=3))
    b = solve_doe(prob_t, DoESettings(seed=3))
    assert np.array_equal(a.v_star, b.v_star)


def pinned(spec, vm):
    buses = []
    g = iter(vm)
    for b in spec.buses:
        if b.kind.value == "generator":
            x = next(g)
            b = dataclasses.replace(b, v_limits=(x, x), v_set=x)
        buses.append(b)
    return dataclasses.replace(spec, buses=tuple(buses))


def test_pinned_generator_voltages(grid_t):
    spec = pinned(grid_t, [1.01, 1.03])
    state = warmed_state(spec, Mode.SYMMETRIC, steps=20, sigma=1e-4)
    prob = problem_from_state(state, spec, spec.nominal_demands)
    sol = solve_doe(prob)
    assert np.allclose(sol.gen_vm[spec.gen_indices], [1.01, 1.03], atol=1e-12)
    assert check_feasibility(sol.v_star, prob) == 0.0


def test_infeasible_design_raises_and_step_falls_back(grid_t):
    # reactive limits that no operating point can meet
    buses = tuple(
        dataclasses.replace(b, q_limits=(5.0, 6.0)) if b.kind.value == "generator" else b for b in grid_t.buses
    )
    spec = dataclasses.replace(grid_t, buses=buses)
    state = warmed_state(grid_t, Mode.SYMMETRIC, steps=15, sigma=1e-4)
    prob = problem_from_state(state, spec, spec.nominal_demands)
    with pytest.raises(DoEInfeasible):
        solve_doe(prob, DoESettings(starts=2))
    res = doe_step(state, spec, spec.nominal_demands, settings=DoESettings(starts=2))
    assert res.fallback and res.solution is None
    assert np.allclose(res.gen_vm, spec.nominal_gen_vm)
    assert res.state.t == state.t + 1


def test_check_feasibility_reports_violations(prob_d):
    v = solve_doe(prob_d, DoESettings(starts=1)).v_star
    assert check_feasibility(v, prob_d) == 0.0
    assert check_feasibility(v * 1.2, prob_d) > 0.1
    assert check_feasibility(v, prob_d, tol=np.inf) == 0.0


# --- one closed-loop step ------------------------------------------------------------

def test_cold_start_step_beats_nominal_voltages(grid_d):
    state = initial_state(Parametrization(Mode.LAPLACIAN, 13))
    demands = grid_d.nominal_demands
    res = doe_step(state, grid_d, demands, noise=NoiseModel(1e-5), rng=np.random.default_rng(0))
    prob = problem_from_state(state, grid_d, demands)
    nominal = solve_power_flow(grid_d, demands)
    assert information_objective(res.sample.v, prob) <= information_objective(nominal, prob)
    assert res.state.t == 1


def test_step_applies_setpoints_to_true_grid(grid_d):
    state = warmed_state(grid_d, Mode.LAPLACIAN, steps=20)
    res = doe_step(state, grid_d, grid_d.nominal_demands)
    y = build_admittance(grid_d).Y
    s = res.sample.v * np.conj(y @ res.sample.v)
    assert np.max(np.abs(s[grid_d.load_indices] + grid_d.nominal_demands)) < 1e-8
    assert np.allclose(np.abs(res.sample.v[grid_d.gen_indices]), res.gen_vm)
    assert np.allclose(s[grid_d.gen_indices].real, res.gen_p, atol=1e-8)
