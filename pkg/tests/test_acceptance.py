"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runs take several minutes in total.  Every power flow solved anywhere in this
module goes through an auditing wrapper so that the residual criterion covers
all of the runs below.  The summary lines are also printed at the end of the
pytest session.
"""
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

import gridest.doe as doe_mod
import gridest.harness as harness_mod
from gridest import powerflow
from gridest.doe import DoESettings, check_feasibility, doe_step, information_objective, problem_from_state
from gridest.estimator import (
    error_metrics,
    estimate_admittance,
    initial_state,
    lyapunov,
    ols_batch,
    rls_update,
)
from gridest.harness import (
    GaussianLoads,
    LineTrip,
    Method,
    ScenarioConfig,
    _streams,
    generate_load_profile,
    parametrization_for,
    run_noise_sweep,
    run_scenario,
)
from gridest.netmodel import build_admittance, load_grid
from gridest.powerflow import NoiseModel, PowerFlowDivergence
from gridest.structvec import (
    Mode,
    Parametrization,
    duplication_matrix,
    parametrize,
    transformation_matrix,
    ve,
    vec,
    vech,
)

from conftest import random_grid, random_laplacian, random_symmetric

pytestmark = pytest.mark.slow

# calibrated load fluctuation per grid, see README
REL_STD = {"grid_d": 0.4, "grid_t": 0.15}
SEEDS = range(10)

REPORT: dict[int, str] = {}


def report(number: int, ok: bool, text: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}"
    REPORT[number] = line
    print(line)


# --- power-flow audit ----------------------------------------------------------------

AUDIT = {"solves": 0, "worst": 0.0}
_solve = powerflow.solve_power_flow


def audited_solve(spec, demands=None, gen_vm=None, gen_p=None, *, Y=None, **kwargs):
    v = _solve(spec, demands, gen_vm, gen_p, Y=Y, **kwargs)
    y = build_admittance(spec).Y if Y is None else np.asarray(Y)
    d = spec.nominal_demands if demands is None else np.asarray(demands)
    p = spec.nominal_gen_p if gen_p is None else np.asarray(gen_p)
    vm = spec.nominal_gen_vm if gen_vm is None else np.asarray(gen_vm)
    s = v * np.conj(y @ v)
    res = max(
        np.max(np.abs(s[spec.load_indices] + d), initial=0.0),
        np.max(np.abs(s[spec.gen_indices].real - p), initial=0.0),
        np.max(np.abs(np.abs(v[spec.gen_indices]) - vm), initial=0.0),
        abs(abs(v[spec.slack_index]) - spec.buses[spec.slack_index].v_set),
    )
    AUDIT["solves"] += 1
    AUDIT["worst"] = max(AUDIT["worst"], float(res))
    return v


@pytest.fixture(scope="module", autouse=True)
def audit_power_flow():
    with pytest.MonkeyPatch.context() as mp:
        for mod in (doe_mod, harness_mod):
            mp.setattr(mod, "solve_power_flow", audited_solve)
        yield


# --- shared runs ---------------------------------------------------------------------

def static_config(grid, method, seed, **kw):
    sigma = 1e-5 if grid == "grid_d" else 1e-4
    iterations = 100 if grid == "grid_d" else 50
    base = ScenarioConfig(grid=grid, method=method, iterations=iterations, sigma_i=sigma,
                          loads=GaussianLoads(REL_STD[grid]), seed=seed)
    return replace(base, **kw)


@lru_cache(maxsize=None)
def final_static(grid, method, seed, **kw):
    rec = run_scenario(static_config(grid, method, seed, **kw))
    return rec.final["m_F"], rec.final["m_R"]


# --- 1 -------------------------------------------------------------------------------

def test_c1_structural_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_d = worst_t = 0.0
    for n in range(2, 21):
        d, t = duplication_matrix(n), transformation_matrix(n)
        for _ in range(100):
            a = random_symmetric(rng, n)
            worst_d = max(worst_d, np.max(np.abs(d @ vech(a) - vec(a))))
            lap = random_laplacian(rng, n)
            err = np.max(np.abs(t @ ve(lap) - vech(lap))) / np.max(np.abs(lap))
            worst_t = max(worst_t, err)
    printed = np.array(
        [[1, 1, 1, 0, 0, 0], [-1, 0, 0, 0, 0, 0], [0, -1, 0, 0, 0, 0], [0, 0, -1, 0, 0, 0],
         [1, 0, 0, 1, 1, 0], [0, 0, 0, -1, 0, 0], [0, 0, 0, 0, -1, 0], [0, 1, 0, 1, 0, 1],
         [0, 0, 0, 0, 0, -1], [0, 0, 1, 0, 1, 1]]
    )
    t4 = np.array_equal(transformation_matrix(4).dense, printed)
    elapsed = time.perf_counter() - t0
    ok = worst_d == 0.0 and worst_t < 1e-14 and t4 and elapsed < 10
    report(1, ok, f"max |D vech - vec| = {worst_d:.1e}, max rel |T ve - vech| = {worst_t:.1e}, "
                  f"T(4) as printed: {t4}, {elapsed:.1f} s")
    assert ok


# --- 2 -------------------------------------------------------------------------------

def test_c2_noise_free_consistency():
    t0 = time.perf_counter()
    spec = load_grid("grid_d")
    y = build_admittance(spec).Y
    cfg = ScenarioConfig(grid="grid_d", method="rls2", iterations=150, lam=1.0, sigma_i=0.0,
                         loads=GaussianLoads(REL_STD["grid_d"]), seed=0)
    p = parametrization_for(Method.RLS2, spec)
    x = parametrize(y, p)
    profile = generate_load_profile(cfg, spec, np.random.default_rng(0))
    state = initial_state(p, lam=1.0, delta=cfg.delta, K=cfg.K)
    w_prev = lyapunov(state, x)
    bound = np.sqrt(w_prev / np.linalg.eigvalsh(state.Z_inv).min())
    descent = bounded = True
    for k in range(cfg.iterations):
        v = audited_solve(spec, profile[k])
        state = rls_update(state, v, y @ v)
        w = lyapunov(state, x)
        descent &= w <= cfg.lam * w_prev + 1e-10
        bounded &= np.linalg.norm(state.x_hat - x) <= bound
        w_prev = w
    m_f = error_metrics(y, estimate_admittance(state).Y).m_F
    elapsed = time.perf_counter() - t0
    ok = descent and bounded and m_f < 1e-8 and elapsed < 30
    report(2, ok, f"W_t <= W_(t-1) every step: {descent}, error bounded: {bounded}, "
                  f"m_F after 150 = {m_f:.2e} (target < 1e-8), {elapsed:.1f} s")
    assert ok


# --- 3 -------------------------------------------------------------------------------

def test_c3_rls_equals_ridge_batch():
    t0 = time.perf_counter()
    worst = 0.0
    for g in range(20):
        rng = np.random.default_rng(100 + g)
        n = int(rng.integers(4, 9))
        spec = random_grid(rng, n, n_gen=int(rng.integers(1, 3)))
        y = build_admittance(spec).Y
        p = Parametrization(Mode.LAPLACIAN if g % 2 else Mode.SYMMETRIC, n)
        state = initial_state(p, lam=1.0)
        prior = (state.x_hat, state.Z)
        V, I = [], []
        nominal = spec.nominal_demands
        for _ in range(p.dim // n + 6):
            d = np.abs(nominal.real * (1 + 0.3 * rng.standard_normal(nominal.size))) + 1j * np.abs(
                nominal.imag * (1 + 0.3 * rng.standard_normal(nominal.size)))
            v = audited_solve(spec, d)
            i = y @ v + 1e-4 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
            V.append(v)
            I.append(i)
            state = rls_update(state, v, i)
            batch = ols_batch(np.array(V), np.array(I), p, prior=prior)
            worst = max(worst, np.linalg.norm(state.x_hat - batch) / np.linalg.norm(batch))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10
    report(3, ok, f"max relative gap RLS vs ridge batch over 20 grids = {worst:.1e}, {elapsed:.1f} s")
    assert ok


# --- 5 -------------------------------------------------------------------------------

def test_c5_grid_t_static():
    t0 = time.perf_counter()
    rls = np.array([final_static("grid_t", "rls1", s) for s in SEEDS])
    doe = np.array([final_static("grid_t", "doe", s) for s in SEEDS])
    mf_rls, mr_rls = np.median(rls, axis=0)
    mf_doe, mr_doe = np.median(doe, axis=0)
    elapsed = time.perf_counter() - t0

    def within3(x, ref):
        return ref / 3 <= x <= 3 * ref

    ok = mf_doe < mf_rls and within3(mr_doe, 0.027e-2) and within3(mr_rls, 0.097e-2) and elapsed < 300
    report(5, ok, f"median m_F DoE {mf_doe:.3f} < RLS1 {mf_rls:.3f}; m_R DoE {100 * mr_doe:.3f}% "
                  f"(ref 0.027%), RLS1 {100 * mr_rls:.3f}% (ref 0.097%), {elapsed:.0f} s")
    assert ok


# --- 6 -------------------------------------------------------------------------------

def test_c6_grid_d_static():
    t0 = time.perf_counter()
    res = {m: np.array([final_static("grid_d", m, s) for s in SEEDS]) for m in ("rls1", "rls2", "doe")}
    ordered = int(np.sum((res["doe"][:, 0] < res["rls2"][:, 0]) & (res["rls2"][:, 0] < res["rls1"][:, 0])))
    ref = {"doe": 0.047e-2, "rls2": 0.080e-2, "rls1": 0.095e-2}
    med = {m: float(np.median(res[m][:, 1])) for m in res}
    bands = all(ref[m] / 3 <= med[m] <= 3 * ref[m] for m in res)
    elapsed = time.perf_counter() - t0
    ok = ordered >= 8 and bands and elapsed < 600
    report(6, ok, f"DoE < RLS2 < RLS1 in {ordered}/10 seeds; median m_R DoE {100 * med['doe']:.3f}%, "
                  f"RLS2 {100 * med['rls2']:.3f}%, RLS1 {100 * med['rls1']:.3f}% "
                  f"(ref 0.047/0.080/0.095%), {elapsed:.0f} s")
    assert ok


# --- 7 -------------------------------------------------------------------------------

def first_below_one(rec, trip_at):
    """Iterations after the trip until the tracked estimate drops below 1 (inf if never)."""
    post = rec.tracked[trip_at:]  # samples trip_at + 1, ...
    hits = np.nonzero(post < 1)[0]
    return hits[0] + 1 if hits.size else np.inf


def test_c7_line_trip_tracking():
    d_hits = {m: 0 for m in ("rls1", "rls2", "doe")}
    d_lag = {m: [] for m in d_hits}
    for s in SEEDS:
        cfg = replace(static_config("grid_d", "rls1", s), iterations=107, scenario=LineTrip((7, 10), 100))
        for m in d_hits:
            lag = first_below_one(run_scenario(replace(cfg, method=m)), 100)
            d_lag[m].append(lag)
            d_hits[m] += lag <= 7
    t_ok = 0
    t_lag = []
    for s in SEEDS:
        cfg = replace(static_config("grid_t", "rls1", s), iterations=80, scenario=LineTrip((2, 6), 50))
        lag_doe = first_below_one(run_scenario(replace(cfg, method="doe")), 50)
        lag_rls = first_below_one(run_scenario(cfg), 50)
        t_lag.append((lag_doe, lag_rls))
        t_ok += np.isfinite(lag_doe) and lag_doe <= lag_rls
    ok = all(h >= 8 for h in d_hits.values()) and t_ok >= 8
    med = {m: float(np.median(d_lag[m])) for m in d_lag}
    report(7, ok, f"grid D |y_7,10| < 1 within 7 post-trip samples: RLS1 {d_hits['rls1']}/10, "
                  f"RLS2 {d_hits['rls2']}/10, DoE {d_hits['doe']}/10 (median lag {med}); "
                  f"grid T DoE no later than RLS1 in {t_ok}/10 "
                  f"(median lag DoE {np.median([a for a, _ in t_lag])}, RLS1 {np.median([b for _, b in t_lag])})")
    assert ok


# --- 8 -------------------------------------------------------------------------------

def random_feasible(spec, demands, prob_true, rng, tries=500):
    """Generator set-points drawn uniformly in their limits until the operating point
    on the physical grid meets every design constraint."""
    gens = [spec.buses[k] for k in spec.gen_indices]
    vlo, vhi = np.array([b.v_limits for b in gens]).T
    plo, phi = np.array([b.p_limits for b in gens]).T
    for _ in range(tries):
        try:
            v = audited_solve(spec, demands, rng.uniform(vlo, vhi), rng.uniform(plo, phi))
        except PowerFlowDivergence:
            continue
        if check_feasibility(v, prob_true) == 0.0:
            return v
    return None


def doe_limit_violations(res, spec):
    """Designed bus voltages and applied generator set-points outside their limits."""
    lo, hi = np.array([b.v_limits for b in spec.buses]).T
    count = 0
    if res.solution is not None:
        vm = np.abs(res.solution.v_star)
        count += int(np.sum((vm < lo - 1e-9) | (vm > hi + 1e-9)))
    g = spec.gen_indices
    count += int(np.sum((res.gen_vm < lo[g] - 1e-9) | (res.gen_vm > hi[g] + 1e-9)))
    return count


def test_c8_information_gain():
    spec = load_grid("grid_d")
    y = build_admittance(spec).Y
    cfg = static_config("grid_d", "doe", 0, iterations=300)
    load_rng, noise_rng, _ = _streams(0)
    profile = generate_load_profile(cfg, spec, load_rng)
    pick = np.random.default_rng(2024)
    noise = NoiseModel(cfg.sigma_i)
    state = initial_state(parametrization_for(Method.DOE, spec))
    trials = wins = viol = skipped = 0
    for k in range(cfg.iterations):
        if trials == 200:
            break
        prob = problem_from_state(state, spec, profile[k])
        v_rand = random_feasible(spec, profile[k], replace(prob, Y_hat_prev=y), pick)
        res = doe_step(state, spec, profile[k], noise=noise, rng=noise_rng, settings=DoESettings(seed=k))
        viol += doe_limit_violations(res, spec)
        if v_rand is None:
            skipped += 1
        else:
            trials += 1
            # larger det F  <=>  smaller -log det
            wins += information_objective(res.sample.v, prob) < information_objective(v_rand, prob)
        state = res.state

    spec_t = load_grid("grid_t")
    cfg_t = static_config("grid_t", "doe", 0)
    load_rng, noise_rng, _ = _streams(0)
    profile = generate_load_profile(cfg_t, spec_t, load_rng)
    state = initial_state(parametrization_for(Method.DOE, spec_t))
    viol_t = 0
    for k in range(cfg_t.iterations):
        res = doe_step(state, spec_t, profile[k], noise=NoiseModel(cfg_t.sigma_i), rng=noise_rng,
                       settings=DoESettings(seed=k))
        viol_t += doe_limit_violations(res, spec_t)
        state = res.state
    ok = trials == 200 and wins >= 180 and viol == 0 and viol_t == 0
    report(8, ok, f"det F larger with DoE in {wins}/{trials} paired trials ({skipped} steps without a "
                  f"random feasible draw skipped); voltage limit violations grid D {viol}, grid T {viol_t}")
    assert ok


# --- 9 -------------------------------------------------------------------------------

def test_c9_voltage_noise_sweep():
    levels = [1e-6, 1e-5, 1e-4]
    methods = ["rls1", "rls2", "doe"]
    tables = []
    for s in SEEDS:
        _, table = run_noise_sweep(static_config("grid_d", "rls1", s), levels, methods)
        tables.append(np.array(table)[:, 1:])
    med = np.median(np.array(tables), axis=0)  # rows: levels, cols: methods
    inversions = [int(np.sum(np.diff(med[:, j]) < 0)) for j in range(3)]
    doe_best = bool(np.all(med[:, 2] <= med[:, :2].min(axis=1)))
    ok = all(i <= 1 for i in inversions) and doe_best
    rows = "; ".join(f"sigma_v={lv:.0e}: " + "/".join(f"{x:.3f}" for x in med[i]) for i, lv in enumerate(levels))
    report(9, ok, f"median final m_F RLS1/RLS2/DoE {rows}; inversions {inversions}; DoE lowest: {doe_best}")
    assert ok


# --- 10 ------------------------------------------------------------------------------

def test_c10_true_admittance_ablation():
    est = np.median([final_static("grid_d", "doe", s)[0] for s in SEEDS])
    true = np.median([final_static("grid_d", "doe", s, doe_true_constraint=True)[0] for s in SEEDS])
    ok = est <= 2 * true
    report(10, ok, f"median final m_F with estimated Y {est:.4f}, with true Y {true:.4f}, ratio {est / true:.2f}")
    assert ok


# --- 4 (last, so that it covers every solve above) ------------------------------------

def test_c4_power_flow_residuals():
    ok = AUDIT["solves"] > 0 and AUDIT["worst"] <= 1e-8
    report(4, ok, f"{AUDIT['solves']} converged power flows, worst mismatch {AUDIT['worst']:.1e} p.u.")
    assert ok
