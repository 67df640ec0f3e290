"""Scenario runner: load synthesis, estimation loop, metric series and CSV output."""
from __future__ import annotations

import csv
import enum
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .doe import DoESettings, doe_step
from .estimator import (
    RankDeficientError,
    error_metrics,
    estimate_admittance,
    initial_state,
    ols_batch,
    rls_update,
)
from .netmodel import GridSpec, apply_line_trip, build_admittance, load_grid
from .powerflow import (
    NoiseModel,
    PowerFlowDivergence,
    add_measurement_noise,
    make_sample,
    solve_power_flow,
)
from .structvec import Mode, Parametrization, reconstruct_admittance

log = logging.getLogger(__name__)

__all__ = [
    "Method",
    "LineTrip",
    "GaussianLoads",
    "CsvLoads",
    "ScenarioConfig",
    "ConfigError",
    "RunRecord",
    "parametrization_for",
    "generate_load_profile",
    "run_scenario",
    "run_methods",
    "run_noise_sweep",
    "load_config",
    "write_series",
]

PF_RANGE = (0.85, 0.95)
MAX_REDRAWS = 10


class ConfigError(ValueError):
    pass


class Method(str, enum.Enum):
    RLS1 = "rls1"
    RLS2 = "rls2"
    DOE = "doe"
    OLS = "ols"

    @property
    def label(self) -> str:
        return self.name


@dataclass(frozen=True)
class LineTrip:
    """The line between bus ids ``edge`` opens right after sample ``trip_at``."""

    edge: tuple[int, int]
    trip_at: int

    def __post_init__(self):
        object.__setattr__(self, "edge", (int(self.edge[0]), int(self.edge[1])))

    @classmethod
    def parse(cls, text: str) -> "LineTrip":
        """``"trip:7-10@100"`` or ``"7-10@100"``."""
        body = text.split(":", 1)[1] if text.startswith("trip:") else text
        try:
            edge, at = body.split("@")
            i, k = edge.split("-")
            return cls((int(i), int(k)), int(at))
        except ValueError as exc:
            raise ConfigError(f"cannot parse line trip {text!r}; expected trip:<i>-<j>@<t>") from exc

    def __str__(self):
        return f"trip:{self.edge[0]}-{self.edge[1]}@{self.trip_at}"


@dataclass(frozen=True)
class GaussianLoads:
    """Independent Gaussian P and Q around the nominal demand, std = rel_std * nominal."""

    rel_std: float = 0.05

    def __post_init__(self):
        if self.rel_std < 0:
            raise ConfigError("rel_std must be non-negative")


@dataclass(frozen=True)
class CsvLoads:
    """Per-iteration demands from a CSV file.

    One row per iteration, columns ``P<id>`` (and optionally ``Q<id>``) for each
    load bus id, in p.u.  Missing reactive power is synthesised with a random
    lagging power factor in [0.85, 0.95].
    """

    path: str


@dataclass(frozen=True)
class ScenarioConfig:
    grid: str = "grid_d"
    method: Method = Method.RLS1
    scenario: LineTrip | None = None
    iterations: int = 100
    lam: float = 0.8
    delta: float = 1e-4
    K: float = 1e4
    sigma_i: float = 1e-5
    sigma_v: float = 0.0
    loads: GaussianLoads | CsvLoads = field(default_factory=GaussianLoads)
    seed: int = 0
    out: str | None = None
    track: tuple[int, int] | None = None
    doe_starts: int = 5
    doe_method: str = "sqp"
    doe_true_constraint: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if not 0 < self.lam <= 1:
            raise ConfigError("lambda must lie in (0, 1]")
        if self.sigma_i < 0 or self.sigma_v < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.scenario is not None:
            if not 1 <= self.scenario.trip_at < self.iterations:
                raise ConfigError("trip_at must lie in [1, iterations)")
            if self.method is Method.OLS:
                raise ConfigError("batch least squares cannot follow a topology change")
        if self.track is not None:
            object.__setattr__(self, "track", (int(self.track[0]), int(self.track[1])))
        if self.doe_starts < 1:
            raise ConfigError("doe_starts must be at least 1")

    @property
    def tracked_edge(self) -> tuple[int, int] | None:
        if self.track is not None:
            return self.track
        return None if self.scenario is None else self.scenario.edge

    # --- (de)serialisation ---------------------------------------------------------
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["method"] = self.method.value
        d["scenario"] = "static" if self.scenario is None else str(self.scenario)
        if isinstance(self.loads, GaussianLoads):
            d["loads"] = {"model": "gaussian", "rel_std": self.loads.rel_std}
        else:
            d["loads"] = {"model": "csv", "path": self.loads.path}
        d["track"] = None if self.track is None else list(self.track)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        scen = data.get("scenario")
        if isinstance(scen, str):
            data["scenario"] = None if scen == "static" else LineTrip.parse(scen)
        elif isinstance(scen, dict):
            data["scenario"] = LineTrip(tuple(scen["edge"]), scen["trip_at"])
        loads = data.get("loads")
        if isinstance(loads, dict):
            model = loads.get("model", "gaussian")
            if model == "gaussian":
                data["loads"] = GaussianLoads(float(loads.get("rel_std", 0.05)))
            elif model == "csv":
                data["loads"] = CsvLoads(str(loads["path"]))
            else:
                raise ConfigError(f"unknown load model {model!r}")
        if data.get("track") is not None:
            data["track"] = tuple(data["track"])
        return cls(**data)


def load_config(path) -> ScenarioConfig:
    """Read a JSON scenario file; keys mirror ``ScenarioConfig`` fields."""
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text()))


def parametrization_for(method: Method, spec: GridSpec) -> Parametrization:
    """RLS1 imposes symmetry, RLS2 the Laplacian structure; DoE and OLS use the
    Laplacian structure when the grid has it and symmetry otherwise."""
    laplacian = build_admittance(spec).is_laplacian
    method = Method(method)
    if method is Method.RLS1:
        mode = Mode.SYMMETRIC
    elif method is Method.RLS2:
        if not laplacian:
            raise ConfigError("RLS2 needs a grid without shunt elements (Laplacian admittance)")
        mode = Mode.LAPLACIAN
    else:
        mode = Mode.LAPLACIAN if laplacian else Mode.SYMMETRIC
    return Parametrization(mode, spec.n)


# --- load profiles -------------------------------------------------------------------

def _gaussian_row(nominal, rel_std, rng):
    p = nominal.real * (1 + rel_std * rng.standard_normal(nominal.size))
    q = nominal.imag * (1 + rel_std * rng.standard_normal(nominal.size))
    return p, q


def _valid(part, nominal_part):
    # components with a positive nominal value must stay positive
    return (part > 0) | (nominal_part <= 0)


def _draw_gaussian(nominal, rel_std, rng):
    p, q = _gaussian_row(nominal, rel_std, rng)
    for _ in range(MAX_REDRAWS):
        bad_p = ~_valid(p, nominal.real)
        bad_q = ~_valid(q, nominal.imag)
        if not (bad_p.any() or bad_q.any()):
            return p + 1j * q
        p2, q2 = _gaussian_row(nominal, rel_std, rng)
        p = np.where(bad_p, p2, p)
        q = np.where(bad_q, q2, q)
    raise ConfigError(f"could not draw positive demands in {MAX_REDRAWS} attempts; rel_std too large")


def _read_csv_profile(path, spec: GridSpec, iterations: int, rng) -> np.ndarray:
    ids = [spec.buses[k].id for k in spec.load_indices]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) < iterations:
        raise ConfigError(f"{path}: {len(rows)} rows, {iterations} iterations requested")
    rows = rows[:iterations]
    header = rows[0].keys() if rows else []
    missing = [f"P{i}" for i in ids if f"P{i}" not in header]
    if missing:
        raise ConfigError(f"{path}: missing columns {missing}")
    p = np.array([[float(r[f"P{i}"]) for i in ids] for r in rows])
    if all(f"Q{i}" in header for i in ids):
        q = np.array([[float(r[f"Q{i}"]) for i in ids] for r in rows])
    else:
        pf = rng.uniform(*PF_RANGE, size=p.shape)
        q = p * np.tan(np.arccos(pf))
    return p + 1j * q


def generate_load_profile(config: ScenarioConfig, spec: GridSpec, rng) -> np.ndarray:
    """Demands for every iteration, shape ``(iterations, number of load buses)``."""
    if isinstance(config.loads, CsvLoads):
        return _read_csv_profile(config.loads.path, spec, config.iterations, rng)
    nominal = spec.nominal_demands
    return np.array(
        [_draw_gaussian(nominal, config.loads.rel_std, rng) for _ in range(config.iterations)]
    )


# --- records ------------------------------------------------------------------------

@dataclass(eq=False)
class RunRecord:
    """Per-iteration results of one run; row ``k`` belongs to sample ``t = k + 1``."""

    method: Method
    config: ScenarioConfig
    t: np.ndarray
    m_F: np.ndarray
    m_max: np.ndarray
    m_R: np.ndarray
    tracked: np.ndarray
    tracked_true: np.ndarray
    gen_vm: np.ndarray
    objective: np.ndarray
    fallback: np.ndarray
    pf_mismatch: np.ndarray
    events: list[str] = field(default_factory=list)
    Y_hat: np.ndarray | None = None

    @property
    def final(self):
        return {"m_F": float(self.m_F[-1]), "m_max": float(self.m_max[-1]), "m_R": float(self.m_R[-1])}

    def rows(self):
        ng = self.gen_vm.shape[1]
        header = ["SAMPLE", "M_F", "M_MAX", "M_R", "TRACKED", "REAL"]
        header += [f"V{k + 1}" for k in range(ng)] + ["OBJECTIVE", "FALLBACK"]
        yield header
        for k in range(self.t.size):
            yield (
                [int(self.t[k]), self.m_F[k], self.m_max[k], self.m_R[k], self.tracked[k], self.tracked_true[k]]
                + list(self.gen_vm[k])
                + [self.objective[k], int(self.fallback[k])]
            )

    def write_csv(self, path) -> None:
        _write_rows(path, self.rows())


def _fmt(x):
    if isinstance(x, (int, np.integer, str)):
        return str(x)
    return repr(float(x))


def _write_rows(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


# --- the loop ------------------------------------------------------------------------

def _streams(seed: int):
    loads, noise, doe = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(loads), np.random.default_rng(noise), doe


def _mismatch(spec: GridSpec, y, v, demands, gen_p) -> float:
    s = v * np.conj(y @ v)
    d = [s[spec.load_indices] + demands, s[spec.gen_indices].real - gen_p]
    return float(max(np.max(np.abs(x), initial=0.0) for x in d))


def _edge_index(spec: GridSpec, edge):
    idx = spec.index
    try:
        return idx[edge[0]], idx[edge[1]]
    except KeyError as exc:
        raise ConfigError(f"tracked line {edge} references an unknown bus") from exc


def run_scenario(config: ScenarioConfig, spec: GridSpec | None = None) -> RunRecord:
    """Run one method through one scenario.

    Every iteration draws loads, obtains voltages (nominal set-points or DoE),
    measures with noise, updates the estimate and scores it against the true
    admittance matrix in force at that iteration.  The load and noise streams
    depend only on ``config.seed``, so runs of different methods with the same
    seed see identical demands and noise.
    """
    spec = load_grid(config.grid) if spec is None else spec
    method = config.method
    param = parametrization_for(method, spec)
    load_rng, noise_rng, doe_seq = _streams(config.seed)
    profile = generate_load_profile(config, spec, load_rng)
    noise = NoiseModel(config.sigma_i, config.sigma_v)
    edge = config.tracked_edge
    track = None if edge is None else _edge_index(spec, edge)
    settings = DoESettings(method=config.doe_method, starts=config.doe_starts)

    T = config.iterations
    out = {k: np.full(T, np.nan) for k in ("m_F", "m_max", "m_R", "tracked", "tracked_true", "objective", "pf")}
    gen_vm = np.full((T, spec.gen_indices.size), np.nan)
    fallback = np.zeros(T, dtype=bool)
    events: list[str] = []

    state = initial_state(param, config.lam, config.delta, config.K)
    history_v, history_i = [], []
    grid = spec
    y_true = build_admittance(grid).Y
    y_hat = None
    for k in range(T):
        t = k + 1
        demands = profile[k]
        for attempt in range(2):
            try:
                if method is Method.DOE:
                    step_settings = replace(settings, seed=int(doe_seq.spawn(1)[0].generate_state(1)[0]))
                    y_con = y_true if config.doe_true_constraint else None
                    res = doe_step(
                        state, spec, demands, noise=noise, rng=noise_rng, true_spec=grid,
                        Y_constraint=y_con, settings=step_settings,
                    )
                    sample, gen_p = res.sample, res.gen_p
                    fallback[k] = res.fallback
                    if res.solution is not None:
                        out["objective"][k] = res.solution.objective
                    state = res.state
                else:
                    v = solve_power_flow(grid, demands)
                    gen_p = grid.nominal_gen_p
                    sample = add_measurement_noise(make_sample(t, y_true, v), noise, noise_rng)
                break
            except PowerFlowDivergence as exc:
                events.append(f"t={t}: power flow diverged ({exc})")
                if attempt == 1 or isinstance(config.loads, CsvLoads):
                    raise
                demands = _draw_gaussian(spec.nominal_demands, config.loads.rel_std, load_rng)
        out["pf"][k] = _mismatch(grid, y_true, sample.v, demands, gen_p)
        gen_vm[k] = np.abs(sample.v[spec.gen_indices])

        if method in (Method.RLS1, Method.RLS2):
            state = rls_update(state, sample.v_noisy, sample.i_noisy)
        if method is Method.OLS:
            history_v.append(sample.v_noisy)
            history_i.append(sample.i_noisy)
            try:
                y_hat = reconstruct_admittance(ols_batch(history_v, history_i, param), param)
            except RankDeficientError:
                y_hat = None
        else:
            y_hat = estimate_admittance(state).Y

        if config.scenario is not None and t == config.scenario.trip_at:
            grid = apply_line_trip(grid, config.scenario.edge)
            y_true = build_admittance(grid).Y
            i, j = config.scenario.edge
            events.append(f"t={t}: line {i}-{j} tripped")
        if track is not None:
            out["tracked_true"][k] = abs(y_true[track])
        if y_hat is not None:
            m = error_metrics(y_true, y_hat)
            out["m_F"][k], out["m_max"][k], out["m_R"][k] = m.m_F, m.m_max, m.m_R
            if track is not None:
                out["tracked"][k] = abs(y_hat[track])

    record = RunRecord(
        method=method,
        config=config,
        t=np.arange(1, T + 1),
        m_F=out["m_F"],
        m_max=out["m_max"],
        m_R=out["m_R"],
        tracked=out["tracked"],
        tracked_true=out["tracked_true"],
        gen_vm=gen_vm,
        objective=out["objective"],
        fallback=fallback,
        pf_mismatch=out["pf"],
        events=events,
        Y_hat=y_hat,
    )
    if config.out:
        record.write_csv(Path(config.out) / f"record_{method.value}.csv")
    return record


# --- several runs -------------------------------------------------------------------

def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_series(records: dict, out_dir) -> None:
    """Merged per-method CSVs: ``SAMPLE,<METHOD>...`` metric series, the tracked
    line as ``SAMPLE,<METHOD>...,REAL`` and DoE generator voltages."""
    out_dir = Path(out_dir)
    recs = list(records.values())
    if not recs:
        return
    t = recs[0].t
    labels = [r.method.label for r in recs]
    for fname, attr in (("fro_errors.csv", "m_F"), ("max_errors.csv", "m_max"), ("rel_errors.csv", "m_R")):
        rows = [["SAMPLE"] + labels]
        rows += [[int(t[k])] + [getattr(r, attr)[k] for r in recs] for k in range(t.size)]
        _write_rows(out_dir / fname, rows)
    if recs[0].config.tracked_edge is not None:
        rows = [["SAMPLE"] + labels + ["REAL"]]
        rows += [[int(t[k])] + [r.tracked[k] for r in recs] + [recs[0].tracked_true[k]] for k in range(t.size)]
        _write_rows(out_dir / "line_estimation.csv", rows)
    for r in recs:
        if r.method is Method.DOE:
            ng = r.gen_vm.shape[1]
            rows = [["SAMPLE"] + [f"V{j + 1}" for j in range(ng)]]
            rows += [[int(t[k])] + list(r.gen_vm[k]) for k in range(t.size)]
            _write_rows(out_dir / "doe_voltages.csv", rows)


def run_methods(config: ScenarioConfig, methods, jobs: int = 1) -> dict:
    """One run per method with a shared seed; writes merged series when ``config.out`` is set."""
    configs = [replace(config, method=Method(m)) for m in methods]
    records = dict(zip([c.method for c in configs], _map(run_scenario, configs, jobs)))
    if config.out:
        write_series(records, config.out)
    return records


def _sweep_one(args):
    config, sigma_v = args
    return run_scenario(replace(config, sigma_v=sigma_v, out=None)).final["m_F"]


def run_noise_sweep(config: ScenarioConfig, sigma_v_list, methods=None, jobs: int = 1):
    """Final Frobenius error per (method, sigma_v); rows ``[sigma_v, m_F(method)...]``.

    All runs share ``config.seed``, so the load and current-noise draws are
    paired across methods and noise levels.
    """
    if methods is None:
        methods = [config.method]
    methods = [Method(m) for m in methods]
    sigmas = [float(s) for s in sigma_v_list]
    tasks = [(replace(config, method=m), s) for s in sigmas for m in methods]
    values = _map(_sweep_one, tasks, jobs)
    table = [[s] + values[i * len(methods):(i + 1) * len(methods)] for i, s in enumerate(sigmas)]
    if config.out:
        _write_rows(
            Path(config.out) / "noise_sensitivity.csv",
            [["SD_V"] + [m.label for m in methods]] + table,
        )
    return [m.label for m in methods], table
