"""Grid description, admittance assembly and topology-change events.

All electrical quantities are per-unit.  Bus ``id`` values are the labels used in
files and on the CLI; internally buses are addressed by their position in
``GridSpec.buses``.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "BusKind",
    "Bus",
    "Line",
    "Shunt",
    "GridSpec",
    "AdmittanceMatrix",
    "GridError",
    "build_admittance",
    "apply_line_trip",
    "is_laplacian",
    "load_grid",
    "grid_from_dict",
    "grid_to_dict",
    "save_grid",
    "read_matpower",
    "bundled_grid",
    "DEFAULT_THETA_LIMITS",
]

DEFAULT_THETA_LIMITS = (-math.pi / 4, math.pi / 4)
_WIDE = (-1e6, 1e6)


class GridError(ValueError):
    """A grid description violates a structural requirement."""


class BusKind(str, enum.Enum):
    SLACK = "slack"
    GENERATOR = "generator"
    LOAD = "load"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    v_limits: tuple[float, float] = (0.9, 1.1)
    theta_limits: tuple[float, float] = DEFAULT_THETA_LIMITS
    # generators: nominal set-points and limits; slack: v_set only
    v_set: float = 1.0
    p_set: float = 0.0
    p_limits: tuple[float, float] = _WIDE
    q_limits: tuple[float, float] = _WIDE
    # loads: nominal consumption p + jq
    demand: complex = 0j

    def __post_init__(self):
        object.__setattr__(self, "kind", BusKind(self.kind))
        for name in ("v_limits", "theta_limits", "p_limits", "q_limits"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise GridError(f"bus {self.id}: empty interval {name}=({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    y: complex

    @property
    def edge(self) -> frozenset:
        return frozenset((self.from_bus, self.to_bus))


@dataclass(frozen=True)
class Shunt:
    bus: int
    y: complex


@dataclass(frozen=True)
class GridSpec:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    shunts: tuple[Shunt, ...] = ()
    base_mva: float = 1.0
    base_kv: float = 1.0
    name: str = ""
    notes: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "shunts", tuple(self.shunts))
        self._validate()

    # --- structure -----------------------------------------------------------
    def _validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        kinds = [b.kind for b in self.buses]
        if kinds.count(BusKind.SLACK) != 1:
            raise GridError("grid needs exactly one slack bus")
        if BusKind.GENERATOR not in kinds or BusKind.LOAD not in kinds:
            raise GridError("grid needs at least one generator and one load bus")
        known = set(ids)
        seen = set()
        for line in self.lines:
            if line.from_bus == line.to_bus:
                raise GridError(f"self-loop at bus {line.from_bus}")
            if line.from_bus not in known or line.to_bus not in known:
                raise GridError(f"line {line.from_bus}-{line.to_bus} references an unknown bus")
            if line.edge in seen:
                raise GridError(f"duplicate line {line.from_bus}-{line.to_bus}")
            if not line.y.real > 0:
                raise GridError(f"line {line.from_bus}-{line.to_bus} needs positive conductance")
            seen.add(line.edge)
        for shunt in self.shunts:
            if shunt.bus not in known:
                raise GridError(f"shunt at unknown bus {shunt.bus}")
        if not self.is_connected():
            raise GridError("grid graph is not connected")

    def is_connected(self) -> bool:
        n = self.n
        if not self.lines:
            return n == 1
        idx = self.index
        r = [idx[l.from_bus] for l in self.lines]
        c = [idx[l.to_bus] for l in self.lines]
        adj = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        return ncomp == 1

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    def _where(self, kind: BusKind) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.kind is kind], dtype=int)

    @property
    def slack_index(self) -> int:
        return int(self._where(BusKind.SLACK)[0])

    @property
    def gen_indices(self) -> np.ndarray:
        return self._where(BusKind.GENERATOR)

    @property
    def load_indices(self) -> np.ndarray:
        return self._where(BusKind.LOAD)

    @property
    def nominal_demands(self) -> np.ndarray:
        return np.array([self.buses[k].demand for k in self.load_indices], dtype=complex)

    @property
    def nominal_gen_vm(self) -> np.ndarray:
        return np.array([self.buses[k].v_set for k in self.gen_indices])

    @property
    def nominal_gen_p(self) -> np.ndarray:
        return np.array([self.buses[k].p_set for k in self.gen_indices])

    def line_between(self, i: int, k: int) -> Line:
        edge = frozenset((i, k))
        for line in self.lines:
            if line.edge == edge:
                return line
        raise GridError(f"no line between buses {i} and {k}")

    def with_line(self, line: Line) -> "GridSpec":
        return replace(self, lines=self.lines + (line,))


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    Y: np.ndarray
    is_symmetric: bool
    is_laplacian: bool

    def __array__(self, dtype=None, copy=None):
        return self.Y if dtype is None else self.Y.astype(dtype)


def build_admittance(spec: GridSpec) -> AdmittanceMatrix:
    n = spec.n
    idx = spec.index
    y = np.zeros((n, n), dtype=complex)
    for line in spec.lines:
        i, k = idx[line.from_bus], idx[line.to_bus]
        y[i, k] -= line.y
        y[k, i] -= line.y
        y[i, i] += line.y
        y[k, k] += line.y
    shunted = False
    for shunt in spec.shunts:
        y[idx[shunt.bus], idx[shunt.bus]] += shunt.y
        shunted = shunted or shunt.y != 0
    y.setflags(write=False)
    return AdmittanceMatrix(y, is_symmetric=True, is_laplacian=not shunted)


def is_laplacian(y, tol: float = 1e-9) -> bool:
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise ValueError("expected a square matrix")
    if y.size == 0:
        return True
    rowsum = np.max(np.abs(y.sum(axis=1)))
    asym = np.max(np.abs(y - y.T))
    return bool(rowsum <= tol and asym <= tol)


def apply_line_trip(spec: GridSpec, edge: tuple[int, int]) -> GridSpec:
    """Return ``spec`` without the line joining the two bus ids in ``edge``."""
    target = frozenset(edge)
    kept = tuple(l for l in spec.lines if l.edge != target)
    if len(kept) == len(spec.lines):
        raise GridError(f"no line between buses {edge[0]} and {edge[1]}")
    try:
        return replace(spec, lines=kept)
    except GridError as exc:
        raise GridError(f"tripping line {edge[0]}-{edge[1]} would disconnect the grid") from exc


# --- JSON grid files --------------------------------------------------------------

def _cplx(value) -> complex:
    if isinstance(value, (list, tuple)):
        re_, im = value
        return complex(re_, im)
    return complex(value)


def _pair(value, default):
    if value is None:
        return default
    lo, hi = value
    return (float(lo), float(hi))


def grid_from_dict(data: dict) -> GridSpec:
    """Build a :class:`GridSpec` from the JSON grid-file layout.

    Lines give either ``"y": [g, b]`` or ``"z": [r, x]``; optional
    ``"charging"`` (total line charging susceptance) is split into two shunts.
    """
    buses = []
    for b in data["buses"]:
        kind = BusKind(b["kind"])
        buses.append(
            Bus(
                id=int(b["id"]),
                kind=kind,
                v_limits=_pair(b.get("v_limits"), (0.9, 1.1)),
                theta_limits=_pair(b.get("theta_limits"), DEFAULT_THETA_LIMITS),
                v_set=float(b.get("v_set", 1.0)),
                p_set=float(b.get("p_set", 0.0)),
                p_limits=_pair(b.get("p_limits"), _WIDE),
                q_limits=_pair(b.get("q_limits"), _WIDE),
                demand=_cplx(b.get("demand", 0.0)),
            )
        )
    lines = []
    shunts = [Shunt(int(s["bus"]), _cplx(s["y"])) for s in data.get("shunts", [])]
    for l in data["lines"]:
        if "y" in l:
            y = _cplx(l["y"])
        else:
            y = 1.0 / _cplx(l["z"])
        lines.append(Line(int(l["from"]), int(l["to"]), y))
        b_ch = float(l.get("charging", 0.0))
        if b_ch:
            shunts.append(Shunt(int(l["from"]), 0.5j * b_ch))
            shunts.append(Shunt(int(l["to"]), 0.5j * b_ch))
    base = data.get("base", {})
    return GridSpec(
        buses=tuple(buses),
        lines=tuple(lines),
        shunts=tuple(_merge_shunts(shunts)),
        base_mva=float(base.get("mva", 1.0)),
        base_kv=float(base.get("kv", 1.0)),
        name=data.get("name", ""),
        notes=data.get("notes", ""),
    )


def _merge_shunts(shunts):
    total: dict[int, complex] = {}
    for s in shunts:
        total[s.bus] = total.get(s.bus, 0j) + s.y
    return [Shunt(b, y) for b, y in total.items()]


def grid_to_dict(spec: GridSpec) -> dict:
    def c(z):
        return [z.real, z.imag]

    buses = []
    for b in spec.buses:
        row = {"id": b.id, "kind": b.kind.value, "v_limits": list(b.v_limits),
               "theta_limits": list(b.theta_limits), "v_set": b.v_set}
        if b.kind is BusKind.GENERATOR:
            row.update(p_set=b.p_set, p_limits=list(b.p_limits), q_limits=list(b.q_limits))
        if b.kind is BusKind.LOAD:
            row["demand"] = c(b.demand)
        buses.append(row)
    return {
        "name": spec.name,
        "notes": spec.notes,
        "base": {"mva": spec.base_mva, "kv": spec.base_kv},
        "buses": buses,
        "lines": [{"from": l.from_bus, "to": l.to_bus, "y": c(l.y)} for l in spec.lines],
        "shunts": [{"bus": s.bus, "y": c(s.y)} for s in spec.shunts],
    }


def save_grid(spec: GridSpec, path) -> None:
    Path(path).write_text(json.dumps(grid_to_dict(spec), indent=2))


def load_grid(path) -> GridSpec:
    """Load a grid from a JSON file, a MATPOWER ``.m`` case, or a bundled name."""
    p = Path(path)
    if not p.exists() and str(path) in _BUNDLED:
        return bundled_grid(str(path))
    if p.suffix == ".m":
        return read_matpower(p)
    return grid_from_dict(json.loads(p.read_text()))


_BUNDLED = {"grid_t": "grid_t.m", "grid_d": "grid_d.json"}


def bundled_grid(name: str) -> GridSpec:
    """``"grid_t"`` (Wood & Wollenberg 6-bus) or ``"grid_d"`` (modified IEEE 13-bus)."""
    fname = _BUNDLED[name]
    res = resources.files("gridest.data").joinpath(fname)
    text = res.read_text()
    if fname.endswith(".m"):
        return parse_matpower(text, name=name)
    return grid_from_dict(json.loads(text))


# --- MATPOWER case files ------------------------------------------------------------
#
# bus:    BUS_I TYPE PD QD GS BS AREA VM VA BASE_KV ZONE VMAX VMIN
# gen:    GEN_BUS PG QG QMAX QMIN VG MBASE STATUS PMAX PMIN ...
# branch: F_BUS T_BUS BR_R BR_X BR_B RATE_A RATE_B RATE_C TAP SHIFT BR_STATUS ...
# TYPE: 1 = PQ, 2 = PV, 3 = reference.  Powers in MW/MVAr, GS/BS in MW/MVAr at 1 p.u.

_MP_BLOCK = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)
_MP_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def _matrix(body: str) -> np.ndarray:
    rows = []
    for line in body.splitlines():
        for raw in line.split("%", 1)[0].split(";"):
            raw = raw.strip()
            if raw:
                rows.append([float(tok) for tok in raw.replace(",", " ").split()])
    return np.array(rows, dtype=float)


def parse_matpower(text: str, name: str = "") -> GridSpec:
    scalars = {k: float(v) for k, v in _MP_SCALAR.findall(text)}
    blocks = {k: _matrix(v) for k, v in _MP_BLOCK.findall(text)}
    base_mva = scalars.get("baseMVA", 100.0)
    bus, gen, branch = blocks["bus"], blocks["gen"], blocks["branch"]
    theta = {int(r[0]): (math.radians(r[1]), math.radians(r[2])) for r in blocks.get("bus_theta", [])}

    gens = {int(r[0]): r for r in gen if len(r) < 8 or r[7] > 0}
    buses, shunts = [], []
    for r in bus:
        bid, btype = int(r[0]), int(r[1])
        gs, bs = r[4], r[5]
        if gs or bs:
            shunts.append(Shunt(bid, complex(gs, bs) / base_mva))
        common = dict(id=bid, v_limits=(r[12], r[11]), theta_limits=theta.get(bid, DEFAULT_THETA_LIMITS))
        g = gens.get(bid)
        if btype == 3:
            buses.append(Bus(kind=BusKind.SLACK, v_set=g[5] if g is not None else r[7], **common))
        elif btype == 2 and g is not None:
            buses.append(
                Bus(
                    kind=BusKind.GENERATOR,
                    v_set=g[5],
                    p_set=(g[1] - r[2]) / base_mva,
                    p_limits=(g[9] / base_mva, g[8] / base_mva),
                    q_limits=(g[4] / base_mva, g[3] / base_mva),
                    **common,
                )
            )
        else:
            buses.append(Bus(kind=BusKind.LOAD, demand=complex(r[2], r[3]) / base_mva, **common))

    lines = []
    for r in branch:
        if len(r) > 10 and r[10] == 0:
            continue
        if len(r) > 9 and ((r[8] not in (0.0, 1.0)) or r[9] != 0.0):
            raise GridError("off-nominal taps and phase shifters are not supported")
        f, t = int(r[0]), int(r[1])
        lines.append(Line(f, t, 1.0 / complex(r[2], r[3])))
        if r[4]:
            shunts.append(Shunt(f, 0.5j * r[4]))
            shunts.append(Shunt(t, 0.5j * r[4]))
    base_kv = float(bus[0, 9]) if bus.shape[1] > 9 else 1.0
    notes = "\n".join(l[1:].strip() for l in text.splitlines() if l.startswith("%"))
    return GridSpec(
        buses=tuple(buses),
        lines=tuple(lines),
        shunts=tuple(_merge_shunts(shunts)),
        base_mva=base_mva,
        base_kv=base_kv,
        name=name,
        notes=notes,
    )


def read_matpower(path) -> GridSpec:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)
