"""Radial distribution network model and steady-state power flow.

The network is a tree rooted at the source bus (id 0). An ideal tap-changing
transformer sits between the stiff source and the root bus, so the root
voltage is ``slack_v_pu * (1 + tap_step * tap)``. The solver is a
backward/forward sweep expressed with precomputed path matrices: the backward
pass aggregates load currents into branch currents, the forward pass applies
the accumulated impedance drops from the root.

All quantities are per-unit on the model's own bases; loads and PV limits are
carried in kW/kvar and converted internally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources

import numpy as np


class GridError(Exception):
    """Malformed network data or a corrupt (non-finite) power-flow input."""


@dataclass(frozen=True)
class PvSite:
    """An inverter site: bus id plus active/reactive capability in kW/kvar."""

    bus: int
    p_max_kw: float
    q_max_kvar: float


# Inverter capability per bus, reactive limit = 0.4 * active limit.
DEFAULT_PV_TABLE: tuple[PvSite, ...] = (
    PvSite(9, 600.0, 240.0),
    PvSite(12, 600.0, 240.0),
    PvSite(15, 1000.0, 400.0),
    PvSite(21, 400.0, 160.0),
    PvSite(24, 400.0, 160.0),
    PvSite(29, 600.0, 240.0),
    PvSite(32, 1000.0, 400.0),
)


@dataclass
class NetworkModel:
    """Feeder data: buses, lines, PV sites, bases and the tap coupling.

    Treat instances as immutable after construction; the solver caches the
    tree topology on first use and concurrent readers share it.
    """

    bus_p_kw: np.ndarray
    bus_q_kvar: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    line_r_ohm: np.ndarray
    line_x_ohm: np.ndarray
    pv_sites: tuple[PvSite, ...]
    v_base_kv: float = 12.66
    s_base_mva: float = 1.0
    slack_v_pu: float = 1.0
    tap_step: float = 0.00625
    tap_min: int = -8
    tap_max: int = 8
    _topo: "_Topology | None" = field(default=None, repr=False, compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.bus_p_kw)

    @property
    def n_line(self) -> int:
        return len(self.line_from)

    @property
    def n_pv(self) -> int:
        return len(self.pv_sites)

    @property
    def pv_buses(self) -> np.ndarray:
        return np.array([s.bus for s in self.pv_sites], dtype=int)

    @property
    def pv_p_max_kw(self) -> np.ndarray:
        return np.array([s.p_max_kw for s in self.pv_sites])

    @property
    def pv_q_max_kvar(self) -> np.ndarray:
        return np.array([s.q_max_kvar for s in self.pv_sites])

    @property
    def z_base_ohm(self) -> float:
        return self.v_base_kv**2 / self.s_base_mva

    def tap_ratio(self, tap: int) -> float:
        if not self.tap_min <= tap <= self.tap_max:
            raise GridError(f"tap {tap} outside [{self.tap_min}, {self.tap_max}]")
        return 1.0 + self.tap_step * tap

    def topology(self) -> "_Topology":
        if self._topo is None:
            object.__setattr__(self, "_topo", _build_topology(self))
        return self._topo


@dataclass(frozen=True)
class Injections:
    """Per-bus net draw (load minus PV) in kW/kvar plus the tap position."""

    p_kw: np.ndarray
    q_kvar: np.ndarray
    tap: int = 0


@dataclass(frozen=True)
class PowerFlowResult:
    """Solved operating point.

    ``i_line`` follows the model's line order, positive from the root side
    toward the leaf side. ``v0``/``i0`` are the transformer's feeder-side
    voltage and the total current flowing into the feeder (positive into the
    feeder, so reverse power flow makes the real part negative).
    """

    v: np.ndarray
    i_line: np.ndarray
    loss_pu: float
    v0: complex
    i0: complex
    iterations: int
    converged: bool

    @property
    def v_abs(self) -> np.ndarray:
        return np.abs(self.v)


@dataclass(frozen=True)
class _Topology:
    parent: np.ndarray           # parent bus of each bus (-1 for root)
    path: np.ndarray             # (n_bus, n_line) 1 if line lies on root->bus path
    root_lines: np.ndarray       # indices of lines incident to the root
    z_pu: np.ndarray             # complex line impedance, p.u.
    r_pu: np.ndarray


def _build_topology(model: NetworkModel) -> _Topology:
    problems = validate_network(model)
    if problems:
        raise GridError("invalid network: " + "; ".join(problems))

    n = model.n_bus
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k in range(model.n_line):
        a, b = int(model.line_from[k]), int(model.line_to[k])
        adj[a].append((b, k))
        adj[b].append((a, k))

    parent = np.full(n, -1, dtype=int)
    parent_line = np.full(n, -1, dtype=int)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        u = stack.pop()
        for v, k in adj[u]:
            if not seen[v]:
                seen[v] = True
                parent[v] = u
                parent_line[v] = k
                stack.append(v)

    path = np.zeros((n, model.n_line))
    for b in range(1, n):
        u = b
        while u != 0:
            path[b, parent_line[u]] = 1.0
            u = parent[u]

    z_pu = (model.line_r_ohm + 1j * model.line_x_ohm) / model.z_base_ohm
    root_lines = np.where((model.line_from == 0) | (model.line_to == 0))[0]
    return _Topology(
        parent=parent,
        path=path,
        root_lines=root_lines,
        z_pu=z_pu,
        r_pu=model.line_r_ohm / model.z_base_ohm,
    )


def validate_network(model: NetworkModel) -> list[str]:
    """Return human-readable structural violations; empty iff well-formed."""

    problems: list[str] = []
    n = model.n_bus
    if n == 0:
        return ["empty bus list"]
    if model.s_base_mva <= 0:
        problems.append("power base must be positive")
    if model.v_base_kv <= 0:
        problems.append("voltage base must be positive")
    for k in range(model.n_line):
        a, b = int(model.line_from[k]), int(model.line_to[k])
        if not (0 <= a < n and 0 <= b < n) or a == b:
            problems.append(f"line {k} references invalid buses ({a}, {b})")
        if model.line_r_ohm[k] < 0 or model.line_x_ohm[k] < 0:
            problems.append(f"negative impedance on line {k}")

    if any(p.startswith("line") for p in problems):
        return problems

    # BFS from the root, flagging back edges (cycles) and unreachable buses.
    adj: list[list[int]] = [[] for _ in range(n)]
    for k in range(model.n_line):
        adj[int(model.line_from[k])].append(k)
        adj[int(model.line_to[k])].append(k)
    seen = np.zeros(n, dtype=bool)
    used = np.zeros(model.n_line, dtype=bool)
    seen[0] = True
    stack = [0]
    cycle = False
    while stack:
        u = stack.pop()
        for k in adj[u]:
            if used[k]:
                continue
            used[k] = True
            v = int(model.line_to[k]) if int(model.line_from[k]) == u else int(model.line_from[k])
            if seen[v]:
                cycle = True
            else:
                seen[v] = True
                stack.append(v)
    if cycle:
        problems.append("cycle detected")
    for b in range(n):
        if not seen[b]:
            problems.append(f"disconnected bus {b}")
    if model.n_line != n - 1 and not cycle and seen.all():
        problems.append(f"expected {n - 1} lines for a tree, found {model.n_line}")

    pv_seen: set[int] = set()
    for s in model.pv_sites:
        if not 0 < s.bus < n:
            problems.append(f"pv site references missing bus {s.bus}")
        if s.bus in pv_seen:
            problems.append(f"duplicate pv bus {s.bus}")
        pv_seen.add(s.bus)
    return problems


def build_ieee33(pv_table: tuple[PvSite, ...] | list[PvSite] = DEFAULT_PV_TABLE) -> NetworkModel:
    """Build the 33-bus feeder from the packaged data file.

    ``pv_table`` replaces the packaged PV section; entries must reference
    distinct buses in 1..32.
    """

    data = resources.files("voltcoord").joinpath("data/ieee33.csv")
    with resources.as_file(data) as path:
        model = load_network_csv(str(path))
    seen: set[int] = set()
    for s in pv_table:
        if not 1 <= s.bus <= model.n_bus - 1:
            raise GridError(f"pv bus {s.bus} out of range 1..{model.n_bus - 1}")
        if s.bus in seen:
            raise GridError(f"duplicate pv bus {s.bus}")
        seen.add(s.bus)
    model.pv_sites = tuple(pv_table)
    return model


def solve_power_flow(
    model: NetworkModel,
    inj: Injections,
    tolerance: float = 1e-8,
    max_iter: int = 100,
) -> PowerFlowResult:
    """Backward/forward sweep to a fixed point with constant-power loads.

    Returns a converged result, or the last iterate with ``converged=False``
    when ``max_iter`` is exhausted. Non-finite inputs or iterates raise
    ``GridError``.
    """

    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    topo = model.topology()
    if not (np.all(np.isfinite(inj.p_kw)) and np.all(np.isfinite(inj.q_kvar))):
        raise GridError("non-finite injection input")

    s_pu = (inj.p_kw + 1j * inj.q_kvar) / (1000.0 * model.s_base_mva)
    v_root = model.slack_v_pu * model.tap_ratio(inj.tap)

    n = model.n_bus
    v = np.full(n, v_root, dtype=complex)
    i_line = np.zeros(model.n_line, dtype=complex)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        i_load = np.conj(s_pu / v)
        i_line = topo.path.T @ i_load
        v_new = v_root - topo.path @ (topo.z_pu * i_line)
        if not np.all(np.isfinite(v_new)):
            raise GridError("power flow produced non-finite voltages")
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta <= tolerance:
            converged = True
            break

    i_load = np.conj(s_pu / v)
    i0 = complex(i_load[0] + i_line[topo.root_lines].sum())
    loss_pu = float(np.sum(np.abs(i_line) ** 2 * topo.r_pu))
    return PowerFlowResult(
        v=v,
        i_line=i_line,
        loss_pu=loss_pu,
        v0=complex(v[0]),
        i0=i0,
        iterations=iterations,
        converged=converged,
    )


# --- network file i/o ------------------------------------------------------

_SECTION_HEADERS = {
    "BUS": ["BUS", "id", "p_kw", "q_kvar"],
    "LINE": ["LINE", "from", "to", "r_ohm", "x_ohm"],
    "PV": ["PV", "bus", "p_max_kw", "q_max_kvar"],
}


def load_network_csv(
    path: str,
    v_base_kv: float = 12.66,
    s_base_mva: float = 1.0,
    slack_v_pu: float = 1.0,
) -> NetworkModel:
    """Read a sectioned network CSV (BUS, LINE, PV sections, each headed)."""

    buses: dict[int, tuple[float, float]] = {}
    lines: list[tuple[int, int, float, float]] = []
    pv: list[PvSite] = []
    section: str | None = None
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            tag = row[0].strip()
            if tag in _SECTION_HEADERS:
                if [c.strip() for c in row] != _SECTION_HEADERS[tag]:
                    raise GridError(f"{path}:{lineno}: bad {tag} header")
                section = tag
                continue
            if section is None:
                raise GridError(f"{path}:{lineno}: data before any section header")
            try:
                if section == "BUS":
                    buses[int(row[0])] = (float(row[1]), float(row[2]))
                elif section == "LINE":
                    lines.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
                else:
                    pv.append(PvSite(int(row[0]), float(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise GridError(f"{path}:{lineno}: malformed {section} row: {exc}") from exc

    if not buses:
        raise GridError(f"{path}: no BUS section")
    n = max(buses) + 1
    if sorted(buses) != list(range(n)):
        raise GridError(f"{path}: bus ids must be contiguous from 0")
    p = np.array([buses[b][0] for b in range(n)])
    q = np.array([buses[b][1] for b in range(n)])
    return NetworkModel(
        bus_p_kw=p,
        bus_q_kvar=q,
        line_from=np.array([l[0] for l in lines], dtype=int),
        line_to=np.array([l[1] for l in lines], dtype=int),
        line_r_ohm=np.array([l[2] for l in lines]),
        line_x_ohm=np.array([l[3] for l in lines]),
        pv_sites=tuple(pv),
        v_base_kv=v_base_kv,
        s_base_mva=s_base_mva,
        slack_v_pu=slack_v_pu,
    )


def save_network_csv(path: str, model: NetworkModel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_SECTION_HEADERS["BUS"])
        for b in range(model.n_bus):
            w.writerow([b, repr(float(model.bus_p_kw[b])), repr(float(model.bus_q_kvar[b]))])
        w.writerow(_SECTION_HEADERS["LINE"])
        for k in range(model.n_line):
            w.writerow(
                [
                    int(model.line_from[k]),
                    int(model.line_to[k]),
                    repr(float(model.line_r_ohm[k])),
                    repr(float(model.line_x_ohm[k])),
                ]
            )
        w.writerow(_SECTION_HEADERS["PV"])
        for s in model.pv_sites:
            w.writerow([s.bus, repr(float(s.p_max_kw)), repr(float(s.q_max_kvar))])
