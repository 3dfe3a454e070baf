"""Day-long load and PV availability profiles.

PV availability is a clear-sky bell (06:00 to 18:00, peak at noon) times a
mean-reverting cloud multiplier. The ``strong`` mode produces frequent deep
dips, the ``mild`` mode rare shallow ones; one multiplier is shared by all
sites unless per-site clouds are requested. Loads follow a smooth diurnal
curve in [0.6, 1.0] of the base case with small per-bus noise. Everything is
a pure function of its arguments and seed.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .grid import NetworkModel, PvSite
from .seeding import stream_id as _stream_id


class ScenarioError(Exception):
    """Malformed scenario file or inconsistent series."""


@dataclass(frozen=True)
class DayScenario:
    """Time-indexed exogenous inputs with a fixed control step."""

    dt_sec: float
    p_load_kw: np.ndarray    # (n_steps, n_bus)
    q_load_kvar: np.ndarray  # (n_steps, n_bus)
    p_pv_kw: np.ndarray      # (n_steps, n_pv)
    label: str = "custom"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dt_sec <= 0:
            raise ScenarioError("dt must be positive")
        n = self.p_load_kw.shape[0]
        if self.q_load_kvar.shape[0] != n or self.p_pv_kw.shape[0] != n:
            raise ScenarioError("load and pv series must share the step count")
        if self.p_load_kw.shape != self.q_load_kvar.shape:
            raise ScenarioError("p and q load series must share bus count")

    @property
    def n_steps(self) -> int:
        return self.p_load_kw.shape[0]

    @property
    def n_bus(self) -> int:
        return self.p_load_kw.shape[1]

    @property
    def n_pv(self) -> int:
        return self.p_pv_kw.shape[1]


_CLOUD_PARAMS = {
    # enter/exit probabilities are per minute; depth is the dip floor range.
    "strong": dict(p_enter=0.06, p_exit=0.18, depth_lo=0.2, depth_hi=0.55, relax=0.55, floor=0.2),
    "mild": dict(p_enter=0.008, p_exit=0.22, depth_lo=0.8, depth_hi=0.95, relax=0.35, floor=0.8),
}

DAY_SECONDS = 86400


def _check_dt(dt_sec: float) -> int:
    if dt_sec <= 0 or DAY_SECONDS % dt_sec != 0:
        raise ScenarioError(f"dt {dt_sec} must divide a day of {DAY_SECONDS} s")
    return int(DAY_SECONDS // dt_sec)


def clear_sky_envelope(dt_sec: float) -> np.ndarray:
    """Unit bell: zero outside 06:00-18:00, one at noon."""

    n = _check_dt(dt_sec)
    hours = np.arange(n) * dt_sec / 3600.0
    env = np.sin(np.pi * (hours - 6.0) / 12.0)
    env[(hours < 6.0) | (hours > 18.0)] = 0.0
    return np.clip(env, 0.0, None)


def _cloud_multiplier(mode: str, n_steps: int, dt_sec: float, rng: np.random.Generator) -> np.ndarray:
    p = _CLOUD_PARAMS[mode]
    scale = dt_sec / 60.0
    p_enter = min(1.0, p["p_enter"] * scale)
    p_exit = min(1.0, p["p_exit"] * scale)
    relax = min(1.0, p["relax"] * scale)

    m = np.empty(n_steps)
    value = 1.0
    in_cloud = False
    target = 1.0
    for t in range(n_steps):
        u = rng.random()
        if in_cloud:
            if u < p_exit:
                in_cloud = False
                target = 1.0
        else:
            if u < p_enter:
                in_cloud = True
                target = rng.uniform(p["depth_lo"], p["depth_hi"])
        value += relax * (target - value)
        value = min(1.0, max(p["floor"], value))
        m[t] = value
    return m


def generate_pv_profile(
    mode: str,
    sites: tuple[PvSite, ...] | list[PvSite],
    dt_sec: float,
    seed: int,
    per_site_clouds: bool = False,
) -> np.ndarray:
    """Per-site available PV power in kW, shape (n_steps, n_sites)."""

    if mode not in _CLOUD_PARAMS:
        raise ScenarioError(f"unknown pv mode {mode!r}")
    n = _check_dt(dt_sec)
    env = clear_sky_envelope(dt_sec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _stream_id("pv-" + mode)]))
    p_max = np.array([s.p_max_kw for s in sites])
    if len(sites) == 0:
        return np.zeros((n, 0))
    if per_site_clouds:
        mult = np.column_stack([_cloud_multiplier(mode, n, dt_sec, rng) for _ in sites])
    else:
        mult = _cloud_multiplier(mode, n, dt_sec, rng)[:, None]
    return env[:, None] * mult * p_max[None, :]


def generate_load_profile(
    model: NetworkModel,
    dt_sec: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Diurnal per-bus load series (p_kw, q_kvar), each (n_steps, n_bus)."""

    n = _check_dt(dt_sec)
    hours = np.arange(n) * dt_sec / 3600.0
    raw = 0.75 * np.exp(-(((hours - 8.5) / 2.2) ** 2)) + np.exp(-(((hours - 19.5) / 3.0) ** 2))
    shape = (raw - raw.min()) / (raw.max() - raw.min())
    curve = 0.6 + 0.4 * shape

    rng = np.random.default_rng(np.random.SeedSequence([seed, _stream_id("load")]))
    noise = rng.uniform(-0.02, 0.02, size=(n, model.n_bus))
    factor = curve[:, None] * (1.0 + noise)
    return model.bus_p_kw[None, :] * factor, model.bus_q_kvar[None, :] * factor


def make_day_scenario(
    model: NetworkModel,
    mode: str,
    dt_sec: float = 60.0,
    seed: int = 0,
    per_site_clouds: bool = False,
) -> DayScenario:
    """One full day for the given network: diurnal loads plus a PV regime."""

    p_load, q_load = generate_load_profile(model, dt_sec, seed)
    p_pv = generate_pv_profile(mode, model.pv_sites, dt_sec, seed, per_site_clouds)
    return DayScenario(
        dt_sec=dt_sec,
        p_load_kw=p_load,
        q_load_kvar=q_load,
        p_pv_kw=p_pv,
        label=mode,
        seed=seed,
    )


def scenario_hash(sc: DayScenario) -> str:
    h = hashlib.sha256()
    h.update(repr(float(sc.dt_sec)).encode())
    h.update(sc.label.encode())
    for arr in (sc.p_load_kw, sc.q_load_kvar, sc.p_pv_kw):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


# --- scenario file i/o -----------------------------------------------------

_HEADER = ["t_sec", "bus_or_site", "kind", "p_kw", "q_kvar"]


def save_scenario_csv(path: str, sc: DayScenario, pv_buses: np.ndarray) -> None:
    """Write rows sorted by time; PV rows carry the site's bus id, empty q."""

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_HEADER)
        for t in range(sc.n_steps):
            t_sec = int(t * sc.dt_sec)
            for b in range(sc.n_bus):
                w.writerow([t_sec, b, "LOAD", repr(float(sc.p_load_kw[t, b])), repr(float(sc.q_load_kvar[t, b]))])
            for s in range(sc.n_pv):
                w.writerow([t_sec, int(pv_buses[s]), "PV", repr(float(sc.p_pv_kw[t, s])), ""])


def load_scenario_csv(path: str, model: NetworkModel) -> DayScenario:
    """Parse and validate a scenario CSV against the model's dimensions."""

    pv_index = {int(b): i for i, b in enumerate(model.pv_buses)}
    p_max = model.pv_p_max_kw
    loads: dict[int, dict[int, tuple[float, float]]] = {}
    pvs: dict[int, dict[int, float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != _HEADER:
            raise ScenarioError(f"{path}:1: expected header {','.join(_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                t_sec = int(row[0])
                ident = int(row[1])
                kind = row[2].strip()
                if kind == "LOAD":
                    loads.setdefault(t_sec, {})[ident] = (float(row[3]), float(row[4]))
                elif kind == "PV":
                    pvs.setdefault(t_sec, {})[ident] = float(row[3])
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (ValueError, IndexError) as exc:
                raise ScenarioError(f"{path}:{lineno}: malformed row: {exc}") from exc

    times = sorted(loads)
    if not times:
        raise ScenarioError(f"{path}: no LOAD rows")
    if sorted(pvs) not in ([], times):
        raise ScenarioError(f"{path}: PV and LOAD series cover different steps")
    dts = np.diff(times)
    if len(times) > 1 and not np.all(dts == dts[0]):
        raise ScenarioError(f"{path}: time steps are not uniform")
    dt_sec = float(dts[0]) if len(times) > 1 else 60.0

    n_bus, n_pv = model.n_bus, model.n_pv
    p_load = np.zeros((len(times), n_bus))
    q_load = np.zeros((len(times), n_bus))
    p_pv = np.zeros((len(times), n_pv))
    for t_i, t_sec in enumerate(times):
        row_loads = loads[t_sec]
        if sorted(row_loads) != list(range(n_bus)):
            raise ScenarioError(f"{path}: step t={t_sec}s misses load buses (series length mismatch)")
        for b, (p, q) in row_loads.items():
            p_load[t_i, b] = p
            q_load[t_i, b] = q
        row_pv = pvs.get(t_sec, {})
        if sorted(row_pv) != sorted(pv_index):
            raise ScenarioError(f"{path}: step t={t_sec}s misses pv sites (series length mismatch)")
        for bus, p in row_pv.items():
            s = pv_index[bus]
            if p < 0 or p > p_max[s] * (1 + 1e-9):
                raise ScenarioError(
                    f"{path}: pv availability {p} kW at bus {bus} step t={t_sec}s exceeds limit {p_max[s]} kW"
                )
            p_pv[t_i, s] = p
    return DayScenario(dt_sec=dt_sec, p_load_kw=p_load, q_load_kvar=q_load, p_pv_kw=p_pv, label="custom", seed=0)
