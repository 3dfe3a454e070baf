"""Rule-based inverter strategies used for comparison runs.

Three behaviors: do nothing, a piecewise-linear Volt-Var droop on the local
voltage, and a constant-voltage controller that searches the Var setpoint
pinning its own bus to a reference (bisection over trial flow solves, since
bus voltage is monotone in the local Var injection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import GridEnv


@dataclass(frozen=True)
class DroopCurve:
    """Continuous non-increasing Q(V): flat inside the dead band, linear to
    saturation at the outer knees, clamped beyond."""

    v_lo_sat: float = 0.95
    v_lo_db: float = 0.98
    v_hi_db: float = 1.02
    v_hi_sat: float = 1.05
    q_max_kvar: float = 0.0

    def __post_init__(self) -> None:
        if not self.v_lo_sat < self.v_lo_db <= self.v_hi_db < self.v_hi_sat:
            raise ValueError("droop knees must satisfy lo_sat < lo_db <= hi_db < hi_sat")


def droop_control(v_site: float, curve: DroopCurve) -> float:
    """Var setpoint in kvar for the measured local voltage."""

    if v_site <= 0:
        raise ValueError("voltage must be positive")
    if curve.v_lo_db <= v_site <= curve.v_hi_db:
        return 0.0
    if v_site > curve.v_hi_db:
        frac = (v_site - curve.v_hi_db) / (curve.v_hi_sat - curve.v_hi_db)
        return -curve.q_max_kvar * min(frac, 1.0)
    frac = (curve.v_lo_db - v_site) / (curve.v_lo_db - curve.v_lo_sat)
    return curve.q_max_kvar * min(frac, 1.0)


def no_var_control() -> float:
    return 0.0


def constant_pcc_control(
    env: GridEnv,
    site: int,
    v_ref: float,
    q_working_kvar: np.ndarray | None = None,
    tol_pu: float = 1e-4,
    max_bisect: int = 40,
) -> float:
    """Var setpoint holding the site's bus at ``v_ref`` for the pending step.

    Other sites' setpoints are taken from ``q_working_kvar`` (zeros when
    omitted). Returns the clamped limit when the target is unreachable.
    """

    if not 0.95 <= v_ref <= 1.05:
        raise ValueError("v_ref must lie within the allowed voltage range")
    model = env.model
    bus = int(model.pv_buses[site])
    q_max = float(model.pv_q_max_kvar[site])
    q = np.zeros(model.n_pv) if q_working_kvar is None else np.array(q_working_kvar, dtype=float)

    def v_at(q_site: float) -> float:
        q[site] = q_site
        return float(env.preview_flow(q).v_abs[bus])

    lo, hi = -q_max, q_max
    v_lo = v_at(lo)
    if v_lo >= v_ref:  # even full absorption leaves the bus high
        return lo
    v_hi = v_at(hi)
    if v_hi <= v_ref:  # even full injection leaves the bus low
        return hi
    mid = 0.0
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        v_mid = v_at(mid)
        if abs(v_mid - v_ref) < tol_pu:
            return mid
        if v_mid < v_ref:
            lo = mid
        else:
            hi = mid
    return mid


class Controller:
    """Per-step policy interface used by the simulation harness."""

    name = "base"

    def reset(self) -> None:
        pass

    def act(self, env: GridEnv, state) -> np.ndarray:
        raise NotImplementedError


class NoVarController(Controller):
    name = "none"

    def act(self, env: GridEnv, state) -> np.ndarray:
        return np.full(env.model.n_pv, no_var_control())


class DroopController(Controller):
    """Independent droop per site on its own bus voltage."""

    name = "droop"

    def __init__(self, curve: DroopCurve = DroopCurve()):
        self.curve = curve

    def act(self, env: GridEnv, state) -> np.ndarray:
        q = np.zeros(env.model.n_pv)
        for i, bus in enumerate(env.model.pv_buses):
            site_curve = DroopCurve(
                self.curve.v_lo_sat,
                self.curve.v_lo_db,
                self.curve.v_hi_db,
                self.curve.v_hi_sat,
                float(env.model.pv_q_max_kvar[i]),
            )
            q[i] = droop_control(float(state.v_pu[bus]), site_curve)
        return q


class ConstantPccController(Controller):
    """Holds each site's bus at a reference via per-site bisection passes."""

    name = "constant-pcc"

    def __init__(self, v_ref: float = 1.0, passes: int = 2):
        self.v_ref = v_ref
        self.passes = passes

    def act(self, env: GridEnv, state) -> np.ndarray:
        q = np.zeros(env.model.n_pv)
        for _ in range(self.passes):
            for site in range(env.model.n_pv):
                q[site] = constant_pcc_control(env, site, self.v_ref, q)
        return q
