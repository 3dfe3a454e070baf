"""The decision process: inverter Var actions against the tap-changing feeder.

One control step applies the inverter Var setpoints and the exogenous
load/PV values, solves the flow, lets the tap controller observe the result
and possibly move (in which case the flow is re-solved), and pays a reward:
a penalty proportional to the total voltage-limit excess when any bus
violates, otherwise an incentive proportional to the line-loss saving
against the zero-Var counterfactual at the same tap.
"""

from __future__ import annotations

import csv
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import GridError, Injections, NetworkModel, PowerFlowResult, solve_power_flow
from .oltc import LdcSettings, OltcState, estimate_voltage, oltc_step
from .scenario import DayScenario


@dataclass(frozen=True)
class MarkovState:
    """Everything the transformer's behavior depends on, plus the exogenous inputs."""

    p_load_kw: np.ndarray
    q_load_kvar: np.ndarray
    p_pv_kw: np.ndarray
    v_pu: np.ndarray
    tap: int
    timer_sec: float


@dataclass(frozen=True)
class Action:
    """Per-site inverter Var setpoints in kvar."""

    q_pv_kvar: np.ndarray


@dataclass(frozen=True)
class RewardConfig:
    """Penalty/incentive coefficients and the voltage limits."""

    violation_penalty: float = -100.0
    loss_incentive: float = 100.0
    v_upper: float = 1.05
    v_lower: float = 0.95

    def __post_init__(self) -> None:
        if self.violation_penalty >= 0:
            raise ValueError("violation_penalty must be negative")
        if self.loss_incentive <= 0:
            raise ValueError("loss_incentive must be positive")
        if self.v_lower >= self.v_upper:
            raise ValueError("v_lower must be below v_upper")


def compute_reward(
    v_pu: np.ndarray,
    loss_pu: float,
    loss0_pu: float,
    cfg: RewardConfig,
) -> float:
    """Violation penalty if any bus is out of limits, else the loss saving.

    Exactly one branch applies per step.
    """

    over = np.maximum(v_pu - cfg.v_upper, 0.0)
    under = np.maximum(cfg.v_lower - v_pu, 0.0)
    excess = float(np.sum(over + under))
    if excess > 0.0:
        return cfg.violation_penalty * excess
    return cfg.loss_incentive * (loss0_pu - loss_pu)


@dataclass(frozen=True)
class Transition:
    """One stored interaction fragment, including the recurrent summary."""

    state: MarkovState
    action_prev: np.ndarray
    hidden_prev: np.ndarray
    action: np.ndarray
    reward: float
    state_next: MarkovState
    hidden: np.ndarray
    episode: int
    step: int
    done: bool


class ReplayBuffer:
    """Bounded FIFO of transitions; pushes and sampling are linearizable."""

    def __init__(self, capacity: int = 100_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def push(self, item: Transition) -> None:
        with self._lock:
            self._items.append(item)

    def sample(self, rng: np.random.Generator, k: int) -> list[Transition]:
        with self._lock:
            if len(self._items) < k:
                raise ValueError(f"buffer holds {len(self._items)} < batch {k}")
            idx = rng.integers(0, len(self._items), size=k)
            return [self._items[i] for i in idx]

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


def state_vector(s: MarkovState, ldc: LdcSettings) -> np.ndarray:
    """Network-facing features: powers in MW/Mvar, tap and timer normalized."""

    return np.concatenate(
        [
            s.p_load_kw / 1000.0,
            s.q_load_kvar / 1000.0,
            s.p_pv_kw / 1000.0,
            s.v_pu,
            [s.tap / max(abs(ldc.tap_min), ldc.tap_max)],
            [s.timer_sec / ldc.delay_sec],
        ]
    )


def state_dim(n_bus: int, n_pv: int) -> int:
    return n_bus * 3 + n_pv + 2


class EpisodeAborted(GridError):
    """Power flow diverged mid-episode."""


class GridEnv:
    """Deterministic environment over one scenario window.

    ``ldc_current_scale`` converts the feeder current from system per-unit to
    the compensator's own measurement base before the drop estimate (a real
    device meters through a CT; the compensation impedances assume that
    scale).
    """

    def __init__(
        self,
        model: NetworkModel,
        scenario: DayScenario,
        ldc: LdcSettings | None = None,
        reward: RewardConfig | None = None,
        ldc_current_scale: float = 0.01,
        tolerance: float = 1e-8,
        max_iter: int = 100,
    ):
        if scenario.n_bus != model.n_bus:
            raise ValueError("scenario bus count does not match the model")
        if scenario.n_pv != model.n_pv:
            raise ValueError("scenario pv count does not match the model")
        self.model = model
        self.scenario = scenario
        self.ldc = ldc or LdcSettings()
        self.reward_cfg = reward or RewardConfig()
        self.ldc_current_scale = ldc_current_scale
        self.tolerance = tolerance
        self.max_iter = max_iter
        if (self.ldc.tap_min, self.ldc.tap_max) != (model.tap_min, model.tap_max):
            raise ValueError("tap range of the controller and the model disagree")

        self.q_max_kvar = model.pv_q_max_kvar
        self._start = 0
        self._horizon = scenario.n_steps
        self._t = 0
        self.oltc = OltcState()
        self.state: MarkovState | None = None
        self.tap_history: list[int] = []
        self.tap_ops = 0
        self.violation_steps = 0
        self.last_info: dict[str, float] = {}

    # -- lifecycle ----------------------------------------------------------

    @property
    def horizon(self) -> int:
        return self._horizon

    @property
    def t(self) -> int:
        return self._t

    @property
    def dt_sec(self) -> float:
        return self.scenario.dt_sec

    def reset(
        self,
        initial_tap: int = 0,
        start: int = 0,
        horizon: int | None = None,
    ) -> MarkovState:
        """Start an episode at scenario step ``start`` with the given tap."""

        horizon = self.scenario.n_steps - start if horizon is None else horizon
        if start < 0 or start + horizon > self.scenario.n_steps or horizon <= 0:
            raise ValueError("episode window exceeds the scenario")
        self._start = start
        self._horizon = horizon
        self._t = 0
        self.oltc = OltcState(tap=initial_tap)
        self.tap_history = []
        self.tap_ops = 0
        self.violation_steps = 0
        res = self._solve(0, np.zeros(self.model.n_pv), initial_tap)
        if not res.converged:
            raise EpisodeAborted("power flow did not converge at reset")
        self.state = self._make_state(0, res)
        self.last_info = {}
        return self.state

    def _exo(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # The terminal state reuses the last in-window exogenous sample.
        k = self._start + min(t, self.scenario.n_steps - 1 - self._start)
        return (
            self.scenario.p_load_kw[k],
            self.scenario.q_load_kvar[k],
            self.scenario.p_pv_kw[k],
        )

    def _solve(self, t: int, q_pv_kvar: np.ndarray, tap: int) -> PowerFlowResult:
        p_load, q_load, p_pv = self._exo(t)
        p = p_load.copy()
        q = q_load.copy()
        buses = self.model.pv_buses
        np.add.at(p, buses, -p_pv)
        np.add.at(q, buses, -q_pv_kvar)
        return solve_power_flow(
            self.model, Injections(p, q, tap), self.tolerance, self.max_iter
        )

    def _make_state(self, t: int, res: PowerFlowResult) -> MarkovState:
        p_load, q_load, p_pv = self._exo(t)
        return MarkovState(
            p_load_kw=p_load.copy(),
            q_load_kvar=q_load.copy(),
            p_pv_kw=p_pv.copy(),
            v_pu=res.v_abs,
            tap=self.oltc.tap,
            timer_sec=self.oltc.timer_sec,
        )

    # -- dynamics -----------------------------------------------------------

    def step(self, action: Action, t: int) -> tuple[MarkovState, float, bool]:
        """Advance one control step; ``t`` must equal the internal cursor."""

        if self.state is None:
            raise RuntimeError("call reset() first")
        if t != self._t:
            raise ValueError(f"step index {t} does not match the episode cursor {self._t}")
        if t >= self._horizon:
            raise ValueError("episode is over")
        q = np.asarray(action.q_pv_kvar, dtype=float)
        if q.shape != (self.model.n_pv,):
            raise ValueError(f"action must have shape ({self.model.n_pv},)")
        if np.any(np.abs(q) > self.q_max_kvar + 1e-9):
            raise ValueError("action exceeds the inverter Var limits")

        tap_before = self.oltc.tap
        res = self._solve(t, q, tap_before)
        if not res.converged:
            raise EpisodeAborted(f"power flow diverged at step {t}")
        loss_pre_tap = res.loss_pu

        v_est = estimate_voltage(res.v0, res.i0 * self.ldc_current_scale, self.ldc)
        self.oltc, tap_delta = oltc_step(self.oltc, v_est, self.dt_sec, self.ldc)
        if tap_delta != 0:
            res = self._solve(t, q, self.oltc.tap)
            if not res.converged:
                raise EpisodeAborted(f"power flow diverged at step {t} after tap move")

        # Counterfactual: zero Var at the tap held entering this step. A
        # zero action makes the pre-tap solve that counterfactual already.
        if np.any(q != 0.0):
            loss0 = self._solve(t, np.zeros_like(q), tap_before).loss_pu
        else:
            loss0 = loss_pre_tap
        reward = compute_reward(res.v_abs, res.loss_pu, loss0, self.reward_cfg)

        self.tap_history.append(tap_before)
        self.tap_ops += int(tap_delta != 0)
        violated = bool(
            np.any(res.v_abs > self.reward_cfg.v_upper)
            or np.any(res.v_abs < self.reward_cfg.v_lower)
        )
        self.violation_steps += int(violated)
        self._t = t + 1
        done = self._t == self._horizon
        self.state = self._make_state(self._t, res)
        self.last_info = {
            "loss_pu": res.loss_pu,
            "loss0_pu": loss0,
            "tap_delta": float(tap_delta),
            "v_est": v_est,
            "vmin": float(res.v_abs.min()),
            "vmax": float(res.v_abs.max()),
            "violated": float(violated),
        }
        return self.state, reward, done

    def counterfactual_loss(self, t: int) -> float:
        """Line loss at step ``t`` with zero Var, at the tap held entering that step."""

        if not 0 <= t <= self._t:
            raise ValueError(f"step {t} outside the episode so far")
        tap = self.tap_history[t] if t < len(self.tap_history) else self.oltc.tap
        return self._solve(t, np.zeros(self.model.n_pv), tap).loss_pu

    def preview_flow(self, q_pv_kvar: np.ndarray) -> PowerFlowResult:
        """Solve the pending step's flow for a candidate action without advancing."""

        return self._solve(self._t, np.asarray(q_pv_kvar, dtype=float), self.oltc.tap)


def equilibrium_tap(
    model: NetworkModel,
    scenario: DayScenario,
    ldc: LdcSettings,
    start: int = 0,
    ldc_current_scale: float = 0.01,
) -> int:
    """Tap position the controller would settle at under frozen start conditions.

    Walks the tap one step at a time (zero Var) until the drop-compensated
    estimate is inside the dead band or a limit is reached.
    """

    p_load = scenario.p_load_kw[start]
    q_load = scenario.q_load_kvar[start]
    p = p_load.copy()
    np.add.at(p, model.pv_buses, -scenario.p_pv_kw[start])
    tap = 0
    for _ in range(ldc.tap_max - ldc.tap_min + 1):
        res = solve_power_flow(model, Injections(p, q_load, tap))
        v_est = estimate_voltage(res.v0, res.i0 * ldc_current_scale, ldc)
        if v_est > ldc.v_target + ldc.deadband and tap > ldc.tap_min:
            tap -= 1
        elif v_est < ldc.v_target - ldc.deadband and tap < ldc.tap_max:
            tap += 1
        else:
            return tap
    return tap


# --- episode log (shared output schema) -------------------------------------

EPISODE_LOG_HEADER = [
    "episode",
    "step",
    "t_sec",
    "reward",
    "tap",
    "timer_sec",
    "vmin",
    "vmax",
    "loss_pu",
] + [f"q_pv_{i}" for i in range(1, 8)]


def episode_log_header(n_pv: int) -> list[str]:
    return EPISODE_LOG_HEADER[:9] + [f"q_pv_{i}" for i in range(1, n_pv + 1)]


def write_episode_log(path: str, rows: list[list], n_pv: int = 7) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(episode_log_header(n_pv))
        w.writerows(rows)
