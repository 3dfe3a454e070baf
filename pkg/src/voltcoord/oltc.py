"""Line-drop-compensation voltage estimate and timer-gated tap switching.

The transformer watches its own secondary-side voltage and current, projects
them through a compensation impedance to estimate a downstream voltage, and
moves one tap step only after the estimate has stayed outside the dead band
in the same direction for the full time delay. Both pieces are pure
functions, so the state machine can be replayed and tested step by step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class TimerDirection(enum.Enum):
    NONE = "none"
    OVER = "over"
    UNDER = "under"


@dataclass(frozen=True)
class LdcSettings:
    """Compensator and switching rule parameters.

    Defaults match the transformer studied here: target 1.0 p.u., dead band
    0.008 p.u., 180 s delay, 16 steps of 0.625 % spanning plus/minus 5 %.
    """

    v_target: float = 1.0
    r_set: float = 0.864
    x_set: float = 0.538
    deadband: float = 0.008
    delay_sec: float = 180.0
    tap_min: int = -8
    tap_max: int = 8
    tap_step: float = 0.00625

    def __post_init__(self) -> None:
        if self.deadband <= 0:
            raise ValueError("deadband must be positive")
        if self.delay_sec <= 0:
            raise ValueError("delay_sec must be positive")
        if self.tap_min >= self.tap_max:
            raise ValueError("tap_min must be below tap_max")


@dataclass(frozen=True)
class OltcState:
    """Live tap position plus the violation timer."""

    tap: int = 0
    timer_sec: float = 0.0
    direction: TimerDirection = TimerDirection.NONE

    def __post_init__(self) -> None:
        if self.timer_sec < 0:
            raise ValueError("timer_sec must be non-negative")
        if self.direction is TimerDirection.NONE and self.timer_sec != 0.0:
            raise ValueError("idle timer must read zero")


def estimate_voltage(v0: complex, i0: complex, settings: LdcSettings) -> float:
    """Magnitude of the compensated voltage |v0 - i0 * (R + jX)|."""

    return abs(v0 - i0 * complex(settings.r_set, settings.x_set))


def oltc_step(
    state: OltcState,
    v_est: float,
    dt: float,
    settings: LdcSettings,
) -> tuple[OltcState, int]:
    """Advance the tap controller by one sample of duration ``dt`` seconds.

    Returns the successor state and the tap move in {-1, 0, +1}. An in-band
    estimate resets the timer; a persistent violation accumulates it and
    fires one step when it reaches the delay (timer then restarts). At a tap
    limit no move is emitted and the timer saturates at the delay, so relief
    is immediate if the violation flips sides.
    """

    if dt <= 0:
        raise ValueError("dt must be positive")
    lo = settings.v_target - settings.deadband
    hi = settings.v_target + settings.deadband

    if lo <= v_est <= hi:
        return OltcState(state.tap, 0.0, TimerDirection.NONE), 0

    direction = TimerDirection.OVER if v_est > hi else TimerDirection.UNDER
    timer = state.timer_sec + dt if state.direction is direction else dt

    if direction is TimerDirection.OVER:
        at_limit = state.tap <= settings.tap_min
        delta = -1
    else:
        at_limit = state.tap >= settings.tap_max
        delta = +1

    if at_limit:
        return OltcState(state.tap, min(timer, settings.delay_sec), direction), 0
    if timer >= settings.delay_sec:
        return OltcState(state.tap + delta, 0.0, direction), delta
    return OltcState(state.tap, timer, direction), 0
