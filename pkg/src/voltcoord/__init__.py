"""Coordinated Volt-Var control on a radial feeder.

PV inverters, driven by a recurrent soft actor-critic policy, shape the
voltages an on-load tap changer measures, steering its rule-based tap
switching without touching the rule itself.
"""

from .baselines import ConstantPccController, DroopController, DroopCurve, NoVarController
from .env import (
    Action,
    GridEnv,
    MarkovState,
    ReplayBuffer,
    RewardConfig,
    Transition,
    compute_reward,
    equilibrium_tap,
)
from .grid import (
    DEFAULT_PV_TABLE,
    GridError,
    Injections,
    NetworkModel,
    PowerFlowResult,
    PvSite,
    build_ieee33,
    load_network_csv,
    solve_power_flow,
    validate_network,
)
from .oltc import LdcSettings, OltcState, TimerDirection, estimate_voltage, oltc_step
from .rsac import Hyperparams, RsacNetworks, run_training, sample_action, train_step
from .scenario import (
    DayScenario,
    generate_load_profile,
    generate_pv_profile,
    load_scenario_csv,
    make_day_scenario,
    save_scenario_csv,
    scenario_hash,
)

__version__ = "0.1.0"
