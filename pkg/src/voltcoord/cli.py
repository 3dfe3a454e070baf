"""Command line front end: simulate, train, compare, validate.

Configuration is a flat ``key = value`` file merged under command-line
flags. Every command is reproducible from (config, seed): all randomness is
derived from the single seed through named substreams, and outputs carry no
timestamps, so re-running overwrites with identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import baselines, rsac
from .env import Action, GridEnv, RewardConfig, equilibrium_tap, episode_log_header
from .grid import GridError, NetworkModel, build_ieee33, load_network_csv, validate_network
from .oltc import LdcSettings
from .rsac import Featurizer, Hyperparams, RsacNetworks, greedy_action
from .scenario import DayScenario, ScenarioError, load_scenario_csv, make_day_scenario, scenario_hash
from .seeding import stream_id, substream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ConfigError(Exception):
    """Bad configuration: unknown key, bad value, or missing file."""


@dataclass
class RunConfig:
    """Everything a command needs beyond its subcommand-specific flags."""

    network: str = "builtin:ieee33"
    scenario: str = "strong"
    controllers: list[str] = field(default_factory=lambda: ["none"])
    out: str = "out"
    seed: int = 0
    episodes: int = 200
    horizon: int = 240
    dt_sec: float = 60.0
    initial_tap: str = "auto"
    ldc_current_scale: float = 0.01
    pcc_v_ref: float = 1.0
    pcc_passes: int = 2
    droop_v_lo_sat: float = 0.95
    droop_v_lo_db: float = 0.98
    droop_v_hi_db: float = 1.02
    droop_v_hi_sat: float = 1.05
    per_site_clouds: bool = False
    hp: Hyperparams = field(default_factory=Hyperparams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ldc: LdcSettings = field(default_factory=LdcSettings)


def _to_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


_RUN_KEYS = {
    "network": str,
    "scenario": str,
    "out": str,
    "seed": int,
    "episodes": int,
    "horizon": int,
    "dt_sec": float,
    "initial_tap": str,
    "ldc_current_scale": float,
    "pcc_v_ref": float,
    "pcc_passes": int,
    "droop_v_lo_sat": float,
    "droop_v_lo_db": float,
    "droop_v_hi_db": float,
    "droop_v_hi_sat": float,
    "per_site_clouds": _to_bool,
}

_HP_KEYS = {
    "gamma": float,
    "alpha": float,
    "lr": float,
    "beta": float,
    "batch_size": int,
    "buffer_capacity": int,
    "gru_hidden": int,
    "train_steps_per_episode": int,
    "checkpoint_every": int,
    "target_tau_convention": str,
}

_REWARD_KEYS = {
    "violation_penalty": float,
    "loss_incentive": float,
    "v_upper": float,
    "v_lower": float,
}

_LDC_KEYS = {
    "v_target": float,
    "r_set": float,
    "x_set": float,
    "deadband": float,
    "delay_sec": float,
    "tap_min": int,
    "tap_max": int,
    "tap_step": float,
}


def parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            out[key] = value
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Type-check and fold flat key/value pairs into the config."""

    hp_kwargs: dict = {}
    reward_kwargs: dict = {}
    ldc_kwargs: dict = {}
    run_kwargs: dict = {}
    for key, raw in overrides.items():
        try:
            if key in _RUN_KEYS:
                run_kwargs[key] = _RUN_KEYS[key](raw)
            elif key in _HP_KEYS:
                hp_kwargs[key] = _HP_KEYS[key](raw)
            elif key in _REWARD_KEYS:
                reward_kwargs[key] = _REWARD_KEYS[key](raw)
            elif key in _LDC_KEYS:
                ldc_kwargs[key] = _LDC_KEYS[key](raw)
            elif key == "controller":
                run_kwargs["controllers"] = [c.strip() for c in raw.split(",") if c.strip()]
            else:
                raise ConfigError(f"unknown config key: {key}")
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    cfg = replace(cfg, **run_kwargs)
    if hp_kwargs:
        cfg = replace(cfg, hp=replace(cfg.hp, **hp_kwargs))
    if reward_kwargs:
        cfg = replace(cfg, reward=replace(cfg.reward, **reward_kwargs))
    if ldc_kwargs:
        cfg = replace(cfg, ldc=replace(cfg.ldc, **ldc_kwargs))
    return cfg


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = apply_overrides(cfg, parse_config_file(args.config))
    flag_overrides: dict[str, str] = {}
    for flag in ("seed", "out", "scenario", "network", "episodes", "horizon"):
        value = getattr(args, flag, None)
        if value is not None:
            flag_overrides[flag] = str(value)
    cfg = apply_overrides(cfg, flag_overrides)
    if getattr(args, "controller", None):
        cfg = replace(cfg, controllers=list(args.controller))
    # the hyperparameter set shares the run's seed/episodes/horizon knobs
    cfg = replace(
        cfg,
        hp=replace(cfg.hp, seed=cfg.seed, episodes=cfg.episodes, horizon=cfg.horizon),
    )
    return cfg


# --- model / scenario / controller assembly ----------------------------------


def load_model(cfg: RunConfig) -> NetworkModel:
    if cfg.network == "builtin:ieee33":
        model = build_ieee33()
    else:
        if not os.path.exists(cfg.network):
            raise ConfigError(f"network file not found: {cfg.network}")
        model = load_network_csv(cfg.network)
    problems = validate_network(model)
    if problems:
        raise GridError("network is not well-formed: " + "; ".join(problems))
    return model


def day_seed(seed: int, episode: int) -> int:
    return stream_id(f"day-{seed}-{episode}")


def load_scenario(cfg: RunConfig, model: NetworkModel, episode: int = 0) -> DayScenario:
    if cfg.scenario in ("strong", "mild"):
        return make_day_scenario(
            model, cfg.scenario, cfg.dt_sec, day_seed(cfg.seed, episode), cfg.per_site_clouds
        )
    if not os.path.exists(cfg.scenario):
        raise ConfigError(f"scenario file not found: {cfg.scenario}")
    return load_scenario_csv(cfg.scenario, model)


class PolicyController(baselines.Controller):
    """Trained policy evaluated deterministically (mean action)."""

    name = "rsac"

    def __init__(self, nets: RsacNetworks, ldc: LdcSettings):
        self.nets = nets
        self.feat = Featurizer(ldc, nets.q_max_kvar)
        self.h = np.zeros(nets.gru_hidden)
        self.a_prev = np.zeros(nets.n_actions)

    def reset(self) -> None:
        self.h = np.zeros(self.nets.gru_hidden)
        self.a_prev = np.zeros(self.nets.n_actions)

    def act(self, env: GridEnv, state) -> np.ndarray:
        q, self.h = greedy_action(
            self.nets.actor,
            self.feat.state(state),
            self.feat.action_norm(self.a_prev),
            self.h,
            self.nets.q_max_kvar,
        )
        self.a_prev = q
        return q


def make_controller(spec: str, cfg: RunConfig) -> baselines.Controller:
    name, _, arg = spec.partition(":")
    if name == "none":
        return baselines.NoVarController()
    if name == "droop":
        return baselines.DroopController(
            baselines.DroopCurve(
                cfg.droop_v_lo_sat, cfg.droop_v_lo_db, cfg.droop_v_hi_db, cfg.droop_v_hi_sat
            )
        )
    if name == "constant-pcc":
        return baselines.ConstantPccController(cfg.pcc_v_ref, cfg.pcc_passes)
    if name == "rsac":
        if not arg:
            raise ConfigError("rsac controller needs a checkpoint: rsac:PATH")
        if not os.path.exists(arg):
            raise ConfigError(f"checkpoint not found: {arg}")
        return PolicyController(RsacNetworks.load(arg), cfg.ldc)
    raise ConfigError(f"unknown controller: {spec!r}")


# --- day runs -----------------------------------------------------------------


def resolve_initial_tap(cfg: RunConfig, model: NetworkModel, sc: DayScenario, start: int = 0) -> int:
    if cfg.initial_tap == "auto":
        return equilibrium_tap(model, sc, cfg.ldc, start, cfg.ldc_current_scale)
    try:
        return int(cfg.initial_tap)
    except ValueError as exc:
        raise ConfigError(f"initial_tap must be an integer or 'auto': {cfg.initial_tap!r}") from exc


def run_day(
    env: GridEnv,
    controller: baselines.Controller,
    initial_tap: int,
    episode_id: int = 0,
) -> tuple[list[list], dict]:
    """Run one full episode under a controller; returns log rows + summary."""

    state = env.reset(initial_tap=initial_tap)
    controller.reset()
    rows: list[list] = []
    loss_sum_pu = 0.0
    vmin, vmax = np.inf, -np.inf
    for t in range(env.horizon):
        q = controller.act(env, state)
        q = np.clip(q, -env.q_max_kvar, env.q_max_kvar)
        state, reward, _ = env.step(Action(q), t)
        info = env.last_info
        loss_sum_pu += info["loss_pu"]
        vmin = min(vmin, info["vmin"])
        vmax = max(vmax, info["vmax"])
        rows.append(
            [
                episode_id,
                t,
                int((env._start + t) * env.dt_sec),
                repr(float(reward)),
                state.tap,
                repr(float(state.timer_sec)),
                repr(float(info["vmin"])),
                repr(float(info["vmax"])),
                repr(float(info["loss_pu"])),
            ]
            + [repr(float(v)) for v in q]
        )
    loss_kwh = loss_sum_pu * env.model.s_base_mva * 1000.0 * env.dt_sec / 3600.0
    summary = {
        "loss_kwh": loss_kwh,
        "tap_ops": env.tap_ops,
        "violation_steps": env.violation_steps,
        "max_v": vmax,
        "min_v": vmin,
    }
    return rows, summary


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# --- commands -----------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if len(cfg.controllers) != 1:
        raise ConfigError("simulate needs exactly one --controller")
    model = load_model(cfg)
    sc = load_scenario(cfg, model)
    controller = make_controller(cfg.controllers[0], cfg)
    tap0 = resolve_initial_tap(cfg, model, sc)

    env = GridEnv(model, sc, cfg.ldc, cfg.reward, cfg.ldc_current_scale)
    rows, summary = run_day(env, controller, tap0)

    os.makedirs(cfg.out, exist_ok=True)
    _write_csv(os.path.join(cfg.out, "episode_log.csv"), episode_log_header(model.n_pv), rows)
    _write_csv(
        os.path.join(cfg.out, "summary.csv"),
        ["loss_kwh", "tap_ops", "violation_steps", "max_v", "min_v"],
        [
            [
                repr(float(summary["loss_kwh"])),
                summary["tap_ops"],
                summary["violation_steps"],
                repr(float(summary["max_v"])),
                repr(float(summary["min_v"])),
            ]
        ],
    )
    print(
        f"{controller.name}: loss_kwh={summary['loss_kwh']:.3f} tap_ops={summary['tap_ops']} "
        f"violation_steps={summary['violation_steps']}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    model = load_model(cfg)
    if cfg.scenario not in ("strong", "mild"):
        raise ConfigError("train expects --scenario strong|mild")
    hp = cfg.hp

    def env_factory(ep: int) -> GridEnv:
        sc = load_scenario(cfg, model, ep)
        window = substream(cfg.seed, f"window-{ep}")
        horizon = min(hp.horizon, sc.n_steps)
        start = int(window.integers(0, sc.n_steps - horizon + 1))
        env = GridEnv(model, sc, cfg.ldc, cfg.reward, cfg.ldc_current_scale)
        env.reset(
            initial_tap=equilibrium_tap(model, sc, cfg.ldc, start, cfg.ldc_current_scale),
            start=start,
            horizon=horizon,
        )
        return env

    os.makedirs(cfg.out, exist_ok=True)
    rows = rsac.run_training(env_factory, hp, cfg.out)
    final_avg = rows[-1]["avg50_reward"] if rows else float("nan")
    print(f"trained {hp.episodes} episodes; final avg50 reward {final_avg:.4f}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if len(cfg.controllers) < 2:
        raise ConfigError("compare needs at least two --controller entries")
    model = load_model(cfg)
    sc = load_scenario(cfg, model)
    controllers = [(spec, make_controller(spec, cfg)) for spec in cfg.controllers]
    tap0 = resolve_initial_tap(cfg, model, sc)
    sc_hash = scenario_hash(sc)

    os.makedirs(cfg.out, exist_ok=True)
    out_rows = []
    for spec, controller in controllers:
        env = GridEnv(model, sc, cfg.ldc, cfg.reward, cfg.ldc_current_scale)
        rows, summary = run_day(env, controller, tap0)
        safe = spec.partition(":")[0]
        _write_csv(
            os.path.join(cfg.out, f"episode_log_{safe}.csv"),
            episode_log_header(model.n_pv),
            rows,
        )
        out_rows.append(
            [
                safe,
                repr(float(summary["loss_kwh"])),
                summary["tap_ops"],
                summary["violation_steps"],
                sc_hash,
            ]
        )
        print(
            f"{safe}: loss_kwh={summary['loss_kwh']:.3f} tap_ops={summary['tap_ops']} "
            f"violation_steps={summary['violation_steps']}"
        )
    _write_csv(
        os.path.join(cfg.out, "compare.csv"),
        ["controller", "loss_kwh", "tap_ops", "violation_steps", "scenario_hash"],
        out_rows,
    )
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    model = load_model_for_validate(cfg)
    problems = validate_network(model)
    if problems:
        for p in problems:
            print(p)
        return EXIT_RUNTIME
    print("ok")
    return EXIT_OK


def load_model_for_validate(cfg: RunConfig) -> NetworkModel:
    if cfg.network == "builtin:ieee33":
        return build_ieee33()
    if not os.path.exists(cfg.network):
        raise ConfigError(f"network file not found: {cfg.network}")
    return load_network_csv(cfg.network)


# --- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voltcoord", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--scenario", default=None, help="strong|mild|PATH")
        p.add_argument("--network", default=None, help="builtin:ieee33 or a network CSV")
        p.add_argument(
            "--controller",
            action="append",
            default=None,
            help="none|droop|constant-pcc|rsac:CHECKPOINT (repeat for compare)",
        )
        p.add_argument("--episodes", type=int, default=None)
        p.add_argument("--horizon", type=int, default=None)

    for name, fn in (
        ("simulate", cmd_simulate),
        ("train", cmd_train),
        ("compare", cmd_compare),
        ("validate", cmd_validate),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GridError, ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
