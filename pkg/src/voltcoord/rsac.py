"""Recurrent soft actor-critic trainer for the inverter Var policy.

The actor is a recurrent cell feeding a dense Gaussian head; sampled actions
are squashed through a scaled tanh so they always respect the inverter
limits, with the change-of-variables correction applied to the density. A
critic scores (summary, action) pairs, a value network scores summaries, and
a slowly synchronized copy of the value network stabilizes the bootstrap
target. All three losses descend by one Adam step per training iteration.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .env import Action, GridEnv, ReplayBuffer, Transition, state_vector
from .nn import (
    AdamState,
    GruParams,
    MlpParams,
    Tensor,
    adam_update,
    gru_cell_forward,
    mlp_forward,
    mlp_gaussian_head,
)
from .oltc import LdcSettings
from .seeding import substream


class WarmupError(Exception):
    """The replay buffer does not hold a full mini-batch yet."""


@dataclass
class Hyperparams:
    """Training configuration; defaults follow the studied setup."""

    gamma: float = 0.95
    alpha: float = 0.2
    lr: float = 3e-3
    beta: float = 1e-2
    batch_size: int = 256
    buffer_capacity: int = 100_000
    episodes: int = 200
    horizon: int = 240
    seed: int = 0
    gru_hidden: int = 64
    hidden_sizes: tuple[int, int] = (256, 256)
    train_steps_per_episode: int = 20
    checkpoint_every: int = 50
    target_tau_convention: str = "literal"  # or "conventional"

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must be in (0, 1)")
        if self.target_tau_convention not in ("literal", "conventional"):
            raise ValueError("target_tau_convention must be 'literal' or 'conventional'")


@dataclass
class ActorParams:
    """Recurrent cell plus the Gaussian head (output width 2 * n_actions)."""

    gru: GruParams
    head: MlpParams

    def named(self, prefix: str = "actor") -> dict[str, Tensor]:
        return {**self.gru.named(f"{prefix}.gru"), **self.head.named(f"{prefix}.head")}


@dataclass
class RsacNetworks:
    """All parameter sets plus the dimensions they were built for."""

    actor: ActorParams
    critic: MlpParams
    value: MlpParams
    target_value: MlpParams
    state_dim: int
    n_actions: int
    gru_hidden: int
    hidden_sizes: tuple[int, ...]
    q_max_kvar: np.ndarray

    @classmethod
    def create(
        cls,
        state_dim: int,
        n_actions: int,
        q_max_kvar: np.ndarray,
        hp: Hyperparams,
        rng: np.random.Generator,
    ) -> "RsacNetworks":
        hg = hp.gru_hidden
        hid = list(hp.hidden_sizes)
        summary = state_dim + n_actions + hg  # (state, previous action, hidden)
        actor = ActorParams(
            gru=GruParams.create(state_dim + n_actions, hg, rng),
            head=MlpParams.create([hg, *hid, 2 * n_actions], rng, out_scale=1e-2),
        )
        critic = MlpParams.create([summary + n_actions, *hid, 1], rng)
        value = MlpParams.create([summary, *hid, 1], rng)
        target_value = copy.deepcopy(value)
        return cls(
            actor=actor,
            critic=critic,
            value=value,
            target_value=target_value,
            state_dim=state_dim,
            n_actions=n_actions,
            gru_hidden=hg,
            hidden_sizes=tuple(hid),
            q_max_kvar=np.asarray(q_max_kvar, dtype=float),
        )

    def named_all(self) -> dict[str, Tensor]:
        return {
            **self.actor.named("actor"),
            **self.critic.named("critic"),
            **self.value.named("value"),
            **self.target_value.named("target_value"),
        }

    def save(self, path: str) -> None:
        arrays = {k: t.data for k, t in self.named_all().items()}
        arrays["q_max_kvar"] = self.q_max_kvar
        nn.save_checkpoint(
            path,
            arrays,
            meta={
                "state_dim": self.state_dim,
                "n_actions": self.n_actions,
                "gru_hidden": self.gru_hidden,
                "hidden_sizes": list(self.hidden_sizes),
            },
        )

    @classmethod
    def load(cls, path: str) -> "RsacNetworks":
        arrays, meta = nn.load_checkpoint(path)
        hp = Hyperparams(
            gru_hidden=int(meta["gru_hidden"]),
            hidden_sizes=tuple(meta["hidden_sizes"]),
        )
        nets = cls.create(
            int(meta["state_dim"]),
            int(meta["n_actions"]),
            arrays["q_max_kvar"],
            hp,
            np.random.default_rng(0),
        )
        named = nets.named_all()
        for k, t in named.items():
            t.data = arrays[k]
        return nets


# --- policy ------------------------------------------------------------------

_LOG2 = float(np.log(2.0))


def _log1m_tanh_sq(u: Tensor) -> Tensor:
    # log(1 - tanh(u)^2) in an overflow-safe form
    return 2.0 * (_LOG2 - u - nn.softplus(-2.0 * u))


def squashed_log_prob(u: Tensor, mu: Tensor, sigma: Tensor, q_max: np.ndarray) -> Tensor:
    """Log density of a = q_max*tanh(u) where u is Gaussian; sums the last axis."""

    z = (u - mu) / sigma
    log_normal = -0.5 * nn.square(z) - nn.log(sigma) - 0.5 * nn.LOG_2PI
    log_jac = Tensor(np.log(q_max)) + _log1m_tanh_sq(u)
    return nn.tsum(log_normal - log_jac, axis=-1, keepdims=u.data.ndim > 1)


def _policy_forward(
    actor: ActorParams,
    s_vec,
    a_prev_norm,
    h_prev,
    eps: np.ndarray,
    q_max: np.ndarray,
) -> tuple[Tensor, Tensor, Tensor]:
    """Graph returning (normalized action, log prob, new hidden)."""

    x = nn.concat([nn._wrap(s_vec), nn._wrap(a_prev_norm)])
    h = gru_cell_forward(x, nn._wrap(h_prev), actor.gru)
    mu, sigma = mlp_gaussian_head(h, actor.head)
    u = mu + Tensor(eps) * sigma
    a_norm = nn.tanh(u)
    logp = squashed_log_prob(u, mu, sigma, q_max)
    return a_norm, logp, h


def sample_action(
    actor: ActorParams,
    s_vec: np.ndarray,
    a_prev_norm: np.ndarray,
    h_prev: np.ndarray,
    eps: np.ndarray,
    q_max: np.ndarray,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Draw one action: returns (Var setpoints kvar, log prob, new hidden)."""

    a_norm, logp, h = _policy_forward(actor, s_vec, a_prev_norm, h_prev, eps, q_max)
    return q_max * a_norm.data, float(logp.data), h.data


def greedy_action(
    actor: ActorParams,
    s_vec: np.ndarray,
    a_prev_norm: np.ndarray,
    h_prev: np.ndarray,
    q_max: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic mean action, for evaluation runs."""

    x = nn.concat([nn._wrap(s_vec), nn._wrap(a_prev_norm)])
    h = gru_cell_forward(x, nn._wrap(h_prev), actor.gru)
    mu, _ = mlp_gaussian_head(h, actor.head)
    return q_max * np.tanh(mu.data), h.data


# --- batches -----------------------------------------------------------------


@dataclass
class Featurizer:
    """Maps stored raw transitions into network inputs."""

    ldc: LdcSettings
    q_max: np.ndarray

    def state(self, s) -> np.ndarray:
        return state_vector(s, self.ldc)

    def action_norm(self, a_kvar: np.ndarray) -> np.ndarray:
        return np.asarray(a_kvar, dtype=float) / self.q_max

    def batch(self, items: list[Transition]) -> dict[str, np.ndarray]:
        return {
            "s": np.stack([self.state(t.state) for t in items]),
            "a_prev": np.stack([self.action_norm(t.action_prev) for t in items]),
            "h_prev": np.stack([t.hidden_prev for t in items]),
            "a": np.stack([self.action_norm(t.action) for t in items]),
            "r": np.array([t.reward for t in items])[:, None],
            "s_next": np.stack([self.state(t.state_next) for t in items]),
            "h": np.stack([t.hidden for t in items]),
            "done": np.array([float(t.done) for t in items])[:, None],
        }


def _summary(batch: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([batch["s"], batch["a_prev"], batch["h_prev"]], axis=1)


def _summary_next(batch: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([batch["s_next"], batch["a"], batch["h"]], axis=1)


# --- losses ------------------------------------------------------------------


def critic_loss(batch: dict[str, np.ndarray], nets: RsacNetworks, gamma: float) -> Tensor:
    """Mean squared Bellman error; the bootstrap target is held constant."""

    v_next = mlp_forward(Tensor(_summary_next(batch)), nets.target_value).data
    target = batch["r"] + gamma * (1.0 - batch["done"]) * v_next
    q = mlp_forward(Tensor(np.concatenate([_summary(batch), batch["a"]], axis=1)), nets.critic)
    return nn.tmean(nn.square(q - Tensor(target)))


def value_loss(
    batch: dict[str, np.ndarray],
    nets: RsacNetworks,
    alpha: float,
    eps: np.ndarray,
) -> Tensor:
    """Regression of the value net onto Q minus the scaled log prob.

    Both the critic score and the log prob come from freshly resampled
    actions and are treated as constants.
    """

    summary = _summary(batch)
    a_norm, logp, _ = _policy_forward(
        nets.actor, batch["s"], batch["a_prev"], batch["h_prev"], eps, nets.q_max_kvar
    )
    q = mlp_forward(Tensor(np.concatenate([summary, a_norm.data], axis=1)), nets.critic).data
    target = q - alpha * logp.data
    v = mlp_forward(Tensor(summary), nets.value)
    return nn.tmean(nn.square(v - Tensor(target)))


def actor_loss(
    batch: dict[str, np.ndarray],
    nets: RsacNetworks,
    alpha: float,
    eps: np.ndarray,
) -> Tensor:
    """Reparameterized policy objective; gradients flow through the action.

    The partition term of the target distribution does not depend on the
    policy parameters and is dropped (it only shifts the loss by a constant).
    """

    summary = _summary(batch)
    a_norm, logp, _ = _policy_forward(
        nets.actor, batch["s"], batch["a_prev"], batch["h_prev"], eps, nets.q_max_kvar
    )
    q = mlp_forward(nn.concat([Tensor(summary), a_norm]), nets.critic)
    return nn.tmean(logp - q * (1.0 / alpha))


def soft_update(
    target: MlpParams,
    source: MlpParams,
    beta: float,
    convention: str = "literal",
) -> None:
    """Blend the target toward the source.

    ``literal`` keeps weight beta on the existing target; ``conventional``
    reads beta as the amount moved per call instead.
    """

    keep = beta if convention == "literal" else 1.0 - beta
    for t, s in zip(
        target.weights + target.biases, source.weights + source.biases
    ):
        t.data = keep * t.data + (1.0 - keep) * s.data


# --- training ----------------------------------------------------------------


@dataclass
class TrainerState:
    """Adam moments for the three updated parameter sets."""

    critic: AdamState
    value: AdamState
    actor: AdamState

    @classmethod
    def create(cls, nets: RsacNetworks) -> "TrainerState":
        def init(params: dict[str, Tensor]) -> AdamState:
            return AdamState.zeros_like({k: t.data for k, t in params.items()})

        return cls(
            critic=init(nets.critic.named("critic")),
            value=init(nets.value.named("value")),
            actor=init(nets.actor.named("actor")),
        )


def _descend(
    params: dict[str, Tensor],
    loss_fn,
    state: AdamState,
    lr: float,
) -> tuple[float, AdamState]:
    value, grads = nn.evaluate_with_gradients(loss_fn, params)
    new_vals, new_state = adam_update({k: p.data for k, p in params.items()}, grads, state, lr)
    nn.apply_values(params, new_vals)
    return value, new_state


def train_step(
    buffer: ReplayBuffer,
    nets: RsacNetworks,
    trainer: TrainerState,
    hp: Hyperparams,
    feat: Featurizer,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One mini-batch update of critic, value and actor, then target blending."""

    if len(buffer) < hp.batch_size:
        raise WarmupError(f"buffer {len(buffer)} < batch {hp.batch_size}")
    batch = feat.batch(buffer.sample(rng, hp.batch_size))
    n, b = nets.n_actions, hp.batch_size

    jq, trainer.critic = _descend(
        nets.critic.named("critic"),
        lambda: critic_loss(batch, nets, hp.gamma),
        trainer.critic,
        hp.lr,
    )
    eps_v = rng.standard_normal((b, n))
    jv, trainer.value = _descend(
        nets.value.named("value"),
        lambda: value_loss(batch, nets, hp.alpha, eps_v),
        trainer.value,
        hp.lr,
    )
    eps_pi = rng.standard_normal((b, n))
    jpi, trainer.actor = _descend(
        nets.actor.named("actor"),
        lambda: actor_loss(batch, nets, hp.alpha, eps_pi),
        trainer.actor,
        hp.lr,
    )
    soft_update(nets.target_value, nets.value, hp.beta, hp.target_tau_convention)
    return {"jq": jq, "jv": jv, "jpi": jpi}


TRAINING_LOG_HEADER = [
    "episode",
    "total_reward",
    "avg50_reward",
    "jq",
    "jv",
    "jpi",
    "buffer_size",
    "taps_in_episode",
    "violation_steps",
]


def run_training(
    env_factory,
    hp: Hyperparams,
    out_dir: str,
    log_name: str = "training_log.csv",
) -> list[dict]:
    """Roll out episodes with the stochastic policy and train between them.

    ``env_factory(episode)`` must return a freshly reset environment. Writes
    the training log and periodic checkpoints under ``out_dir``; fully
    deterministic for a given (factory, hyperparameters) pair.
    """

    os.makedirs(out_dir, exist_ok=True)
    rng_init = substream(hp.seed, "init")
    rng_policy = substream(hp.seed, "policy")
    rng_train = substream(hp.seed, "train")

    probe_env: GridEnv = env_factory(0)
    feat = Featurizer(probe_env.ldc, probe_env.q_max_kvar)
    sdim = feat.state(probe_env.state).shape[0]
    n_act = probe_env.model.n_pv
    nets = RsacNetworks.create(sdim, n_act, probe_env.q_max_kvar, hp, rng_init)
    trainer = TrainerState.create(nets)
    buffer = ReplayBuffer(hp.buffer_capacity)

    nets.save(os.path.join(out_dir, "policy_initial.ckpt"))
    rows: list[dict] = []
    recent: list[float] = []

    for ep in range(hp.episodes):
        env = probe_env if ep == 0 else env_factory(ep)
        s = env.state
        h = np.zeros(hp.gru_hidden)
        a_prev = np.zeros(n_act)
        total = 0.0
        for t in range(env.horizon):
            eps = rng_policy.standard_normal(n_act)
            a_kvar, _, h_new = sample_action(
                nets.actor, feat.state(s), feat.action_norm(a_prev), h, eps, nets.q_max_kvar
            )
            s_next, r, done = env.step(Action(a_kvar), t)
            buffer.push(
                Transition(
                    state=s,
                    action_prev=a_prev,
                    hidden_prev=h,
                    action=a_kvar,
                    reward=r,
                    state_next=s_next,
                    hidden=h_new,
                    episode=ep,
                    step=t,
                    done=done,
                )
            )
            s, h, a_prev = s_next, h_new, a_kvar
            total += r

        losses: list[dict[str, float]] = []
        if len(buffer) >= hp.batch_size:
            for _ in range(hp.train_steps_per_episode):
                losses.append(train_step(buffer, nets, trainer, hp, feat, rng_train))

        recent.append(total)
        window = recent[-50:]
        mean_losses = {
            k: (sum(l[k] for l in losses) / len(losses) if losses else 0.0)
            for k in ("jq", "jv", "jpi")
        }
        rows.append(
            {
                "episode": ep,
                "total_reward": total,
                "avg50_reward": sum(window) / len(window),
                **mean_losses,
                "buffer_size": len(buffer),
                "taps_in_episode": env.tap_ops,
                "violation_steps": env.violation_steps,
            }
        )
        if hp.checkpoint_every > 0 and (ep + 1) % hp.checkpoint_every == 0:
            nets.save(os.path.join(out_dir, f"policy_ep{ep + 1:05d}.ckpt"))

    if hp.episodes > 0:
        nets.save(os.path.join(out_dir, "policy_final.ckpt"))
    write_training_log(os.path.join(out_dir, log_name), rows)
    return rows


def write_training_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(TRAINING_LOG_HEADER)
        for row in rows:
            w.writerow(
                [
                    row["episode"],
                    repr(float(row["total_reward"])),
                    repr(float(row["avg50_reward"])),
                    repr(float(row["jq"])),
                    repr(float(row["jv"])),
                    repr(float(row["jpi"])),
                    row["buffer_size"],
                    row["taps_in_episode"],
                    row["violation_steps"],
                ]
            )
