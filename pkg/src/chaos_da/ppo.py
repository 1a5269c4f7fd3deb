"""Proximal policy optimisation with a diagonal Gaussian actor and a scalar critic."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import seeding
from .neural import (
    ROLE_ACTOR,
    ROLE_CRITIC,
    AdamState,
    MlpParams,
    adam_update,
    backward_cached,
    clip_grad_norm,
    forward_cached,
    global_norm,
    load_network,
    mlp_forward,
    mlp_init,
    save_network,
)

ACTION_DIM = 3
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_COLUMNS = (
    "update_index",
    "mean_episode_reward",
    "actor_loss",
    "critic_loss",
    "grad_norm_pre_clip",
    "log_std_mean",
)


@dataclass
class PpoHyperparams:
    gamma: float = 0.9
    clip_epsilon: float = 0.2
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    n_assim_per_episode: int = 100
    learning_rate: float = 1e-3
    epochs_per_update: int = 10
    minibatch_size: int = 64
    n_workers: int = 8
    total_episodes: int = 2000
    hidden_sizes: tuple[int, ...] = (128, 128)
    init_log_std: float = 0.0
    anneal_lr: bool = True  # decay the step size linearly to zero over the planned updates

    def __post_init__(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not 0.0 <= self.gamma < 1.0:
            out.append(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.clip_epsilon > 0:
            out.append(f"clip_epsilon must be positive, got {self.clip_epsilon}")
        for name in ("value_coef", "max_grad_norm", "learning_rate"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_assim_per_episode", "epochs_per_update", "minibatch_size", "n_workers"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be a positive integer, got {getattr(self, name)}")
        if int(self.total_episodes) < 0:
            out.append(f"total_episodes must be non-negative, got {self.total_episodes}")
        if not LOG_STD_MIN <= self.init_log_std <= LOG_STD_MAX:
            out.append(f"init_log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]")
        return out

    @property
    def n_updates(self) -> int:
        return -(-int(self.total_episodes) // int(self.n_workers))

    def lr_at(self, update: int) -> float:
        if not self.anneal_lr:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - update / max(1, self.n_updates))


@dataclass
class GaussianPolicy:
    """Mean network plus a state-independent log standard deviation per action component."""

    mean: MlpParams
    log_std: np.ndarray

    def __post_init__(self) -> None:
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64).reshape(ACTION_DIM),
                               LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.layer_sizes[-1] != ACTION_DIM:
            raise ValueError(f"mean network must output {ACTION_DIM} values")

    @property
    def input_dim(self) -> int:
        return self.mean.layer_sizes[0]

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean.copy(), self.log_std.copy())

    # batched interface shared with stub policies used by the harness
    def deterministic(self, inputs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.mean, inputs)

    def sample(self, inputs: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        means = mlp_forward(self.mean, inputs)
        noise = np.stack([rng.standard_normal(ACTION_DIM) for rng in rngs])
        return means + np.exp(self.log_std) * noise


def init_policy(obs_dim: int, hp: PpoHyperparams, seed: int) -> tuple[GaussianPolicy, MlpParams]:
    sizes = [obs_dim, *hp.hidden_sizes]
    actor = mlp_init([*sizes, ACTION_DIM], seeding.derive_seed(seed, seeding.ACTOR_INIT))
    critic = mlp_init([*sizes, 1], seeding.derive_seed(seed, seeding.CRITIC_INIT))
    return GaussianPolicy(actor, np.full(ACTION_DIM, hp.init_log_std)), critic


def gaussian_log_prob(actions: np.ndarray, means: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - means) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def sample_action(policy: GaussianPolicy, state, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    mean = mlp_forward(policy.mean, state)
    action = mean + np.exp(policy.log_std) * rng.standard_normal(ACTION_DIM)
    return action, float(gaussian_log_prob(action, mean, policy.log_std))


def deterministic_action(policy: GaussianPolicy, state) -> np.ndarray:
    return mlp_forward(policy.mean, state)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    log_prob_old: float
    value_old: float
    done: bool = False


@dataclass
class AdvantageRecord:
    v_target: float
    advantage: float


def discounted_targets(rewards, dones, bootstrap: float, gamma: float) -> np.ndarray:
    """n-step discounted returns to the end of the segment, restarting after terminal steps."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    running = 0.0 if (len(rewards) and dones[-1]) else float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def compute_returns_and_advantages(transitions: Sequence[Transition], critic: MlpParams,
                                   gamma: float) -> list[AdvantageRecord]:
    if not transitions:
        return []
    last = transitions[-1]
    bootstrap = 0.0 if last.done else float(mlp_forward(critic, last.next_state)[0])
    targets = discounted_targets([t.reward for t in transitions], [t.done for t in transitions],
                                 bootstrap, gamma)
    return [AdvantageRecord(float(v), float(v - t.value_old)) for v, t in zip(targets, transitions)]


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    v_target: np.ndarray
    advantage: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.log_prob_old[idx],
                     self.v_target[idx], self.advantage[idx])

    @classmethod
    def from_records(cls, transitions: Sequence[Transition], records: Sequence[AdvantageRecord]) -> "Batch":
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([t.action for t in transitions]),
            np.array([t.log_prob_old for t in transitions]),
            np.array([r.v_target for r in records]),
            np.array([r.advantage for r in records]),
        )


@dataclass
class LossResult:
    loss: float
    policy_grads: MlpParams
    log_std_grad: np.ndarray
    critic_grads: MlpParams
    actor_loss: float
    critic_loss: float
    ratio: np.ndarray
    surrogate: np.ndarray
    normalized_advantage: np.ndarray


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv.copy()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(policy: GaussianPolicy, critic: MlpParams, batch: Batch, hp: PpoHyperparams) -> LossResult:
    """Clipped surrogate (negated) plus ``value_coef`` times the critic MSE, with exact gradients."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    eps = hp.clip_epsilon
    adv = normalize_advantages(batch.advantage)

    means, actor_acts = forward_cached(policy.mean, batch.states)
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = batch.actions - means
    logp = np.sum(-0.5 * diff * diff * inv_var - policy.log_std - HALF_LOG_2PI, axis=1)
    ratio = np.exp(logp - batch.log_prob_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    actor_loss = -float(surrogate.mean())
    # gradient flows through the ratio only where the unclipped branch is the minimum
    active = unclipped <= clipped
    dlogp = np.where(active, -unclipped / n, 0.0)
    mean_grad_out = dlogp[:, None] * diff * inv_var
    log_std_grad = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    policy_grads = backward_cached(policy.mean, actor_acts, mean_grad_out)

    values, critic_acts = forward_cached(critic, batch.states)
    resid = batch.v_target - values[:, 0]
    critic_loss = float(np.mean(resid * resid))
    critic_grads = backward_cached(critic, critic_acts, (-2.0 * hp.value_coef / n * resid)[:, None])

    return LossResult(
        loss=actor_loss + hp.value_coef * critic_loss,
        policy_grads=policy_grads,
        log_std_grad=log_std_grad,
        critic_grads=critic_grads,
        actor_loss=actor_loss,
        critic_loss=critic_loss,
        ratio=ratio,
        surrogate=surrogate,
        normalized_advantage=adv,
    )


@dataclass
class TrainingState:
    """Everything needed to continue training bit-for-bit."""

    policy: GaussianPolicy
    critic: MlpParams
    actor_opt: AdamState
    critic_opt: AdamState
    next_update: int = 0
    episodes_done: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, obs_dim: int, hp: PpoHyperparams, seed: int) -> "TrainingState":
        policy, critic = init_policy(obs_dim, hp, seed)
        return cls(
            policy,
            critic,
            AdamState.for_arrays(policy.mean.arrays() + [policy.log_std], lr=hp.learning_rate),
            AdamState.for_arrays(critic.arrays(), lr=hp.learning_rate),
        )

    def save(self, directory, extras=()) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_network(d / "actor.bin", self.policy.mean, ROLE_ACTOR,
                     np.concatenate([self.policy.log_std, np.asarray(extras, dtype=np.float64)]))
        save_network(d / "critic.bin", self.critic, ROLE_CRITIC, extras)
        arrays = {}
        for tag, opt in (("actor", self.actor_opt), ("critic", self.critic_opt)):
            for k, (m, v) in enumerate(zip(opt.m, opt.v)):
                arrays[f"{tag}_m{k}"] = m
                arrays[f"{tag}_v{k}"] = v
        with open(d / "optimizer.npz", "wb") as fh:
            np.savez(fh, **arrays)
        meta = {
            "next_update": self.next_update,
            "episodes_done": self.episodes_done,
            "actor_opt": {k: v for k, v in asdict(self.actor_opt).items() if k not in ("m", "v")},
            "critic_opt": {k: v for k, v in asdict(self.critic_opt).items() if k not in ("m", "v")},
        }
        (d / "train_state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "TrainingState":
        d = Path(directory)
        policy, critic = load_checkpoint(d)
        meta = json.loads((d / "train_state.json").read_text())
        with np.load(d / "optimizer.npz") as data:
            opts = {}
            for tag, n in (("actor", len(policy.mean.arrays()) + 1), ("critic", len(critic.arrays()))):
                opts[tag] = AdamState([data[f"{tag}_m{k}"] for k in range(n)],
                                      [data[f"{tag}_v{k}"] for k in range(n)], **meta[f"{tag}_opt"])
        return cls(policy, critic, opts["actor"], opts["critic"], meta["next_update"], meta["episodes_done"])


def load_checkpoint(directory) -> tuple[GaussianPolicy, MlpParams]:
    d = Path(directory)
    actor, role_a, extras_a = load_network(d / "actor.bin")
    critic, role_c, _ = load_network(d / "critic.bin")
    if role_a != ROLE_ACTOR or role_c != ROLE_CRITIC:
        raise ValueError("checkpoint role tags do not match actor/critic")
    return GaussianPolicy(actor, extras_a[:ACTION_DIM]), critic


@dataclass
class TrainingResult:
    policy: GaussianPolicy
    critic: MlpParams
    log: list[dict]
    state: TrainingState


def _collect(envs, policy: GaussianPolicy, critic: MlpParams, seed: int, update: int, hp: PpoHyperparams):
    """Run one episode per environment in lockstep with a frozen policy snapshot."""
    n = len(envs)
    rngs = [seeding.make_rng(seed, seeding.ROLLOUT_ACTIONS, update, w) for w in range(n)]
    states = np.stack([env.reset(seeding.derive_seed(seed, seeding.ROLLOUT_ENV, update, w))
                       for w, env in enumerate(envs)])
    std = np.exp(policy.log_std)
    buf = [[] for _ in range(n)]
    alive = list(range(n))
    while alive:
        s = states[alive]
        means = mlp_forward(policy.mean, s)
        values = mlp_forward(critic, s)[:, 0]
        still = []
        for j, w in enumerate(alive):
            action = means[j] + std * rngs[w].standard_normal(ACTION_DIM)
            logp = float(gaussian_log_prob(action, means[j], policy.log_std))
            nxt, reward, done, info = envs[w].step(action)
            buf[w].append(Transition(s[j], action, float(reward), nxt, logp, float(values[j]),
                                     bool(info.get("diverged", False))))
            states[w] = nxt
            if not done:
                still.append(w)
        alive = still
    return buf


def train(env_factory: Callable[[int], object], hp: PpoHyperparams, seed: int,
          resume: TrainingState | None = None,
          on_update: Callable[[dict, TrainingState], None] | None = None) -> TrainingResult:
    """Train from scratch (or continue ``resume``) until ``hp.total_episodes`` episodes are done.

    ``env_factory(worker_index)`` must return an object with ``obs_dim``, ``reset(seed)`` and
    ``step(action) -> (next_state, reward, done, info)``. Each update collects one episode per
    worker, so the last update may use fewer workers.
    """
    envs = [env_factory(w) for w in range(hp.n_workers)]
    state = resume if resume is not None else TrainingState.fresh(envs[0].obs_dim, hp, seed)
    if state.policy.input_dim != envs[0].obs_dim:
        raise ValueError(f"policy expects {state.policy.input_dim} inputs, environment gives {envs[0].obs_dim}")
    log = list(state.log)

    while state.episodes_done < hp.total_episodes:
        u = state.next_update
        n_env = min(hp.n_workers, hp.total_episodes - state.episodes_done)
        episodes = _collect(envs[:n_env], state.policy, state.critic, seed, u, hp)

        transitions, records, returns = [], [], []
        for ep in episodes:
            transitions.extend(ep)
            records.extend(compute_returns_and_advantages(ep, state.critic, hp.gamma))
            returns.append(sum(t.reward for t in ep))
        batch = Batch.from_records(transitions, records)

        rng = seeding.make_rng(seed, seeding.MINIBATCH, u)
        stats = {"actor_loss": [], "critic_loss": [], "grad_norm_pre_clip": []}
        policy, critic = state.policy, state.critic
        lr = hp.lr_at(u)
        actor_opt, critic_opt = replace(state.actor_opt, lr=lr), replace(state.critic_opt, lr=lr)
        n_actor = len(policy.mean.arrays())
        for _ in range(hp.epochs_per_update):
            perm = rng.permutation(len(batch))
            for start in range(0, len(batch), hp.minibatch_size):
                res = ppo_loss(policy, critic, batch.subset(perm[start:start + hp.minibatch_size]), hp)
                norm = global_norm(res.policy_grads, res.log_std_grad, res.critic_grads)
                pg, lg, *cg = clip_grad_norm(res.policy_grads, hp.max_grad_norm, res.log_std_grad,
                                             *res.critic_grads.arrays())
                grads = pg.arrays() + [lg] + cg
                new_actor, actor_opt = adam_update(policy.mean.arrays() + [policy.log_std],
                                                   grads[:n_actor + 1], actor_opt)
                new_critic, critic_opt = adam_update(critic.arrays(), grads[n_actor + 1:], critic_opt)
                policy = GaussianPolicy(MlpParams.from_arrays(new_actor[:n_actor]), new_actor[n_actor])
                critic = MlpParams.from_arrays(new_critic)
                stats["actor_loss"].append(res.actor_loss)
                stats["critic_loss"].append(res.critic_loss)
                stats["grad_norm_pre_clip"].append(norm)

        row = {
            "update_index": u,
            "mean_episode_reward": float(np.mean(returns)),
            "actor_loss": float(np.mean(stats["actor_loss"])),
            "critic_loss": float(np.mean(stats["critic_loss"])),
            "grad_norm_pre_clip": float(np.mean(stats["grad_norm_pre_clip"])),
            "log_std_mean": float(policy.log_std.mean()),
        }
        log.append(row)
        state = TrainingState(policy, critic, actor_opt, critic_opt, u + 1,
                              state.episodes_done + n_env, log)
        if on_update is not None:
            on_update(row, state)

    return TrainingResult(state.policy, state.critic, log, state)


__all__ = [
    "LOG_COLUMNS",
    "AdvantageRecord",
    "Batch",
    "GaussianPolicy",
    "LossResult",
    "PpoHyperparams",
    "TrainingResult",
    "TrainingState",
    "Transition",
    "clip_grad_norm",
    "compute_returns_and_advantages",
    "deterministic_action",
    "discounted_targets",
    "gaussian_log_prob",
    "init_policy",
    "load_checkpoint",
    "ppo_loss",
    "sample_action",
    "train",
]
