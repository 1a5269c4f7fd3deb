"""Twin-experiment environment: observations, agent inputs, the additive RL correction, and
Monte-Carlo evaluation of a trained policy."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import seeding
from .dynamics import LorenzParams, TimeGrid, Trajectory, climatological_mean, integrate, integrate_many, spun_up_state

if TYPE_CHECKING:
    from .config import ExperimentConfig

NOISE_KINDS = ("none", "gaussian", "lognormal", "uniform")
DIVERGENCE_REWARD = -100.0


@dataclass(frozen=True)
class ObservationOperator:
    """Component-selection observation operator (a diagonal 0/1 matrix with zero rows dropped)."""

    mask: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self) -> None:
        mask = tuple(bool(m) for m in self.mask)
        if len(mask) != 3 or not any(mask):
            raise ValueError(f"observation mask needs 3 entries with at least one observed, got {self.mask!r}")
        object.__setattr__(self, "mask", mask)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def n_obs(self) -> int:
        return int(sum(self.mask))

    @property
    def matrix(self) -> np.ndarray:
        return np.eye(3)[self.indices]

    def project(self, x) -> np.ndarray:
        return np.asarray(x)[..., self.indices]

    def lift(self, y, fill) -> np.ndarray:
        """Observed components from ``y``; the rest from ``fill``."""
        y = np.asarray(y, dtype=np.float64)
        out = np.broadcast_to(np.asarray(fill, dtype=np.float64), y.shape[:-1] + (3,)).copy()
        out[..., self.indices] = y
        return out

    @property
    def label(self) -> str:
        return "".join("1" if m else "0" for m in self.mask)


@dataclass(frozen=True)
class NoiseModel:
    """Additive observation noise, drawn independently per component."""

    kind: str = "gaussian"
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError(f"gaussian noise needs sigma > 0, got {self.sigma}")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(shape)
        if self.kind == "gaussian":
            return rng.normal(0.0, self.sigma, size=shape)
        if self.kind == "lognormal":
            return rng.lognormal(0.0, 1.0, size=shape)
        return rng.uniform(0.0, 1.0, size=shape)

    @property
    def variance(self) -> float:
        if self.kind == "gaussian":
            return self.sigma**2
        if self.kind == "lognormal":
            return math.e * (math.e - 1.0)
        if self.kind == "uniform":
            return 1.0 / 12.0
        return 0.0

    @property
    def label(self) -> str:
        return f"gaussian({self.sigma:g})" if self.kind == "gaussian" else self.kind


@dataclass(frozen=True)
class InputScales:
    """Fixed divisors applied to agent-state blocks before they reach the networks."""

    position: float = 20.0
    derivative: float = 200.0
    innovation: float = 5.0

    def vector(self, steps_per_obs: int, n_obs: int) -> np.ndarray:
        block = [self.position] * 3 + [self.derivative] * 3
        return np.array(block * (steps_per_obs + 1) + [self.innovation] * n_obs)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.position, self.derivative, self.innovation)


def agent_state_dim(steps_per_obs: int, op: ObservationOperator) -> int:
    return 6 * (steps_per_obs + 1) + op.n_obs


def rmse(a, b) -> np.ndarray:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.mean(d * d, axis=-1))


@dataclass
class Twin:
    """Noise-free reference at every model step and observations at every observation time
    (index 0 is t = 0)."""

    grid: TimeGrid
    op: ObservationOperator
    reference: np.ndarray
    observations: np.ndarray
    noise: np.ndarray

    @property
    def n_cycles(self) -> int:
        return self.observations.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.reference.shape[0]) * self.grid.dt

    @property
    def obs_times(self) -> np.ndarray:
        return np.arange(self.n_cycles + 1) * self.grid.t_obs

    def reference_at_obs(self) -> np.ndarray:
        return self.reference[:: self.grid.steps_per_obs]


class DivergenceError(RuntimeError):
    pass


def generate_twin(config: "ExperimentConfig", seed: int, n_cycles: int | None = None,
                  params: LorenzParams = LorenzParams()) -> Twin:
    """Reference trajectory from a spun-up random start plus noisy observations of it."""
    grid = config.grid
    if n_cycles is None:
        n_cycles = config.n_cycles
    x0 = spun_up_state(seeding.make_rng(seed, seeding.TWIN_REFERENCE), params, grid.dt)
    traj = integrate(x0, params, grid, n_cycles * grid.steps_per_obs)
    if traj.diverged:
        raise DivergenceError("reference trajectory left the blow-up bound")
    noise = config.noise.sample(seeding.make_rng(seed, seeding.TWIN_NOISE), (n_cycles + 1, 3))
    truth = traj.states[:: grid.steps_per_obs]
    obs = config.op.project(truth + noise)
    return Twin(grid, config.op, traj.states, obs, config.op.project(noise))


def initial_analysis(observation, op: ObservationOperator, params: LorenzParams = LorenzParams(),
                     dt: float = 0.001) -> np.ndarray:
    """First observation lifted to state space; unobserved components take the climatological mean."""
    return op.lift(observation, climatological_mean(params, dt))


def build_agent_state(forecast, observation, op: ObservationOperator,
                      steps_per_obs: int | None = None) -> np.ndarray:
    """Flatten [x, xdot] at each forecast step (both window ends included), then the innovation.

    ``forecast`` is a Trajectory, a list of (state, derivative) pairs, or a (states, derivs) tuple
    of arrays.
    """
    if isinstance(forecast, Trajectory):
        states, derivs = forecast.states, forecast.derivs
    elif isinstance(forecast, tuple) and len(forecast) == 2 and np.ndim(forecast[0]) == 2:
        states, derivs = forecast
    else:
        states = np.array([p[0] for p in forecast], dtype=np.float64)
        derivs = np.array([p[1] for p in forecast], dtype=np.float64)
    if steps_per_obs is not None and states.shape[0] != steps_per_obs + 1:
        raise ValueError(f"expected {steps_per_obs + 1} forecast pairs, got {states.shape[0]}")
    innovation = np.asarray(observation, dtype=np.float64) - op.project(states[-1])
    if innovation.shape != (op.n_obs,):
        raise ValueError(f"observation has {innovation.size} entries, operator observes {op.n_obs}")
    return np.concatenate([np.hstack([states, derivs]).ravel(), innovation])


def build_agent_states_batch(states: np.ndarray, derivs: np.ndarray, observation,
                             op: ObservationOperator) -> np.ndarray:
    """Vectorised ``build_agent_state`` for (M, T+1, 3) forecast arrays."""
    m = states.shape[0]
    innovation = np.asarray(observation)[None, :] - op.project(states[:, -1])
    return np.concatenate([np.concatenate([states, derivs], axis=2).reshape(m, -1), innovation], axis=1)


@dataclass
class AssimilationCycle:
    forecast: Trajectory
    observation: np.ndarray
    analysis: np.ndarray
    action: np.ndarray
    reward: float


def env_step(forecast_end, action, next_observation, op: ObservationOperator,
             grid: TimeGrid, params: LorenzParams = LorenzParams()):
    """Apply x^a = x^f + action, forecast to the next observation time and score it.

    Returns (cycle, next agent state, reward, diverged). The reward belongs to ``action``: it is
    minus the observation-space RMSE of the forecast that the correction produced.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (3,):
        raise ValueError(f"action must be a 3-vector, got shape {action.shape}")
    analysis = np.asarray(forecast_end, dtype=np.float64) + action
    traj = integrate(analysis, params, grid, grid.steps_per_obs)
    if traj.diverged:
        cycle = AssimilationCycle(traj, np.asarray(next_observation), analysis, action, DIVERGENCE_REWARD)
        return cycle, None, DIVERGENCE_REWARD, True
    reward = -float(rmse(next_observation, op.project(traj.states[-1])))
    cycle = AssimilationCycle(traj, np.asarray(next_observation), analysis, action, reward)
    return cycle, build_agent_state(traj, next_observation, op), reward, False


class AssimilationEnv:
    """Training environment: one fresh twin (reference and noise) per episode.

    States handed to the agent are scaled by ``InputScales``.
    """

    def __init__(self, config: "ExperimentConfig", n_cycles: int | None = None,
                 params: LorenzParams = LorenzParams()):
        self.config = config
        self.params = params
        self.grid = config.grid
        self.op = config.op
        self.n_cycles = n_cycles if n_cycles is not None else config.ppo.n_assim_per_episode
        self.scale = config.scales.vector(self.grid.steps_per_obs, self.op.n_obs)
        self.obs_dim = agent_state_dim(self.grid.steps_per_obs, self.op)
        self.twin: Twin | None = None
        self._k = 0
        self._forecast_end = None
        self._last_input = None

    def reset(self, seed: int) -> np.ndarray:
        # one extra window: the last action still needs an observation to be scored against
        self.twin = generate_twin(self.config, seed, self.n_cycles + 1, self.params)
        x0 = initial_analysis(self.twin.observations[0], self.op, self.params, self.grid.dt)
        traj = integrate(x0, self.params, self.grid, self.grid.steps_per_obs)
        self._k = 1
        self._forecast_end = traj.states[-1]
        self._last_input = build_agent_state(traj, self.twin.observations[1], self.op) / self.scale
        return self._last_input

    def step(self, action):
        if self.twin is None:
            raise RuntimeError("call reset() first")
        cycle, state, reward, diverged = env_step(self._forecast_end, action, self.twin.observations[self._k + 1],
                                                  self.op, self.grid, self.params)
        self._k += 1
        if diverged:
            return self._last_input, reward, True, {"diverged": True, "cycle": cycle}
        self._forecast_end = cycle.forecast.states[-1]
        self._last_input = state / self.scale
        done = self._k > self.n_cycles
        return self._last_input, reward, done, {"diverged": False, "cycle": cycle}


class InnovationPolicy:
    """Stub policy returning ``gain`` times the innovation (zero on unobserved components)."""

    def __init__(self, op: ObservationOperator, scales: InputScales, gain: float = 1.0):
        self.op = op
        self.scales = scales
        self.gain = gain

    def deterministic(self, inputs: np.ndarray) -> np.ndarray:
        innovation = inputs[:, -self.op.n_obs:] * self.scales.innovation
        return self.gain * self.op.lift(innovation, np.zeros(3))

    def sample(self, inputs: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        return self.deterministic(inputs)


@dataclass
class AssimilationRun:
    """Result of one assimilation run over a twin.

    ``trajectory`` is the single state (or member mean) at every model step, analysis values at
    observation times. Member-level forecasts/analyses are kept at observation times only.
    """

    trajectory: np.ndarray
    rmse: np.ndarray
    member_time_avg_rmse: np.ndarray
    member_forecasts: np.ndarray
    member_analyses: np.ndarray
    diverged: bool

    @property
    def time_avg_rmse(self) -> float:
        return float(self.rmse.mean())

    @property
    def member_corrections(self) -> np.ndarray:
        return self.member_analyses - self.member_forecasts


def run_rl_assimilation(policy, twin: Twin, config: "ExperimentConfig", members: int | None = None,
                        seed: int = 0, params: LorenzParams = LorenzParams()) -> AssimilationRun:
    """Assimilate ``twin`` with a policy.

    ``members=None`` is the single deterministic agent (mode action each cycle). An integer N runs
    N independent trajectories that each sample their own correction from the policy.
    """
    if members is not None and members < 1:
        raise ValueError("mc-ensemble needs at least one member")
    op, grid = twin.op, twin.grid
    expected = agent_state_dim(grid.steps_per_obs, op)
    if getattr(policy, "input_dim", expected) != expected:
        raise ValueError(f"policy expects {policy.input_dim} inputs; this experiment produces {expected}")
    scale = config.scales.vector(grid.steps_per_obs, op.n_obs)
    m = 1 if members is None else members
    rngs = [seeding.make_rng(seed, seeding.RL_MEMBER, i) for i in range(m)]
    T = grid.steps_per_obs
    n_steps = twin.n_cycles * T

    x = np.repeat(initial_analysis(twin.observations[0], op, params, grid.dt)[None, :], m, axis=0)
    mean_traj = np.empty((n_steps + 1, 3))
    member_err_sum = np.zeros(m)
    member_forecasts = np.empty((twin.n_cycles + 1, m, 3))
    member_analyses = np.empty((twin.n_cycles + 1, m, 3))
    member_forecasts[0] = x
    member_analyses[0] = x
    mean_traj[0] = x.mean(axis=0)
    member_err_sum += rmse(x, twin.reference[0])
    diverged = False

    for k in range(1, twin.n_cycles + 1):
        states, derivs, flags = integrate_many(x, params, grid.dt, T)
        diverged |= bool(flags.any())
        inputs = build_agent_states_batch(states, derivs, twin.observations[k], op) / scale
        actions = policy.deterministic(inputs) if members is None else policy.sample(inputs, rngs)
        forecast = states[:, -1].copy()
        x = forecast + actions
        states[:, -1] = x
        lo = (k - 1) * T + 1
        mean_traj[lo:lo + T] = states[:, 1:].mean(axis=0)
        member_err_sum += rmse(states[:, 1:], twin.reference[lo:lo + T]).sum(axis=1)
        member_forecasts[k] = forecast
        member_analyses[k] = x
        if not np.isfinite(x).all() or np.abs(x).max() > 1e6:
            diverged = True
            x = np.nan_to_num(x, nan=0.0, posinf=1e6, neginf=-1e6).clip(-1e6, 1e6)

    err = rmse(mean_traj, twin.reference)
    return AssimilationRun(
        trajectory=mean_traj,
        rmse=err,
        member_time_avg_rmse=member_err_sum / (n_steps + 1),
        member_forecasts=member_forecasts,
        member_analyses=member_analyses,
        diverged=diverged,
    )


def free_run(twin: Twin, params: LorenzParams = LorenzParams()) -> np.ndarray:
    """RMSE curve of the unassimilated forecast from the same initial guess."""
    x0 = initial_analysis(twin.observations[0], twin.op, params, twin.grid.dt)
    traj = integrate(x0, params, twin.grid, twin.reference.shape[0] - 1)
    states = traj.states
    if traj.diverged:
        states = np.vstack([states, np.repeat(states[-1:], twin.reference.shape[0] - len(states), axis=0)])
    return rmse(states, twin.reference)
