"""Perturbed-observation ensemble Kalman filter, and the exact Kalman filter used to check it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg

from . import seeding
from .dynamics import LorenzParams, TimeGrid, integrate_many
from .envda import AssimilationRun, ObservationOperator, Twin, initial_analysis, rmse

if TYPE_CHECKING:
    from .config import ExperimentConfig

NONE_NOISE_VARIANCE = 1e-6


class DegenerateEnsembleError(np.linalg.LinAlgError):
    """The innovation covariance H P H^T + R is not positive definite."""


@dataclass(frozen=True)
class EnkfConfig:
    n_ens: int = 50
    obs_error_std: float | None = None  # None: match the experiment's noise variance
    model_error_std: float = 0.0
    initial_spread: float = 1.0

    def __post_init__(self) -> None:
        if int(self.n_ens) < 2:
            raise ValueError(f"n_ens must be at least 2, got {self.n_ens}")
        if self.obs_error_std is not None and not self.obs_error_std > 0:
            raise ValueError(f"obs_error_std must be positive, got {self.obs_error_std}")
        if not self.model_error_std >= 0:
            raise ValueError(f"model_error_std must be non-negative, got {self.model_error_std}")
        if not self.initial_spread > 0:
            raise ValueError(f"initial_spread must be positive, got {self.initial_spread}")

    def obs_covariance(self, noise, op: ObservationOperator) -> np.ndarray:
        if self.obs_error_std is not None:
            var = self.obs_error_std**2
        else:
            var = noise.variance if noise.kind != "none" else NONE_NOISE_VARIANCE
        return var * np.eye(op.n_obs)

    def model_covariance(self) -> np.ndarray:
        return self.model_error_std**2 * np.eye(3)


def sample_covariance(ensemble: np.ndarray) -> np.ndarray:
    anomalies = ensemble - ensemble.mean(axis=0)
    return anomalies.T @ anomalies / (ensemble.shape[0] - 1)


def _gaussian_draws(rng: np.random.Generator, cov: np.ndarray, n: int) -> np.ndarray:
    # row i belongs to member i whatever the execution order
    z = rng.standard_normal((n, cov.shape[0]))
    if not cov.any():
        return np.zeros_like(z)
    return z @ np.linalg.cholesky(cov).T


def enkf_forecast(ensemble: np.ndarray, params: LorenzParams, grid: TimeGrid, config: EnkfConfig,
                  rng: np.random.Generator):
    """Propagate every member one observation window, then add N(0, Q) model noise.

    Returns (forecast ensemble, member trajectories (N, T+1, 3), per-member divergence flags).
    """
    states, _, flags = integrate_many(ensemble, params, grid.dt, grid.steps_per_obs)
    forecast = states[:, -1].copy()
    q = config.model_covariance()
    if q.any():
        forecast = forecast + _gaussian_draws(rng, q, forecast.shape[0])
        states[:, -1] = forecast
    return forecast, states, flags


def linear_forecast(ensemble: np.ndarray, model: np.ndarray, q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Forecast step for a linear model x -> A x + eta, used to check the filter against ``kf_exact``."""
    return ensemble @ model.T + _gaussian_draws(rng, q, ensemble.shape[0])


def kalman_gain(ensemble: np.ndarray, op: ObservationOperator, r: np.ndarray) -> np.ndarray:
    """K = P H^T (H P H^T + R)^-1 from the unbiased sample covariance, via a Cholesky solve."""
    if ensemble.shape[0] < 2:
        raise ValueError("kalman_gain needs at least two members")
    p = sample_covariance(ensemble)
    h = op.matrix
    hp = h @ p
    s = hp @ h.T + r
    try:
        factor = scipy.linalg.cho_factor(s, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateEnsembleError("innovation covariance is not positive definite") from exc
    return scipy.linalg.cho_solve(factor, hp).T


def enkf_analysis(ensemble: np.ndarray, observation, op: ObservationOperator, r: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """x_i^a = x_i^f + K (y + mu_i - H x_i^f), mu_i ~ N(0, R) drawn per member."""
    y = np.asarray(observation, dtype=np.float64)
    if y.shape != (op.n_obs,):
        raise ValueError(f"observation has {y.size} entries, operator observes {op.n_obs}")
    gain = kalman_gain(ensemble, op, r)
    perturbed = y[None, :] + _gaussian_draws(rng, r, ensemble.shape[0])
    return ensemble + (perturbed - op.project(ensemble)) @ gain.T


def kf_exact(mean, cov, model, op: ObservationOperator | np.ndarray, q, r, observation=None):
    """Kalman predict (x -> A x, P -> A P A^T + Q) followed by an update when ``observation`` is given."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-12 * max(1.0, np.abs(cov).max()):
        raise ValueError("prior covariance is not positive semi-definite")
    a = np.atleast_2d(model)
    m = a @ mean
    p = a @ cov @ a.T + q
    if observation is None:
        return m, p
    h = op.matrix if isinstance(op, ObservationOperator) else np.atleast_2d(op)
    s = h @ p @ h.T + r
    k = np.linalg.solve(s, h @ p).T
    m = m + k @ (np.atleast_1d(observation) - h @ m)
    p = (np.eye(len(m)) - k @ h) @ p
    return m, 0.5 * (p + p.T)


def run_enkf(config: EnkfConfig, experiment: "ExperimentConfig", twin: Twin, seed: int,
             n_ens: int | None = None, params: LorenzParams = LorenzParams()) -> AssimilationRun:
    """Filter the twin's observations; the returned trajectory is the ensemble mean at every step."""
    n = config.n_ens if n_ens is None else int(n_ens)
    if n < 2:
        raise ValueError(f"EnKF needs at least two members, got {n}")
    op, grid = twin.op, twin.grid
    r = config.obs_covariance(experiment.noise, op)
    T = grid.steps_per_obs
    n_steps = twin.n_cycles * T
    init_rng = seeding.make_rng(seed, seeding.ENKF_INIT)
    fc_rng = seeding.make_rng(seed, seeding.ENKF_FORECAST)
    an_rng = seeding.make_rng(seed, seeding.ENKF_ANALYSIS)

    x0 = initial_analysis(twin.observations[0], op, params, grid.dt)
    ens = x0[None, :] + config.initial_spread * init_rng.standard_normal((n, 3))
    mean_traj = np.empty((n_steps + 1, 3))
    forecasts = np.empty((twin.n_cycles + 1, n, 3))
    analyses = np.empty((twin.n_cycles + 1, n, 3))
    err_sum = rmse(ens, twin.reference[0])
    forecasts[0] = analyses[0] = ens
    mean_traj[0] = ens.mean(axis=0)
    diverged = False

    for k in range(1, twin.n_cycles + 1):
        forecast, states, flags = enkf_forecast(ens, params, grid, config, fc_rng)
        diverged |= bool(flags.any())
        try:
            ens = enkf_analysis(forecast, twin.observations[k], op, r, an_rng)
        except DegenerateEnsembleError:
            diverged = True
            ens = forecast
        states[:, -1] = ens
        lo = (k - 1) * T + 1
        mean_traj[lo:lo + T] = states[:, 1:].mean(axis=0)
        err_sum = err_sum + rmse(states[:, 1:], twin.reference[lo:lo + T]).sum(axis=1)
        forecasts[k] = forecast
        analyses[k] = ens

    return AssimilationRun(
        trajectory=mean_traj,
        rmse=rmse(mean_traj, twin.reference),
        member_time_avg_rmse=err_sum / (n_steps + 1),
        member_forecasts=forecasts,
        member_analyses=analyses,
        diverged=diverged,
    )
