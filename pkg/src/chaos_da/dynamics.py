"""Lorenz '63 right-hand side and fixed-step midpoint (RK2) integration."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numba
import numpy as np

BLOWUP_LIMIT = 1e6
DEFAULT_DT = 0.001


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    def __post_init__(self) -> None:
        for name in ("sigma", "rho", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"LorenzParams.{name} must be positive, got {value!r}")

    def fixed_points(self) -> np.ndarray:
        """The three equilibria: origin and the two convection centres."""
        c = math.sqrt(self.beta * (self.rho - 1.0))
        z = self.rho - 1.0
        return np.array([[0.0, 0.0, 0.0], [c, c, z], [-c, -c, z]])


@dataclass(frozen=True)
class TimeGrid:
    dt: float = DEFAULT_DT
    steps_per_obs: int = 50

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if int(self.steps_per_obs) != self.steps_per_obs or self.steps_per_obs < 1:
            raise ValueError(f"steps_per_obs must be a positive integer, got {self.steps_per_obs!r}")

    @property
    def t_obs(self) -> float:
        return self.steps_per_obs * self.dt

    @classmethod
    def from_interval(cls, t_obs: float, dt: float = DEFAULT_DT) -> "TimeGrid":
        n = round(t_obs / dt)
        if n < 1 or abs(n * dt - t_obs) > 1e-12 * max(1.0, abs(t_obs)):
            raise ValueError(f"observation interval {t_obs} is not an integer multiple of dt={dt}")
        return cls(dt=dt, steps_per_obs=n)


@dataclass
class Trajectory:
    """States and their time derivatives at every model step (rows), initial point included.

    When ``diverged`` is set the arrays stop at the first step that left the
    blow-up bound (that step included).
    """

    states: np.ndarray
    derivs: np.ndarray
    diverged: bool = False

    def __len__(self) -> int:
        return self.states.shape[0]

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(s, d) for s, d in zip(self.states, self.derivs)]


def lorenz_rhs(state, params: LorenzParams = LorenzParams()) -> np.ndarray:
    x, y, z = np.asarray(state, dtype=np.float64)
    return np.array(
        [params.sigma * (y - x), x * (params.rho - z) - y, x * y - params.beta * z]
    )


def rk2_step(state, params: LorenzParams = LorenzParams(), dt: float = DEFAULT_DT) -> np.ndarray:
    """One explicit midpoint step: x + dt * f(x + dt/2 * f(x))."""
    x = np.asarray(state, dtype=np.float64)
    k1 = lorenz_rhs(x, params)
    k2 = lorenz_rhs(x + 0.5 * dt * k1, params)
    return x + dt * k2


@numba.njit(cache=True, nogil=True)
def _integrate_kernel(x0, sigma, rho, beta, dt, n_steps, states, derivs):
    # Returns the number of rows written; fewer than n_steps + 1 means blow-up.
    h = 0.5 * dt
    x = x0[0]
    y = x0[1]
    z = x0[2]
    for i in range(n_steps + 1):
        fx = sigma * (y - x)
        fy = x * (rho - z) - y
        fz = x * y - beta * z
        states[i, 0] = x
        states[i, 1] = y
        states[i, 2] = z
        derivs[i, 0] = fx
        derivs[i, 1] = fy
        derivs[i, 2] = fz
        if not (abs(x) <= 1e6 and abs(y) <= 1e6 and abs(z) <= 1e6):
            return i + 1
        if i == n_steps:
            break
        mx = x + h * fx
        my = y + h * fy
        mz = z + h * fz
        x = x + dt * (sigma * (my - mx))
        y = y + dt * (mx * (rho - mz) - my)
        z = z + dt * (mx * my - beta * mz)
    return n_steps + 1


def integrate(state, params: LorenzParams = LorenzParams(), grid: TimeGrid | None = None,
              n_steps: int = 0) -> Trajectory:
    """Integrate ``n_steps`` RK2 steps, recording (state, rhs(state)) at every step."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    dt = DEFAULT_DT if grid is None else grid.dt
    x0 = np.ascontiguousarray(state, dtype=np.float64).reshape(3)
    states = np.empty((n_steps + 1, 3))
    derivs = np.empty((n_steps + 1, 3))
    written = _integrate_kernel(x0, params.sigma, params.rho, params.beta, dt, n_steps, states, derivs)
    if written < n_steps + 1 or not np.isfinite(states[written - 1]).all():
        return Trajectory(states[:written], derivs[:written], diverged=True)
    return Trajectory(states, derivs)


@numba.njit(cache=True, nogil=True)
def _integrate_many_kernel(x0, sigma, rho, beta, dt, n_steps, states, derivs, diverged):
    for m in range(x0.shape[0]):
        n = _integrate_kernel(x0[m], sigma, rho, beta, dt, n_steps, states[m], derivs[m])
        if n < n_steps + 1:
            diverged[m] = True
            for i in range(n, n_steps + 1):
                for c in range(3):
                    states[m, i, c] = states[m, n - 1, c]
                    derivs[m, i, c] = derivs[m, n - 1, c]


def integrate_many(states, params: LorenzParams = LorenzParams(), dt: float = DEFAULT_DT,
                   n_steps: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Propagate M independent states; returns (M, n+1, 3) states, derivatives, and a
    per-member divergence flag. A diverged member is frozen at its last recorded value."""
    x0 = np.ascontiguousarray(states, dtype=np.float64).reshape(-1, 3)
    m = x0.shape[0]
    out = np.empty((m, n_steps + 1, 3))
    der = np.empty((m, n_steps + 1, 3))
    flags = np.zeros(m, dtype=np.bool_)
    _integrate_many_kernel(x0, params.sigma, params.rho, params.beta, dt, n_steps, out, der, flags)
    return out, der, flags


def rk4_reference(state, params: LorenzParams, t_end: float, h: float) -> np.ndarray:
    """Classical RK4 to time ``t_end`` with step ``h``; a high-accuracy check, not used in runs."""
    n = round(t_end / h)
    return _rk4_kernel(np.asarray(state, dtype=np.float64).copy(), params.sigma, params.rho,
                       params.beta, h, n)


@numba.njit(cache=True)
def _rk4_kernel(x, sigma, rho, beta, h, n):
    def f(v):
        return np.array([sigma * (v[1] - v[0]), v[0] * (rho - v[2]) - v[1], v[0] * v[1] - beta * v[2]])

    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def spun_up_state(rng: np.random.Generator, params: LorenzParams = LorenzParams(),
                  dt: float = DEFAULT_DT, spinup: float = 10.0) -> np.ndarray:
    """A point on the attractor: (1,1,1) plus a U[-1,1]^3 kick, run for ``spinup`` time units."""
    x0 = np.ones(3) + rng.uniform(-1.0, 1.0, size=3)
    traj = integrate(x0, params, TimeGrid(dt=dt, steps_per_obs=1), round(spinup / dt))
    return traj.states[-1].copy()


@functools.lru_cache(maxsize=8)
def climatological_mean(params: LorenzParams = LorenzParams(), dt: float = DEFAULT_DT,
                        length: float = 1000.0) -> tuple[float, float, float]:
    """Time mean of a long free run from (1,1,1) after 10 time units of spin-up."""
    spin = round(10.0 / dt)
    traj = integrate(np.ones(3), params, TimeGrid(dt=dt, steps_per_obs=1), spin + round(length / dt))
    return tuple(float(v) for v in traj.states[spin:].mean(axis=0))
