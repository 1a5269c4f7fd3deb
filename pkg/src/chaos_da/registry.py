"""Trained-agent hyperparameters for the fifteen published experiment settings.

Keys are (noise model, steps per observation, observation mask). Three rows describe the same
Gaussian(1), 50-step, fully observed setting (it appears in three experiment families) and
carry identical values.
"""
from __future__ import annotations

from dataclasses import dataclass

from .envda import NoiseModel, ObservationOperator

FULL = (True, True, True)


@dataclass(frozen=True)
class RegistryRow:
    family: str
    name: str
    noise: NoiseModel
    steps_per_obs: int
    mask: tuple[bool, bool, bool]
    gamma: float
    max_grad_norm: float
    value_coef: float
    n_assim_per_episode: int

    @property
    def key(self) -> tuple:
        return _key(self.noise, self.steps_per_obs, self.mask)


def _key(noise: NoiseModel, steps_per_obs: int, mask) -> tuple:
    sigma = float(noise.sigma) if noise.kind == "gaussian" else None
    return (noise.kind, sigma, int(steps_per_obs), tuple(bool(m) for m in mask))


_N = NoiseModel("none")
_G1, _G2, _G3 = NoiseModel("gaussian", 1.0), NoiseModel("gaussian", 2.0), NoiseModel("gaussian", 3.0)
_L = NoiseModel("lognormal")
_U = NoiseModel("uniform")

ROWS: tuple[RegistryRow, ...] = (
    RegistryRow("tracking", "tracking_T5", _N, 5, FULL, 0.9, 0.9, 0.7, 100),
    RegistryRow("tracking", "tracking_T50", _N, 50, FULL, 0.1, 0.8, 0.7, 100),
    RegistryRow("tracking", "tracking_T100", _N, 100, FULL, 0.1, 0.9, 0.7, 100),
    RegistryRow("noise_level", "noise_level_sigma1", _G1, 50, FULL, 0.9, 0.95, 0.95, 1000),
    RegistryRow("noise_level", "noise_level_sigma2", _G2, 50, FULL, 0.05, 0.8, 0.7, 1000),
    RegistryRow("noise_level", "noise_level_sigma3", _G3, 50, FULL, 0.1, 0.9, 0.9, 1000),
    RegistryRow("frequency", "frequency_T5", _G1, 5, FULL, 0.25, 0.8, 0.7, 100),
    RegistryRow("frequency", "frequency_T50", _G1, 50, FULL, 0.9, 0.95, 0.95, 1000),
    RegistryRow("frequency", "frequency_T100", _G1, 100, FULL, 0.05, 0.95, 0.9, 1000),
    RegistryRow("distribution", "distribution_gaussian", _G1, 50, FULL, 0.9, 0.95, 0.95, 1000),
    RegistryRow("distribution", "distribution_lognormal", _L, 50, FULL, 0.8, 0.85, 0.95, 100),
    RegistryRow("distribution", "distribution_uniform", _U, 50, FULL, 0.1, 0.9, 0.8, 100),
    RegistryRow("partial", "partial_x", _G1, 50, (True, False, False), 0.25, 0.8, 0.8, 500),
    RegistryRow("partial", "partial_xy", _G1, 50, (True, True, False), 0.3, 0.9, 0.7, 500),
    RegistryRow("partial", "partial_xz", _G1, 50, (True, False, True), 0.25, 0.8, 0.95, 1000),
)

_BY_KEY: dict[tuple, RegistryRow] = {}
for _row in ROWS:
    _BY_KEY.setdefault(_row.key, _row)


class RegistryMiss(KeyError):
    pass


def registry_lookup(noise: NoiseModel, steps_per_obs: int, mask) -> RegistryRow:
    if isinstance(mask, ObservationOperator):
        mask = mask.mask
    key = _key(noise, steps_per_obs, mask)
    try:
        return _BY_KEY[key]
    except KeyError:
        raise RegistryMiss(
            f"no tabulated hyperparameters for noise={noise.label}, steps_per_obs={steps_per_obs}, "
            f"mask={''.join('1' if m else '0' for m in mask)}"
        ) from None
