"""Experiment configuration: the dataclass, its INI file format, and validation."""
from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import DEFAULT_DT, TimeGrid
from .enkf import EnkfConfig
from .envda import NOISE_KINDS, InputScales, NoiseModel, ObservationOperator
from .ppo import PpoHyperparams
from .registry import RegistryMiss, registry_lookup

SUPPORTED_STEPS_PER_OBS = (5, 50, 100)
SUPPORTED_MASKS = ((True, True, True), (True, False, False), (True, True, False), (True, False, True))
MODES = ("train", "evaluate", "compare")
REGISTRY_FIELDS = ("gamma", "max_grad_norm", "value_coef", "n_assim_per_episode")


class ConfigError(ValueError):
    """Carries one diagnostic per invalid field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass(frozen=True)
class SimulateOptions:
    n_steps: int = 1000
    initial: tuple[float, float, float] | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    noise: NoiseModel = field(default_factory=lambda: NoiseModel("gaussian", 1.0))
    steps_per_obs: int = 50
    mask: tuple[bool, bool, bool] = (True, True, True)
    horizon: float = 50.0
    repetitions: int = 50
    seed: int = 0
    dt: float = DEFAULT_DT
    rl_members: int = 50
    export_stride: int = 10
    modes: tuple[str, ...] = MODES
    divergence_budget: int | None = None
    ppo: PpoHyperparams = field(default_factory=PpoHyperparams)
    enkf: EnkfConfig = field(default_factory=EnkfConfig)
    scales: InputScales = field(default_factory=InputScales)
    sweep_sizes: tuple[int, ...] = (2, 5, 10, 25, 50)
    histogram_times: tuple[float, ...] = (45.0,)
    simulate: SimulateOptions = field(default_factory=SimulateOptions)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(dt=self.dt, steps_per_obs=self.steps_per_obs)

    @property
    def op(self) -> ObservationOperator:
        return ObservationOperator(self.mask)

    @property
    def n_cycles(self) -> int:
        return round(self.horizon / self.grid.t_obs)

    @property
    def max_divergences(self) -> int:
        return self.repetitions // 2 if self.divergence_budget is None else self.divergence_budget

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_ppo(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, ppo=dataclasses.replace(self.ppo, **changes))

    def problems(self, strict_enums: bool = True) -> list[str]:
        out = []
        if strict_enums and self.steps_per_obs not in SUPPORTED_STEPS_PER_OBS:
            out.append(f"[experiment] steps_per_obs: must be one of {SUPPORTED_STEPS_PER_OBS}, got {self.steps_per_obs}")
        if strict_enums and tuple(self.mask) not in SUPPORTED_MASKS:
            label = "".join("1" if m else "0" for m in self.mask)
            out.append(f"[experiment] mask: unsupported observation mask {label}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            out.append(f"[experiment] dt: must be positive, got {self.dt}")
        elif not self.horizon > 0:
            out.append(f"[experiment] horizon: must be positive, got {self.horizon}")
        else:
            cycles = self.horizon / (self.steps_per_obs * self.dt)
            if abs(cycles - round(cycles)) > 1e-9 or round(cycles) < 1:
                out.append(f"[experiment] horizon: {self.horizon} is not a whole number of observation windows")
        for name in ("repetitions", "rl_members", "export_stride"):
            if getattr(self, name) < 1:
                out.append(f"[experiment] {name}: must be a positive integer, got {getattr(self, name)}")
        if self.seed < 0:
            out.append(f"[experiment] seed: must be non-negative, got {self.seed}")
        for mode in self.modes:
            if mode not in MODES:
                out.append(f"[experiment] modes: unknown mode {mode!r}, expected a subset of {MODES}")
        if self.divergence_budget is not None and self.divergence_budget < 0:
            out.append("[experiment] divergence_budget: must be non-negative")
        for n in self.sweep_sizes:
            if n < 1:
                out.append(f"[sweep] sizes: ensemble sizes must be positive, got {n}")
        if self.simulate.n_steps < 0:
            out.append("[simulate] n_steps: must be non-negative")
        return out

    def validate(self, strict_enums: bool = True) -> "ExperimentConfig":
        problems = self.problems(strict_enums)
        if problems:
            raise ConfigError(problems)
        return self


def _parse_bool_mask(text: str) -> tuple[bool, bool, bool]:
    parts = [p.strip() for p in re.split(r"[,\s]+", text.strip()) if p.strip()]
    if len(parts) == 1 and len(parts[0]) == 3 and set(parts[0]) <= {"0", "1"}:
        parts = list(parts[0])
    if len(parts) != 3 or any(p not in ("0", "1") for p in parts):
        raise ValueError(f"expected three 0/1 flags such as '1,0,1', got {text!r}")
    return tuple(p == "1" for p in parts)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean (0/1), got {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    return tuple(float(p) for p in parts)


def _parse_ints(text: str) -> tuple[int, ...]:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    return tuple(int(p) for p in parts)


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _parse_optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("auto", "none", "") else int(text)


def _parse_initial(text: str):
    if text.strip().lower() in ("auto", "none", ""):
        return None
    vals = _parse_floats(text)
    if len(vals) != 3:
        raise ValueError("expected three comma-separated numbers")
    return vals


# section -> key -> parser
_SCHEMA = {
    "experiment": {
        "name": str,
        "steps_per_obs": int,
        "mask": _parse_bool_mask,
        "horizon": float,
        "repetitions": int,
        "seed": int,
        "dt": float,
        "rl_members": int,
        "export_stride": int,
        "modes": lambda s: tuple(p for p in re.split(r"[,\s]+", s.strip()) if p),
        "divergence_budget": _parse_optional_int,
    },
    "noise": {"kind": str, "sigma": float},
    "rl": {
        "gamma": float,
        "clip_epsilon": float,
        "value_coef": float,
        "max_grad_norm": float,
        "n_assim_per_episode": int,
        "learning_rate": float,
        "epochs_per_update": int,
        "minibatch_size": int,
        "n_workers": int,
        "total_episodes": int,
        "hidden_sizes": _parse_ints,
        "init_log_std": float,
        "anneal_lr": _parse_bool,
    },
    "enkf": {
        "n_ens": int,
        "obs_error_std": _parse_optional_float,
        "model_error_std": float,
        "initial_spread": float,
    },
    "scales": {"position": float, "derivative": float, "innovation": float},
    "sweep": {"sizes": _parse_ints},
    "histograms": {"times": _parse_floats},
    "simulate": {"n_steps": int, "initial": _parse_initial},
}


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    index: dict[tuple[str, str | None], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"^\[([^\]]+)\]$", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), lineno)
            continue
        m = re.match(r"^([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), lineno)
    return index


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse INI text; every problem is reported as ``source:line: [section] key: message``."""
    lines = _line_index(text)
    problems: list[str] = []

    def where(section, key=None) -> str:
        line = lines.get((section, key)) or lines.get((section, None))
        return f"{source}:{line}" if line else source

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from None

    values: dict[str, dict] = {s: {} for s in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append(f"{where(section)}: [{section}]: unknown section (expected one of {sorted(_SCHEMA)})")
            continue
        for key, raw in parser.items(section):
            parse = _SCHEMA[section].get(key)
            if parse is None:
                problems.append(f"{where(section, key)}: [{section}] {key}: unknown key")
                continue
            try:
                values[section][key] = parse(raw)
            except (TypeError, ValueError) as exc:
                problems.append(f"{where(section, key)}: [{section}] {key}: cannot parse {raw!r} ({exc})")

    exp = values["experiment"]
    noise_vals = values["noise"]
    kind = noise_vals.get("kind", "gaussian")
    noise = None
    if kind not in NOISE_KINDS:
        problems.append(f"{where('noise', 'kind')}: [noise] kind: must be one of {NOISE_KINDS}, got {kind!r}")
    else:
        try:
            noise = NoiseModel(kind, noise_vals.get("sigma", 1.0))
        except ValueError as exc:
            problems.append(f"{where('noise', 'sigma')}: [noise] sigma: {exc}")

    base = ExperimentConfig()
    steps = exp.get("steps_per_obs", base.steps_per_obs)
    mask = exp.get("mask", base.mask)

    rl = dict(values["rl"])
    if noise is not None:
        missing = [k for k in REGISTRY_FIELDS if k not in rl]
        if missing:
            try:
                row = registry_lookup(noise, steps, mask)
                for k in missing:
                    rl[k] = getattr(row, k)
            except RegistryMiss as exc:
                problems.append(f"{where('rl')}: [rl] {', '.join(missing)}: {exc}; supply them explicitly")
    if "hidden_sizes" in rl:
        rl["hidden_sizes"] = tuple(rl["hidden_sizes"])
    ppo = None
    try:
        ppo = PpoHyperparams(**rl)
    except ValueError:
        for msg in PpoHyperparams.problems(_Shim(PpoHyperparams, rl)):
            key = msg.split()[0]
            problems.append(f"{where('rl', key)}: [rl] {key}: {msg}")
    except TypeError as exc:
        problems.append(f"{where('rl')}: [rl]: {exc}")

    enkf = None
    try:
        enkf = EnkfConfig(**values["enkf"])
    except ValueError as exc:
        key = str(exc).split()[0]
        problems.append(f"{where('enkf', key)}: [enkf] {key}: {exc}")

    scales = None
    sc = values["scales"]
    bad = [k for k, v in sc.items() if not v > 0]
    for k in bad:
        problems.append(f"{where('scales', k)}: [scales] {k}: must be positive")
    if not bad:
        scales = InputScales(**sc)

    kwargs = {k: v for k, v in exp.items()}
    if "sizes" in values["sweep"]:
        kwargs["sweep_sizes"] = values["sweep"]["sizes"]
    if "times" in values["histograms"]:
        kwargs["histogram_times"] = values["histograms"]["times"]
    # field-level checks run even when a section failed, so one pass reports everything
    cfg = ExperimentConfig(noise=noise or base.noise, ppo=ppo or base.ppo, enkf=enkf or base.enkf,
                           scales=scales or base.scales, simulate=SimulateOptions(**values["simulate"]),
                           **kwargs)
    for msg in cfg.problems():
        m = re.match(r"\[(\w+)\] (\w+):", msg)
        problems.append(f"{where(m.group(1), m.group(2)) if m else source}: {msg}")
    if problems:
        raise ConfigError(problems)
    return cfg


class _Shim:
    """Attribute bag that lets ``PpoHyperparams.problems`` run on unvalidated values."""

    def __init__(self, cls, overrides):
        for f in dataclasses.fields(cls):
            setattr(self, f.name, overrides.get(f.name, f.default))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from None
    return parse_config(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text listing every field, so the file alone reproduces the run."""
    sections = {
        "experiment": {
            "name": cfg.name,
            "steps_per_obs": cfg.steps_per_obs,
            "mask": ",".join("1" if m else "0" for m in cfg.mask),
            "horizon": float(cfg.horizon),
            "repetitions": cfg.repetitions,
            "seed": cfg.seed,
            "dt": float(cfg.dt),
            "rl_members": cfg.rl_members,
            "export_stride": cfg.export_stride,
            "modes": tuple(cfg.modes),
            "divergence_budget": cfg.divergence_budget,
        },
        "noise": {"kind": cfg.noise.kind, "sigma": float(cfg.noise.sigma)},
        "rl": {f.name: getattr(cfg.ppo, f.name) for f in dataclasses.fields(cfg.ppo)},
        "enkf": {f.name: getattr(cfg.enkf, f.name) for f in dataclasses.fields(cfg.enkf)},
        "scales": dataclasses.asdict(cfg.scales),
        "sweep": {"sizes": tuple(cfg.sweep_sizes)},
        "histograms": {"times": tuple(float(t) for t in cfg.histogram_times)},
        "simulate": {"n_steps": cfg.simulate.n_steps, "initial": cfg.simulate.initial},
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items.items())
        out.append("")
    return "\n".join(out)


def config_for_row(row) -> ExperimentConfig:
    """Default experiment for one registry row, with that row's trained-agent hyperparameters."""
    cfg = ExperimentConfig(name=row.name, noise=row.noise, steps_per_obs=row.steps_per_obs, mask=row.mask)
    return cfg.with_ppo(gamma=row.gamma, max_grad_norm=row.max_grad_norm, value_coef=row.value_coef,
                        n_assim_per_episode=row.n_assim_per_episode)
