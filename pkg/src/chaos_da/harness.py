"""Repeated twin experiments comparing the RL agent (single and Monte-Carlo ensemble) with the
EnKF, plus the ensemble-size sweep and correction-distribution histograms."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import seeding
from .config import ExperimentConfig
from .csvio import write_csv
from .enkf import run_enkf
from .envda import AssimilationRun, Twin, free_run, generate_twin, run_rl_assimilation

log = logging.getLogger(__name__)

RL_SINGLE = "rl_single"
RL_MC = "rl_mc"
ENKF = "enkf"
METHODS = (RL_SINGLE, RL_MC, ENKF)
TRAJECTORY_COLUMNS = ("time", "x_ref", "y_ref", "z_ref", "x_a", "y_a", "z_a", "rmse", "member_id")
SUMMARY_COLUMNS = ("method", "ensemble_size", "repetitions", "diverged",
                   "time_avg_rmse_mean", "time_avg_rmse_std")
CURVE_COLUMNS = ("time", "method", "rmse_mean", "rmse_std")
HISTOGRAM_COLUMNS = ("panel", "method", "bin_index", "bin_left", "bin_right", "count")
HISTOGRAM_BINS = 50


def twin_seed(config: ExperimentConfig, rep: int) -> int:
    return seeding.derive_seed(config.seed, seeding.REPETITION, rep)


def rl_seed(config: ExperimentConfig, rep: int) -> int:
    return seeding.derive_seed(config.seed, seeding.RL_MEMBER, rep)


def enkf_seed(config: ExperimentConfig, rep: int) -> int:
    return seeding.derive_seed(config.seed, seeding.ENKF_INIT, rep)


def method_size(config: ExperimentConfig, method: str) -> int:
    return {RL_SINGLE: 1, RL_MC: config.rl_members, ENKF: config.enkf.n_ens}[method]


@dataclass
class RepetitionResult:
    rep: int
    stride_times: np.ndarray
    curves: dict[str, np.ndarray]
    time_avg: dict[str, float]
    diverged: dict[str, bool]
    member_time_avg: dict[str, np.ndarray]
    runs: dict[str, AssimilationRun] | None = None
    twin: Twin | None = None


def run_methods(config: ExperimentConfig, policy, twin: Twin, rep: int, methods=METHODS,
                rl_members: int | None = None, n_ens: int | None = None) -> dict[str, AssimilationRun]:
    """All requested methods on one shared twin; each method has its own seeded streams."""
    runs = {}
    if RL_SINGLE in methods:
        runs[RL_SINGLE] = run_rl_assimilation(policy, twin, config, None, rl_seed(config, rep))
    if RL_MC in methods:
        runs[RL_MC] = run_rl_assimilation(policy, twin, config, rl_members or config.rl_members,
                                          rl_seed(config, rep))
    if ENKF in methods:
        runs[ENKF] = run_enkf(config.enkf, config, twin, enkf_seed(config, rep), n_ens)
    return runs


def run_repetition(config: ExperimentConfig, policy, rep: int, methods=METHODS, out_dir=None,
                   keep_runs: bool = False, rl_members: int | None = None,
                   n_ens: int | None = None) -> RepetitionResult:
    twin = generate_twin(config, twin_seed(config, rep))
    runs = run_methods(config, policy, twin, rep, methods, rl_members, n_ens)
    stride = config.export_stride
    times = twin.times[::stride]
    if out_dir is not None:
        _write_repetition(Path(out_dir) / f"rep{rep}", twin, runs, stride)
    return RepetitionResult(
        rep=rep,
        stride_times=times,
        curves={m: r.rmse[::stride].copy() for m, r in runs.items()},
        time_avg={m: r.time_avg_rmse for m, r in runs.items()},
        diverged={m: r.diverged for m, r in runs.items()},
        member_time_avg={m: r.member_time_avg_rmse for m, r in runs.items()},
        runs=runs if keep_runs else None,
        twin=twin if keep_runs else None,
    )


def _write_repetition(directory: Path, twin: Twin, runs: dict[str, AssimilationRun], stride: int) -> None:
    times = twin.times
    idx = np.arange(0, len(times), stride)
    rows = []
    for method, run in runs.items():
        for i in idx:
            rows.append((times[i], *twin.reference[i], *run.trajectory[i], run.rmse[i], method))
    write_csv(directory / "trajectory.csv", TRAJECTORY_COLUMNS, rows)
    names = [f"y_{'xyz'[c]}" for c in twin.op.indices]
    obs_rows = [(t, *y, twin.op.label) for t, y in zip(twin.obs_times, twin.observations)]
    write_csv(directory / "observations.csv", ("time", *names, "mask"), obs_rows)


@dataclass
class RmseSummary:
    """Across-repetition statistics; curves are sampled every ``export_stride`` model steps."""

    times: np.ndarray
    curve_mean: dict[str, np.ndarray]
    curve_std: dict[str, np.ndarray]
    time_avg: dict[str, np.ndarray]
    diverged: dict[str, int]
    ensemble_size: dict[str, int]
    repetitions: int

    def time_avg_mean(self, method: str) -> float:
        return float(np.mean(self.time_avg[method])) if len(self.time_avg[method]) else float("nan")

    def time_avg_std(self, method: str) -> float:
        return float(np.std(self.time_avg[method])) if len(self.time_avg[method]) else float("nan")

    def summary_rows(self):
        for m in self.curve_mean:
            yield (m, self.ensemble_size[m], self.repetitions, self.diverged[m],
                   self.time_avg_mean(m), self.time_avg_std(m))

    def curve_rows(self):
        for m in self.curve_mean:
            for t, mu, sd in zip(self.times, self.curve_mean[m], self.curve_std[m]):
                yield (t, m, mu, sd)


def summarize(config: ExperimentConfig, results: list[RepetitionResult],
              sizes: dict[str, int] | None = None) -> RmseSummary:
    """Mean and (population) standard deviation over the non-diverged repetitions of each method."""
    methods = list(results[0].curves)
    curve_mean, curve_std, time_avg, diverged = {}, {}, {}, {}
    for m in methods:
        ok = [r for r in results if not r.diverged[m]]
        diverged[m] = len(results) - len(ok)
        if ok:
            stack = np.stack([r.curves[m] for r in ok])
            curve_mean[m] = stack.mean(axis=0)
            curve_std[m] = stack.std(axis=0)
        else:
            curve_mean[m] = curve_std[m] = np.full_like(results[0].stride_times, np.nan)
        time_avg[m] = np.array([r.time_avg[m] for r in ok])
    sizes = sizes or {m: method_size(config, m) for m in methods}
    return RmseSummary(results[0].stride_times, curve_mean, curve_std, time_avg, diverged,
                       sizes, len(results))


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass
class ExperimentResult:
    summary: RmseSummary
    repetitions: list[RepetitionResult] = field(default_factory=list)


def run_experiment(config: ExperimentConfig, policy, out_dir=None, methods=METHODS,
                   workers: int = 1, keep_runs: bool = False) -> ExperimentResult:
    """Run every repetition (fresh reference and noise each), then aggregate.

    With ``out_dir`` the layout is ``<out>/<name>/rep<k>/{trajectory,observations}.csv`` plus
    ``summary.csv`` and ``curves.csv``. Output does not depend on ``workers``.
    """
    if policy is None and (RL_SINGLE in methods or RL_MC in methods):
        raise ValueError("RL methods need a trained policy")
    exp_dir = None if out_dir is None else Path(out_dir) / config.name
    fn = partial(run_repetition, config, policy, methods=methods, out_dir=exp_dir, keep_runs=keep_runs)
    results = _map(fn, range(config.repetitions), workers)
    summary = summarize(config, results)
    for m, n in summary.diverged.items():
        if n:
            log.warning("%s: %d of %d repetitions diverged", m, n, config.repetitions)
    if exp_dir is not None:
        write_csv(exp_dir / "summary.csv", SUMMARY_COLUMNS, summary.summary_rows())
        write_csv(exp_dir / "curves.csv", CURVE_COLUMNS, summary.curve_rows())
    return ExperimentResult(summary, results)


def _sweep_repetition(config, policy, methods, sizes, rep):
    twin = generate_twin(config, twin_seed(config, rep))
    out = {}
    for n in sizes:
        if "rl" in methods:
            out[("rl", n)] = run_rl_assimilation(policy, twin, config, n, rl_seed(config, rep)).time_avg_rmse
        if "enkf" in methods:
            out[("enkf", n)] = run_enkf(config.enkf, config, twin, enkf_seed(config, rep), n).time_avg_rmse
    return out


def ensemble_size_sweep(config: ExperimentConfig, policy, sizes, methods=("rl", "enkf"),
                        out_dir=None, workers: int = 1) -> list[dict]:
    """Time-averaged RMSE (mean over repetitions) of the RL Monte-Carlo mean and the EnKF per size."""
    sizes = [int(n) for n in sizes]
    if any(n < 1 for n in sizes):
        raise ValueError("ensemble sizes must be positive")
    if "enkf" in methods and any(n < 2 for n in sizes):
        raise ValueError(f"EnKF needs at least two members; got sizes {sizes}")
    if "rl" in methods and policy is None:
        raise ValueError("RL sweep needs a trained policy")
    per_rep = _map(partial(_sweep_repetition, config, policy, tuple(methods), tuple(sizes)),
                   range(config.repetitions), workers)
    rows = []
    for n in sizes:
        row = {"ensemble_size": n}
        for m in ("rl", "enkf"):
            row[m] = float(np.mean([r[(m, n)] for r in per_rep])) if m in methods else None
        rows.append(row)
    if out_dir is not None:
        write_csv(Path(out_dir) / config.name / "sweep.csv", ("ensemble_size", "rl_mc_rmse", "enkf_rmse"),
                  [(r["ensemble_size"], r["rl"], r["enkf"]) for r in rows])
    return rows


def valid_observation_times(config: ExperimentConfig) -> np.ndarray:
    return np.arange(1, config.n_cycles + 1) * config.grid.t_obs


def observation_index(config: ExperimentConfig, time: float) -> int:
    """Index of the observation time ``time`` (t = 0 is initialisation, not an update)."""
    t_obs = config.grid.t_obs
    k = round(time / t_obs)
    if 1 <= k <= config.n_cycles and abs(k * t_obs - time) <= 1e-9 * max(1.0, abs(time)):
        return k
    valid = valid_observation_times(config)
    nearest = valid[np.argsort(np.abs(valid - time), kind="stable")[:2]]
    nearest = sorted(float(f"{t:.12g}") for t in nearest)
    raise ValueError(f"time {time} is not an observation time; nearest valid times: "
                     f"{', '.join(f'{t:g}' for t in nearest)}")


def histogram(samples: np.ndarray, edges: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(samples, bins=edges)
    return counts


def pooled_edges(*sample_sets: np.ndarray, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    pooled = np.concatenate([np.ravel(s) for s in sample_sets])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram_panels(rl_run: AssimilationRun, enkf_run: AssimilationRun, k: int, component: int = 2):
    """Rows for the forecast, analysis and correction panels at observation index ``k``."""
    samples = {
        "forecast": (rl_run.member_forecasts[k, :, component], enkf_run.member_forecasts[k, :, component]),
        "analysis": (rl_run.member_analyses[k, :, component], enkf_run.member_analyses[k, :, component]),
        "correction": (rl_run.member_corrections[k, :, component], enkf_run.member_corrections[k, :, component]),
    }
    rows = []
    for panel, (rl_s, en_s) in samples.items():
        edges = pooled_edges(rl_s, en_s)
        for method, s in ((RL_MC, rl_s), (ENKF, en_s)):
            for i, c in enumerate(histogram(s, edges)):
                rows.append((panel, method, i, edges[i], edges[i + 1], int(c)))
    return rows


def export_pdf_histograms(config: ExperimentConfig, policy, time: float, out_dir=None, rep: int = 0):
    """z-component histograms of RL Monte-Carlo members and EnKF members at one observation time."""
    k = observation_index(config, time)
    twin = generate_twin(config, twin_seed(config, rep))
    runs = run_methods(config, policy, twin, rep, (RL_MC, ENKF))
    rows = histogram_panels(runs[RL_MC], runs[ENKF], k)
    if out_dir is not None:
        write_csv(Path(out_dir) / config.name / f"histograms_t{time:g}.csv", HISTOGRAM_COLUMNS, rows)
    return rows, runs


def free_run_rmse(config: ExperimentConfig, rep: int) -> np.ndarray:
    return free_run(generate_twin(config, twin_seed(config, rep)))
