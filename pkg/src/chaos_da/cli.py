"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or input, 3 divergence budget exceeded,
1 any other runtime failure. Failures also print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, seeding
from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .csvio import append_csv_row, write_csv
from .dynamics import LorenzParams, integrate, spun_up_state
from .envda import AssimilationEnv, agent_state_dim
from .harness import ENKF, RL_MC, RL_SINGLE, ensemble_size_sweep, export_pdf_histograms, run_experiment
from .neural import load_network
from .ppo import LOG_COLUMNS, TrainingState, load_checkpoint, train

log = logging.getLogger("chaos_da")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
SIMULATE_COLUMNS = ("time", "x", "y", "z", "dx", "dy", "dz")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **details):
        super().__init__(message)
        self.code, self.kind, self.details = code, kind, details


def _workers(arg: int | None) -> int:
    if arg is not None:
        n = arg
    elif os.environ.get("CHAOS_DA_WORKERS"):
        try:
            n = int(os.environ["CHAOS_DA_WORKERS"])
        except ValueError:
            raise CliError(EXIT_INVALID, "invalid_input",
                           f"CHAOS_DA_WORKERS must be an integer, got {os.environ['CHAOS_DA_WORKERS']!r}")
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise CliError(EXIT_INVALID, "invalid_input", f"worker count must be positive, got {n}")
    return n


def _config(args) -> ExperimentConfig:
    # without a file the defaults (and their registry hyperparameters) apply
    cfg = load_config(args.config) if args.config else parse_config("", "<defaults>")
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise CliError(EXIT_INVALID, "invalid_input", f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _checkpoint_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / cfg.name / "checkpoint"


def _load_policy(args, cfg: ExperimentConfig):
    d = _checkpoint_dir(args, cfg)
    if not (d / "actor.bin").exists() or not (d / "critic.bin").exists():
        raise CliError(EXIT_INVALID, "missing_checkpoint", f"no actor/critic checkpoint in {d}")
    try:
        policy, _ = load_checkpoint(d)
        _, _, extras = load_network(d / "actor.bin")
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INVALID, "bad_checkpoint", f"{d}: {exc}")
    scales = tuple(float(v) for v in extras[3:6])
    if scales and scales != cfg.scales.as_tuple():
        raise CliError(EXIT_INVALID, "bad_checkpoint",
                       f"checkpoint was trained with input scales {scales}, config has {cfg.scales.as_tuple()}")
    expected = agent_state_dim(cfg.steps_per_obs, cfg.op)
    if policy.input_dim != expected:
        raise CliError(EXIT_INVALID, "bad_checkpoint",
                       f"checkpoint expects {policy.input_dim} inputs; this config produces {expected}")
    return policy


def _check_divergence(cfg: ExperimentConfig, diverged: dict[str, int]) -> None:
    over = {m: n for m, n in diverged.items() if n > cfg.max_divergences}
    if over:
        raise CliError(EXIT_DIVERGED, "divergence_budget_exceeded",
                       f"diverged repetitions exceed the budget of {cfg.max_divergences}", diverged=over)


def cmd_simulate(args, cfg: ExperimentConfig) -> None:
    params = LorenzParams()
    if cfg.simulate.initial is not None:
        x0 = np.array(cfg.simulate.initial, dtype=np.float64)
    else:
        x0 = spun_up_state(seeding.make_rng(cfg.seed, seeding.SIMULATE), params, cfg.dt)
    traj = integrate(x0, params, cfg.grid, cfg.simulate.n_steps)
    if traj.diverged:
        raise CliError(EXIT_DIVERGED, "divergence", "free run left the blow-up bound")
    times = np.arange(traj.states.shape[0]) * cfg.dt
    rows = (np.concatenate([[t], s, d]) for t, s, d in zip(times, traj.states, traj.derivs))
    path = write_csv(Path(args.out) / cfg.name / "simulate.csv", SIMULATE_COLUMNS, rows)
    log.info("wrote %s", path)


def cmd_train(args, cfg: ExperimentConfig) -> None:
    out = Path(args.out) / cfg.name
    ckpt = _checkpoint_dir(args, cfg)
    log_path = out / "training_log.csv"
    resume = None
    if args.resume:
        if not (ckpt / "train_state.json").exists():
            raise CliError(EXIT_INVALID, "missing_checkpoint", f"nothing to resume in {ckpt}")
        resume = TrainingState.load(ckpt)
        log.info("resuming at update %d (%d episodes done)", resume.next_update, resume.episodes_done)
    elif log_path.exists():
        log_path.unlink()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    extras = cfg.scales.as_tuple()

    def on_update(row, state):
        append_csv_row(log_path, LOG_COLUMNS, [row[c] for c in LOG_COLUMNS])
        state.save(ckpt, extras)
        log.info("update %d: mean episode reward %.4f", row["update_index"], row["mean_episode_reward"])

    result = train(lambda w: AssimilationEnv(cfg), cfg.ppo, cfg.seed, resume=resume, on_update=on_update)
    result.state.save(ckpt, extras)
    if not log_path.exists():  # zero-episode runs still get a (header-only) log
        write_csv(log_path, LOG_COLUMNS, [])
    log.info("checkpoint in %s", ckpt)


def _run_harness(args, cfg: ExperimentConfig, methods) -> None:
    policy = _load_policy(args, cfg) if (RL_SINGLE in methods or RL_MC in methods) else None
    res = run_experiment(cfg, policy, out_dir=args.out, methods=methods, workers=_workers(args.workers))
    for m in methods:
        log.info("%s: time-averaged RMSE %.6g ± %.3g", m, res.summary.time_avg_mean(m), res.summary.time_avg_std(m))
    _check_divergence(cfg, res.summary.diverged)


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    _run_harness(args, cfg, (RL_SINGLE, RL_MC))


def cmd_compare(args, cfg: ExperimentConfig) -> None:
    _run_harness(args, cfg, (RL_SINGLE, RL_MC, ENKF))


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    sizes = args.sizes if args.sizes else list(cfg.sweep_sizes)
    methods = ("enkf",) if args.enkf_only else ("rl", "enkf")
    policy = None if args.enkf_only else _load_policy(args, cfg)
    try:
        rows = ensemble_size_sweep(cfg, policy, sizes, methods, out_dir=args.out, workers=_workers(args.workers))
    except ValueError as exc:
        raise CliError(EXIT_INVALID, "invalid_input", str(exc))
    for r in rows:
        log.info("N=%d: rl %s enkf %s", r["ensemble_size"], r["rl"], r["enkf"])


def cmd_histograms(args, cfg: ExperimentConfig) -> None:
    times = args.times if args.times else list(cfg.histogram_times)
    policy = _load_policy(args, cfg)
    for t in times:
        try:
            export_pdf_histograms(cfg, policy, t, out_dir=args.out)
        except ValueError as exc:
            raise CliError(EXIT_INVALID, "invalid_input", str(exc))
        log.info("histograms at t=%g written", t)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "histograms": cmd_histograms,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--seed", type=int, help="override the config's base seed")
    common.add_argument("--workers", type=int, help="parallel processes (default: $CHAOS_DA_WORKERS or CPU count)")
    common.add_argument("--checkpoint", help="checkpoint directory (default: <out>/<name>/checkpoint)")
    common.add_argument("--quiet", action="store_true", help="only report warnings and errors")

    parser = argparse.ArgumentParser(prog="chaos-da", description="RL and EnKF data assimilation on Lorenz '63.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("simulate", parents=[common], help="free-run trajectory with derivatives")
    p = sub.add_parser("train", parents=[common], help="train the PPO agent")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    sub.add_parser("evaluate", parents=[common], help="RL single and Monte-Carlo runs over all repetitions")
    sub.add_parser("compare", parents=[common], help="RL single, RL Monte-Carlo and EnKF on shared observations")
    p = sub.add_parser("sweep", parents=[common], help="RMSE versus ensemble size")
    p.add_argument("--sizes", type=int, nargs="+", help="ensemble sizes (default: [sweep] sizes)")
    p.add_argument("--enkf-only", action="store_true", help="sweep the EnKF alone (no checkpoint needed)")
    p = sub.add_parser("histograms", parents=[common], help="forecast/analysis/correction histograms")
    p.add_argument("--times", type=float, nargs="+", help="observation times (default: [histograms] times)")
    return parser


def _fail(code: int, kind: str, message: str, **details) -> int:
    payload = {"error": kind, "exit_code": code, "message": message, **details}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_INVALID, "config_error", "invalid configuration", problems=exc.problems)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.details)
    except KeyboardInterrupt:
        return _fail(EXIT_RUNTIME, "interrupted", "interrupted")
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        log.debug("unhandled error", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime_error", f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
