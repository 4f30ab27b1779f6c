import argparse
import dataclasses
import importlib.metadata
import logging
import os
import sys
import typing
from pathlib import Path
from typing import TypedDict

from poolselect import agent, evaluation, pool, training, world
from poolselect.error import (
    CombinationLimitError,
    ConfigError,
    InputError,
    RuntimeNumericError,
)
from poolselect.files import dump_json, sha256_file, write_json

logger = logging.getLogger(__name__)
# Disable logging by default to keep standard output machine-readable. Can be explicitly enabled with --log.
logging.basicConfig(level=sys.maxsize, force=True)

LOG_ENVIRONMENT_VARIABLE = "POOLSELECT_LOG"
LOG_LEVELS = ("debug", "info", "warning", "error", "critical")


class ErrorMessage(TypedDict):
    """Standardised error message that will be printed in case of an error."""

    type: str
    """Type of error, typically the name of the raised exception."""
    message: str | None
    """Human-readable message describing the error."""


class RunManifest(TypedDict):
    """Description of a run directory, written to ``manifest.json``."""

    command: str
    config_hash: str | None
    """SHA-256 of the configuration file, ``None`` if the defaults were used."""
    seed: int
    artifacts: dict[str, str]
    """Every file of the run, relative to the run directory."""
    version: str


def _version() -> str:
    try:
        return importlib.metadata.version("poolselect")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def _config_hash(path: str | None) -> str | None:
    return None if path is None else sha256_file(path)


def _run_directory(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(
    out: Path,
    command: str,
    config: str | None,
    seed: int,
    artifacts: dict[str, str],
) -> RunManifest:
    manifest: RunManifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "artifacts": dict(sorted(artifacts.items())),
        "version": _version(),
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def _load_train_config(args: argparse.Namespace) -> training.TrainConfig:
    config = (
        training.TrainConfig()
        if args.config is None
        else training.load_train_config(args.config)
    )
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _load_protocol_config(
    path: str | None, args: argparse.Namespace
) -> evaluation.ProtocolConfig:
    protocol = (
        evaluation.ProtocolConfig()
        if path is None
        else evaluation.load_protocol_config(path)
    )
    if getattr(args, "seed", None) is not None:
        protocol = dataclasses.replace(protocol, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        protocol = dataclasses.replace(protocol, threads=args.threads)
    protocol.validate()
    return protocol


def cmd_gen_world(args: argparse.Namespace) -> int:
    config = (
        world.WorldConfig()
        if args.config is None
        else world.load_world_config(args.config)
    )
    generated = world.generate_world(args.seed, config)
    world.save_world(generated, args.out)
    _print_json(
        {
            "identities": generated.identities,
            "samples": len(generated.samples),
            "seed": generated.seed,
            "world": args.out,
        },
        pretty=args.pretty,
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    sim = world.load_world(args.world)
    pools = pool.load_poolset(args.pools)
    out = _run_directory(args.out)
    artifacts: dict[str, str] = {}
    last_good: list[agent.AgentParams] = []

    def on_epoch_end(epoch: int, params: agent.AgentParams) -> None:
        last_good[:] = [params]
        if config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0:
            name = f"checkpoint-epoch-{epoch + 1:04d}.json"
            agent.save_checkpoint(params, out / name)
            artifacts[name.removesuffix(".json")] = name

    try:
        result = training.train(sim, pools, config, on_epoch_end=on_epoch_end)
    except RuntimeNumericError:
        if last_good:
            agent.save_checkpoint(last_good[0], out / "checkpoint-last-good.json")
            artifacts["checkpoint-last-good"] = "checkpoint-last-good.json"
        _write_manifest(out, "train", args.config, config.seed, artifacts)
        raise

    agent.save_checkpoint(result.params, out / "checkpoint.json")
    training.write_step_records(result.records, out / "steps.csv")
    artifacts["checkpoint"] = "checkpoint.json"
    artifacts["steps"] = "steps.csv"
    manifest = _write_manifest(out, "train", args.config, config.seed, artifacts)

    last = result.records[-1]
    _print_json(
        {
            "checkpoint": str(out / "checkpoint.json"),
            "epochs": config.epochs,
            "lambda": result.controller.lam,
            "manifest": manifest,
            "mean_cost": last.mean_cost,
            "mean_reward": last.mean_reward,
            "steps": len(result.records),
        },
        pretty=args.pretty,
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    protocol = _load_protocol_config(args.config, args)
    sim = world.load_world(args.world)
    pools = pool.load_poolset(args.pools)
    params = agent.load_checkpoint(args.checkpoint)
    agent.check_compatible(params, pools)
    out = _run_directory(args.out)

    result = evaluation.run_protocol(
        sim, pools, evaluation.policy_chooser(params, pools), protocol
    )
    write_json(out / "report.json", result.report)
    evaluation.write_histogram(
        result.report,
        evaluation.combo_gflops(result.actions, pools),
        out / "histogram.csv",
    )
    evaluation.write_score_matrix(result.scores, out / "scores.csv")
    evaluation.write_trace(
        evaluation.selection_trace(sim, pools, params),
        pools.modalities,
        out / "trace.csv",
    )
    artifacts = {
        "histogram": "histogram.csv",
        "report": "report.json",
        "scores": "scores.csv",
        "trace": "trace.csv",
    }

    if protocol.subsets is not None:
        ablation = [
            {"modalities": list(modalities), "report": report}
            for modalities, report in evaluation.modality_ablation(
                sim, pools, params, protocol.subsets, protocol
            )
        ]
        write_json(out / "ablation.json", ablation)
        artifacts["ablation"] = "ablation.json"

    _write_manifest(out, "eval", args.config, protocol.seed, artifacts)
    _print_json(result.report, pretty=args.pretty)
    return 0


def cmd_baselines(args: argparse.Namespace) -> int:
    protocol = _load_protocol_config(args.config, args)
    sim = world.load_world(args.world)
    pools = pool.load_poolset(args.pools)
    out = _run_directory(args.out)

    # Refuse before any evaluation work.
    count = pool.count_actions(pools)
    if count > protocol.combination_cap:
        raise CombinationLimitError(
            f"Pools have {count} joint actions, more than the cap of {protocol.combination_cap}"
        )

    subsets = []
    for modalities in evaluation.modality_subsets(pools, protocol):
        restricted = pools.restrict(modalities)
        cheapest = pool.min_combo(restricted)
        dearest = pool.max_combo(restricted)
        subsets.append(
            {
                "modalities": list(restricted.modalities),
                "min": {
                    "combo_id": pool.combo_id(cheapest, restricted),
                    "report": evaluation.evaluate_fixed_combo(
                        sim, restricted, cheapest, protocol
                    ),
                },
                "max": {
                    "combo_id": pool.combo_id(dearest, restricted),
                    "report": evaluation.evaluate_fixed_combo(
                        sim, restricted, dearest, protocol
                    ),
                },
            }
        )

    combos = []
    points: list[evaluation.ParetoPoint] = []
    for action in pool.enumerate_actions(pools):
        report = evaluation.evaluate_fixed_combo(sim, pools, action, protocol)
        combos.append({"combo_id": pool.combo_id(action, pools), "report": report})
        points.append(evaluation.pareto_point(action, pools, report))

    oracle = evaluation.brute_force_oracle(sim, pools, protocol.reward_lambda, protocol)
    summary = {
        "combinations": len(combos),
        "oracle": {
            "best_constant": pool.combo_id(oracle.best_constant, pools),
            "best_constant_mean_reward": oracle.best_constant_mean_reward,
            "lambda": protocol.reward_lambda,
            "per_input_mean_reward": oracle.per_input_mean_reward,
        },
        "pareto_front": [p["combo_id"] for p in evaluation.pareto_front(points)],
    }

    write_json(
        out / "baselines.json", {"combos": combos, "subsets": subsets, **summary}
    )
    evaluation.write_pareto_table(points, out / "pareto.csv")
    _write_manifest(
        out,
        "baselines",
        args.config,
        protocol.seed,
        {"baselines": "baselines.json", "pareto": "pareto.csv"},
    )
    _print_json(summary, pretty=args.pretty)
    return 0


def _parse_targets(value: str) -> list[float]:
    try:
        targets = [float(t) for t in value.split(",") if t.strip() != ""]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"invalid cost targets '{value}'") from ex
    if not targets or not all(0 < t <= 1 for t in targets):
        raise argparse.ArgumentTypeError("cost targets must lie in (0, 1]")
    return targets


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    protocol = _load_protocol_config(args.protocol, args)
    sim = world.load_world(args.world)
    pools = pool.load_poolset(args.pools)
    out = _run_directory(args.out)

    artifacts: dict[str, str] = {}
    rows: list[evaluation.OperatingPoint] = []
    for target in args.targets:
        swept = dataclasses.replace(
            config,
            target_cost=target,
            curriculum_start=max(config.curriculum_start, target),
        )
        result = training.train(sim, pools, swept)
        name = f"checkpoint-target-{target:g}.json"
        agent.save_checkpoint(result.params, out / name)
        artifacts[name.removesuffix(".json")] = name

        report = evaluation.evaluate_policy(sim, pools, result.params, protocol)
        final_epoch = [r for r in result.records if r.epoch == swept.epochs - 1]
        rows.append(
            {
                "target": target,
                "avg_gflops": report["avg_gflops"],
                "rank1": report["rank1"],
                "map": report["map"],
                "mean_cost": sum(r.mean_cost for r in final_epoch) / len(final_epoch),
            }
        )
        logger.info("Operating point at target %g: %s", target, rows[-1])

    evaluation.write_operating_points(rows, out / "operating-points.csv")
    artifacts["operating-points"] = "operating-points.csv"
    _write_manifest(out, "sweep", args.config, config.seed, artifacts)
    _print_json(rows, pretty=args.pretty)
    return 0


def _exit_status(ex: BaseException) -> int:
    if isinstance(ex, InputError):
        return 2
    if isinstance(ex, RuntimeNumericError):
        return 3
    return 1


def _handle_exception(
    ex: BaseException, output: typing.IO[str] | None = None, pretty: bool = False
) -> int:
    """Handle the given exception by converting it into JSON and printing it to ``output``.

    Args:
        ex: exception to handle
        output: file-like object the exception will be written to

    Returns:
        exit code to be passed to :py:func:`sys.exit`
    """
    logger.error("An error occurred, see exception below for details", exc_info=ex)
    message: ErrorMessage = {"type": ex.__class__.__name__, "message": str(ex)}
    _print_json(
        message, output=sys.stderr if output is None else output, pretty=pretty
    )
    return _exit_status(ex)


def _configure_logging(args: argparse.Namespace) -> None:
    level = args.log if isinstance(args.log, str) else None
    if level is None:
        level = os.environ.get(LOG_ENVIRONMENT_VARIABLE)
    if level is None or level == "":
        return

    numeric_level = getattr(logging, level.upper(), None)
    if level.lower() not in LOG_LEVELS or not isinstance(numeric_level, int):
        raise ConfigError(f"Invalid log level '{level}'")

    logging.basicConfig(level=numeric_level, force=True)


def _print_json(
    result: typing.Any, output: typing.IO[str] | None = None, pretty: bool = False
) -> None:
    dump_json(result, sys.stdout if output is None else output, pretty=pretty)


def _add_world_and_pools(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--world", required=True, help="path of the world snapshot"
    )
    parser.add_argument(
        "--pools", required=True, help="path of the pool configuration"
    )


def _add_threads(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        metavar="N",
        help="score probes with N threads (default: protocol configuration)",
    )


def main(argv: typing.Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(
        description="Train and evaluate budget-constrained model selection policies."
    )
    p.add_argument(
        "-v",
        "--version",
        action="version",
        version=_version(),
    )
    p.add_argument(
        "-l",
        "--log",
        choices=LOG_LEVELS,
        help=f"change the log level (default: ${LOG_ENVIRONMENT_VARIABLE} or disabled)",
        default=None,
    )
    p.add_argument(
        "-p",
        "--pretty",
        action="store_true",
        help="pretty-print JSON",
    )
    sp = p.add_subparsers(title="Subcommands", required=True)

    # gen-world
    p_gen_world = sp.add_parser("gen-world", help="generate a synthetic world")
    p_gen_world.add_argument("--config", help="path of the world configuration")
    p_gen_world.add_argument(
        "--seed", type=int, default=0, help="world seed (default: %(default)s)"
    )
    p_gen_world.add_argument(
        "--out", required=True, help="path of the world snapshot to write"
    )
    p_gen_world.set_defaults(func=cmd_gen_world)

    # train
    p_train = sp.add_parser("train", help="train a selection policy")
    _add_world_and_pools(p_train)
    p_train.add_argument("--config", help="path of the training configuration")
    p_train.add_argument(
        "--seed", type=int, default=None, help="override the training seed"
    )
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.set_defaults(func=cmd_train)

    # eval
    p_eval = sp.add_parser("eval", help="evaluate a trained policy")
    _add_world_and_pools(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="path of the checkpoint")
    p_eval.add_argument("--config", help="path of the protocol configuration")
    p_eval.add_argument(
        "--seed", type=int, default=None, help="override the protocol seed"
    )
    _add_threads(p_eval)
    p_eval.add_argument("--out", required=True, help="run directory")
    p_eval.set_defaults(func=cmd_eval)

    # baselines
    p_baselines = sp.add_parser(
        "baselines", help="evaluate fixed combinations and the brute-force oracle"
    )
    _add_world_and_pools(p_baselines)
    p_baselines.add_argument("--config", help="path of the protocol configuration")
    p_baselines.add_argument(
        "--seed", type=int, default=None, help="override the protocol seed"
    )
    _add_threads(p_baselines)
    p_baselines.add_argument("--out", required=True, help="run directory")
    p_baselines.set_defaults(func=cmd_baselines)

    # sweep
    p_sweep = sp.add_parser(
        "sweep", help="train and evaluate one policy per cost target"
    )
    _add_world_and_pools(p_sweep)
    p_sweep.add_argument("--config", help="path of the training configuration")
    p_sweep.add_argument("--protocol", help="path of the protocol configuration")
    p_sweep.add_argument(
        "--targets",
        type=_parse_targets,
        default=[0.3, 0.45, 0.6],
        help="comma-separated normalised cost targets (default: 0.3,0.45,0.6)",
    )
    p_sweep.add_argument(
        "--seed", type=int, default=None, help="override training and protocol seeds"
    )
    _add_threads(p_sweep)
    p_sweep.add_argument("--out", required=True, help="run directory")
    p_sweep.set_defaults(func=cmd_sweep)

    args = p.parse_args(argv)
    try:
        _configure_logging(args)
        logger.debug("Recognised arguments: %s", args)
        status_code = args.func(args)
    except Exception as ex:
        status_code = _handle_exception(ex, sys.stderr, pretty=args.pretty)

    # Ensure that all functions return a status code. This also helps mypy to narrow the type from Any.
    assert isinstance(status_code, int)

    return status_code
