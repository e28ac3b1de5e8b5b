"""Main entry point for SAHMM-VAE experiments."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from dotenv import load_dotenv
load_dotenv()

from src.hmmprior import Branch  # noqa: E402
from src.model import SahmmVae, TrainConfig, TrainingDiverged  # noqa: E402
from src.plots import render_all  # noqa: E402
from src.processor import (  # noqa: E402
    evaluate_run,
    loss_frame,
    metrics_frame,
    prior_trace_frame,
    sources_frame,
    states_frame,
    transitions_frame,
    write_csv,
)
from src.settings import (  # noqa: E402
    DEFAULT_MIXING_MATRIX,
    EXIT_CONFIG_ERROR,
    EXIT_DIVERGED,
    EXIT_OK,
    LOG_FORMAT,
    LOG_LEVEL,
    ConfigError,
    EpisodeConfig,
    ExperimentConfig,
    load_experiment_config,
)
from src.storage import (  # noqa: E402
    load_episode,
    mixing_from_dict,
    save_checkpoint,
    save_episode,
    save_prior_snapshots,
    source_spec_from_dict,
    write_json,
)
from src.synthgen import (  # noqa: E402
    EpisodeData,
    SpecError,
    default_source_specs,
    make_episode,
    make_rng,
)

logger = logging.getLogger(__name__)


@dataclass
class RunSummary:
    """What a finished (or diverged) run reports back to its caller."""

    branch: int
    episode_hash: str
    status: str
    mean_abs_corr: float = float("nan")
    mean_state_accuracy: float = float("nan")
    mean_transition_tv: float = float("nan")


def build_episode(config: EpisodeConfig) -> EpisodeData:
    """
    Load the saved episode or generate one from the episode section.

    Args:
        config: Episode section of the experiment config

    Returns:
        EpisodeData with ground truth

    Raises:
        SpecError: If the source specs or the mixing map are invalid
    """
    if config.path is not None:
        logger.info(f"Loading episode from {config.path}")
        return load_episode(config.path)

    if config.sources:
        specs = [source_spec_from_dict(record) for record in config.sources]
    else:
        try:
            scenario = Branch.parse(config.scenario)
        except ValueError as e:
            raise SpecError(f"unknown scenario {config.scenario!r}") from e
        specs = default_source_specs(
            scenario,
            config.num_sources,
            config.num_states,
            config.self_transition,
        )
    n = len(specs)

    # spawn(n + 2)[:n + 1] reproduces the generator streams of make_episode
    mixing_rng = make_rng(np.random.SeedSequence(config.seed).spawn(n + 2)[-1])
    record = dict(config.mixing)
    if record.get("kind", "linear") == "linear" and "matrix" not in record:
        if n == len(DEFAULT_MIXING_MATRIX[0]):
            record["matrix"] = DEFAULT_MIXING_MATRIX
        else:
            record["matrix"] = np.linalg.qr(mixing_rng.standard_normal((n, n)))[0]
    record.setdefault("num_sources", n)
    mixing = mixing_from_dict(record, num_sources=n, rng=mixing_rng)
    return make_episode(specs, mixing, config.T, config.seed)


def write_run_outputs(
    model: SahmmVae, episode: EpisodeData, out_dir: Path, plots: bool
) -> RunSummary:
    """Evaluate a trained model and write every CSV, JSON and SVG artifact to ``out_dir``."""
    evaluation = evaluate_run(model, episode)
    report = model.report
    n = episode.num_sources
    branch = int(model.config.branch)

    metrics = metrics_frame(episode, evaluation, report, branch)
    write_csv(loss_frame(report, n), out_dir / "loss.csv")
    write_csv(sources_frame(episode, evaluation), out_dir / "sources.csv")
    write_csv(states_frame(episode, evaluation), out_dir / "states.csv")
    write_csv(transitions_frame(evaluation), out_dir / "transitions.csv")
    write_csv(metrics, out_dir / "metrics.csv")
    write_csv(prior_trace_frame(report), out_dir / "prior_trace.csv")
    save_prior_snapshots(report.records, out_dir / "prior_snapshots.json")
    save_checkpoint(model, out_dir / "checkpoint.json")
    if plots:
        render_all(out_dir)

    row = metrics.iloc[0]
    return RunSummary(
        branch=branch,
        episode_hash=episode.fingerprint(),
        status="ok",
        mean_abs_corr=float(row["mean_abs_corr"]),
        mean_state_accuracy=float(row["mean_state_accuracy"]),
        mean_transition_tv=float(row["mean_transition_tv"]),
    )


def write_divergence(error: TrainingDiverged, episode: EpisodeData, out_dir: Path) -> None:
    """Keep the partial loss trace and a parameter dump for a diverged run."""
    write_csv(loss_frame(error.report, episode.num_sources), out_dir / "loss.csv")
    write_csv(prior_trace_frame(error.report), out_dir / "prior_trace.csv")
    write_json(
        out_dir / "divergence.json",
        {
            "epoch": error.epoch,
            "components": vars(error.components),
            "episode_hash": episode.fingerprint(),
            "parameters": error.dump,
        },
        allow_nan=True,
    )


def train_and_write(
    config: ExperimentConfig, episode: EpisodeData, out_dir: str | Path
) -> RunSummary:
    """
    Train one branch on ``episode`` and write its outputs.

    Args:
        config: Experiment config (model section selects the branch)
        episode: Shared episode
        out_dir: Directory for this run's artifacts

    Returns:
        RunSummary; status is "diverged" when training hit a non-finite loss
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_config = TrainConfig.from_model_config(
        config.model, episode.mixing.kind, episode.num_states
    )
    model = SahmmVae(train_config, episode.observations.shape[1], episode.num_sources)
    logger.info(
        f"Training branch {train_config.branch.value} ({train_config.branch.label}) "
        f"for {train_config.epochs} epochs into {out_dir}"
    )
    try:
        model.fit(episode)
    except TrainingDiverged as e:
        write_divergence(e, episode, out_dir)
        return RunSummary(int(train_config.branch), episode.fingerprint(), "diverged")
    return write_run_outputs(model, episode, out_dir, config.plots)


def run_experiment(config_path: str | Path, overrides: dict[str, Any] | None = None) -> int:
    """
    Train the configured branch and write loss, sources, states, transitions and metrics.

    Args:
        config_path: JSON experiment config
        overrides: CLI overrides (seed, epochs, output_dir, plots)

    Returns:
        Exit status: 0 success, 2 invalid config, 3 divergence
    """
    try:
        config = load_experiment_config(config_path, overrides)
        episode = build_episode(config.episode)
    except (ConfigError, SpecError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR

    summary = train_and_write(config, episode, config.output_dir)
    if summary.status == "diverged":
        logger.error(f"Run diverged; partial outputs kept in {config.output_dir}")
        return EXIT_DIVERGED

    logger.info("Run Results")
    logger.info(f"  Episode: {summary.episode_hash}")
    logger.info(f"  Mean |corr|: {summary.mean_abs_corr:.4f}")
    logger.info(f"  Mean state accuracy: {summary.mean_state_accuracy:.4f}")
    logger.info(f"  Mean transition TV: {summary.mean_transition_tv:.4f}")
    return EXIT_OK


def generate_episode(
    config_path: str | Path, out_path: str | Path, overrides: dict[str, Any] | None = None
) -> int:
    """Generate the configured episode and save it as JSON."""
    try:
        config = load_experiment_config(config_path, overrides)
        episode = build_episode(config.episode)
    except (ConfigError, SpecError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR
    save_episode(episode, out_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sahmm", description="Blind source separation with HMM-structured VAE priors"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", dest="output_dir", help="Output directory (overrides config)")
    common.add_argument("--no-plots", dest="plots", action="store_false", default=None)
    common.add_argument("--seed", type=int, help="Seed for episode and model (overrides config)")
    common.add_argument("--epochs", type=int, help="Number of training epochs (overrides config)")

    commands = parser.add_subparsers(dest="command", required=True)
    run = commands.add_parser("run", parents=[common], help="Train one branch and evaluate")
    run.add_argument("config")
    gen = commands.add_parser("gen", parents=[common], help="Generate and save an episode")
    gen.add_argument("config")
    gen.add_argument("out")
    compare = commands.add_parser("compare", parents=[common], help="Run all three branches")
    compare.add_argument("config")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main CLI entry point."""
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "output_dir": args.output_dir,
        "plots": args.plots,
    }
    if args.seed is not None and args.seed < 0:
        logger.error("--seed must be a non-negative integer")
        return EXIT_CONFIG_ERROR

    try:
        if args.command == "run":
            return run_experiment(args.config, overrides)
        if args.command == "gen":
            return generate_episode(args.config, args.out, overrides)
        from src.compare import compare_branches

        return compare_branches(args.config, overrides)
    except Exception as e:
        logger.exception(f"Error during {args.command}: {e}")
        raise


if __name__ == "__main__":
    sys.exit(main())
