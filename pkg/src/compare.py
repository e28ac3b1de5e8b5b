"""
Run all three prior branches on one shared episode and seed, then merge a comparison table
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any

import pandas as pd

from src.hmmprior import Branch
from src.main import RunSummary, build_episode, train_and_write
from src.processor import write_csv
from src.settings import (
    EXIT_CONFIG_ERROR,
    EXIT_DIVERGED,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    load_experiment_config,
)
from src.synthgen import EpisodeData, SpecError

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = [
    "branch",
    "label",
    "episode_hash",
    "mean_abs_corr",
    "mean_state_accuracy",
    "mean_transition_tv",
    "status",
]


def branch_dir(output_dir: str | Path, branch: Branch) -> Path:
    return Path(output_dir) / f"branch-{branch.value}-{branch.label}"


def _run_branch(config: ExperimentConfig, episode: EpisodeData, branch: Branch) -> RunSummary:
    branch_config = replace(config, model=replace(config.model, branch=int(branch)))
    return train_and_write(branch_config, episode, branch_dir(config.output_dir, branch))


def comparison_frame(summaries: list[RunSummary]) -> pd.DataFrame:
    rows = []
    for summary in sorted(summaries, key=lambda s: s.branch):
        row = asdict(summary)
        row["label"] = Branch(summary.branch).label
        rows.append(row)
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def compare_branches(config_path: str | Path, overrides: dict[str, Any] | None = None) -> int:
    """
    Train branches 1-3 on the same episode and write comparison.csv.

    Each branch writes only inside its own subdirectory; the comparison table is merged
    once every branch has finished.

    Args:
        config_path: JSON experiment config; its model section is shared by all branches
        overrides: CLI overrides (seed, epochs, output_dir, plots)

    Returns:
        Exit status: 0 success, 2 invalid config, 3 if any branch diverged
    """
    try:
        config = load_experiment_config(config_path, overrides)
        episode = build_episode(config.episode)
    except (ConfigError, SpecError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR

    branches = list(Branch)
    logger.info(
        f"Comparing branches {[b.value for b in branches]} on episode {episode.fingerprint()[:12]} "
        f"with {config.workers} worker(s)"
    )
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(branches))) as pool:
            futures = [pool.submit(_run_branch, config, episode, b) for b in branches]
            summaries = [future.result() for future in futures]
    else:
        summaries = [_run_branch(config, episode, b) for b in branches]

    frame = comparison_frame(summaries)
    path = write_csv(frame, Path(config.output_dir) / "comparison.csv")

    logger.info(f"\n{'=' * 70}")
    logger.info("BRANCH COMPARISON SUMMARY")
    logger.info(f"{'=' * 70}")
    for summary in summaries:
        logger.info(
            f"  {summary.branch} ({Branch(summary.branch).label}): {summary.status}, "
            f"|corr|={summary.mean_abs_corr:.4f}, "
            f"state acc={summary.mean_state_accuracy:.4f}, "
            f"TV={summary.mean_transition_tv:.4f}"
        )
    logger.info(f"Wrote {path}")

    if any(s.status == "diverged" for s in summaries):
        logger.error("At least one branch diverged")
        return EXIT_DIVERGED
    return EXIT_OK
