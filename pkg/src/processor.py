"""Turn a trained model and its episode into evaluation summaries and CSV tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from src.evaluation import (
    MatchResult,
    StateMatchResult,
    TransitionAgreement,
    empirical_transition_matrix,
    match_sources,
    match_state_paths,
    transition_agreement,
    unvisited_states,
)
from src.model import SahmmVae, TrainReport
from src.settings import CSV_FLOAT_FORMAT
from src.synthgen import EpisodeData

logger = logging.getLogger(__name__)


@dataclass
class RunEvaluation:
    """Everything the output tables need about one trained run."""

    estimates: np.ndarray  # posterior means, T x n
    decoded: np.ndarray  # Viterbi paths, T x n (model labels, 0-based)
    posterior_decoded: np.ndarray  # posterior-mode paths, T x n
    source_match: MatchResult
    state_match: StateMatchResult
    learned: list[np.ndarray]  # learned A per true source (matched estimate)
    empirical: list[np.ndarray]  # from the decoded path, model labels
    empirical_true: list[np.ndarray]  # from the true path, truth labels
    decoded_agreement: list[TransitionAgreement]
    true_agreement: list[TransitionAgreement]
    unvisited: list[np.ndarray]


def evaluate_run(model: SahmmVae, episode: EpisodeData) -> RunEvaluation:
    """
    Match sources and states against the ground truth and compare transition matrices.

    Args:
        model: Trained model
        episode: Episode the model was trained on

    Returns:
        RunEvaluation indexed by true source
    """
    Y = episode.observations
    K = model.config.num_states
    estimates = model.posterior_means(Y)
    decoded = model.decode_states(Y, method="viterbi")
    posterior_decoded = model.decode_states(Y, method="posterior")
    source_match = match_sources(estimates, episode.sources)
    perm = source_match.permutation

    true_K = max(K, int(episode.states.max()) + 1)
    state_match = match_state_paths(decoded, episode.states, true_K, perm)

    learned, empirical, empirical_true = [], [], []
    decoded_agreement, true_agreement, unvisited = [], [], []
    snapshot = model.params.prior.snapshot()
    for i, j in enumerate(perm):
        A = snapshot[j]["A"]
        E = empirical_transition_matrix(decoded[:, j], K)
        learned.append(A)
        empirical.append(E)
        unvisited.append(unvisited_states(decoded[:, j], K))
        decoded_agreement.append(transition_agreement(A, E))
        if true_K == K:
            E_true = empirical_transition_matrix(episode.states[:, i], K)
            empirical_true.append(E_true)
            true_agreement.append(
                transition_agreement(A, E_true, state_match.matches[i].permutation)
            )

    logger.info(
        f"Mean |corr| {source_match.mean_correlation:.4f}, "
        f"mean state accuracy {state_match.mean_accuracy:.4f}, "
        f"mean transition TV {np.mean([a.mean_tv for a in decoded_agreement]):.4f}"
    )
    return RunEvaluation(
        estimates=estimates,
        decoded=decoded,
        posterior_decoded=posterior_decoded,
        source_match=source_match,
        state_match=state_match,
        learned=learned,
        empirical=empirical,
        empirical_true=empirical_true,
        decoded_agreement=decoded_agreement,
        true_agreement=true_agreement,
        unvisited=unvisited,
    )


def loss_frame(report: TrainReport, num_sources: int) -> pd.DataFrame:
    """One row per logged epoch: epoch, total, rec, logq, logp, corr_1..corr_n."""
    columns = ["epoch", "total", "rec", "logq", "logp"] + [
        f"corr_{j + 1}" for j in range(num_sources)
    ]
    rows = []
    for record in report.records:
        c = record.components
        correlations = (
            record.correlations if record.correlations is not None else [np.nan] * num_sources
        )
        rows.append([record.epoch, c.total, c.rec, c.logq, c.logp, *correlations])
    return pd.DataFrame(rows, columns=columns)


def sources_frame(episode: EpisodeData, evaluation: RunEvaluation) -> pd.DataFrame:
    """True sources next to the matched, sign-corrected estimates."""
    aligned = evaluation.source_match.align(evaluation.estimates)
    frame = pd.DataFrame({"t": np.arange(episode.T)})
    for i in range(episode.num_sources):
        frame[f"true_{i + 1}"] = episode.sources[:, i]
        frame[f"est_{i + 1}"] = aligned[:, i]
    return frame


def states_frame(episode: EpisodeData, evaluation: RunEvaluation) -> pd.DataFrame:
    """True, Viterbi, posterior-mode and relabelled paths per source (1-based labels)."""
    frame = pd.DataFrame({"t": np.arange(episode.T)})
    for i, j in enumerate(evaluation.source_match.permutation):
        match = evaluation.state_match.matches[i]
        frame[f"true_{i + 1}"] = episode.states[:, i] + 1
        frame[f"viterbi_{i + 1}"] = evaluation.decoded[:, j] + 1
        frame[f"posterior_{i + 1}"] = evaluation.posterior_decoded[:, j] + 1
        frame[f"matched_{i + 1}"] = match.relabel(evaluation.decoded[:, j]) + 1
    return frame


def transitions_frame(evaluation: RunEvaluation) -> pd.DataFrame:
    """Long table: source, matrix kind, 1-based row and column, probability."""
    rows = []
    kinds = [("learned", evaluation.learned), ("empirical", evaluation.empirical)]
    if evaluation.empirical_true:
        kinds.append(("empirical_true", evaluation.empirical_true))
    for kind, matrices in kinds:
        for i, matrix in enumerate(matrices):
            for a in range(matrix.shape[0]):
                for b in range(matrix.shape[1]):
                    rows.append((i + 1, kind, a + 1, b + 1, float(matrix[a, b])))
    return pd.DataFrame(rows, columns=["source", "matrix", "row", "col", "value"])


def metrics_frame(
    episode: EpisodeData, evaluation: RunEvaluation, report: TrainReport, branch: int
) -> pd.DataFrame:
    """Single-row summary of the run."""
    n = episode.num_sources
    row: dict[str, object] = {
        "branch": branch,
        "episode_hash": episode.fingerprint(),
        "final_loss": report.epoch_losses[-1] if report.epoch_losses else np.nan,
        "mean_abs_corr": evaluation.source_match.mean_correlation,
        "mean_state_accuracy": evaluation.state_match.mean_accuracy,
        "mean_transition_tv": float(np.mean([a.mean_tv for a in evaluation.decoded_agreement])),
    }
    if evaluation.true_agreement:
        row["mean_true_transition_tv"] = float(
            np.mean([a.mean_tv for a in evaluation.true_agreement])
        )
    for i in range(n):
        row[f"corr_{i + 1}"] = evaluation.source_match.correlations[i]
        row[f"state_accuracy_{i + 1}"] = evaluation.state_match.matches[i].accuracy
        row[f"transition_tv_{i + 1}"] = evaluation.decoded_agreement[i].mean_tv
        row[f"learned_diag_dominant_{i + 1}"] = int(
            evaluation.decoded_agreement[i].learned_diagonal_dominant
        )
        row[f"empirical_diag_dominant_{i + 1}"] = int(
            evaluation.decoded_agreement[i].empirical_diagonal_dominant
        )
        row[f"unvisited_states_{i + 1}"] = int(evaluation.unvisited[i].sum())
    return pd.DataFrame([row])


def prior_trace_frame(report: TrainReport) -> pd.DataFrame:
    """Evolution of every prior parameter and posterior variance over logged epochs."""
    rows = []
    for record in report.records:
        for j, variance in enumerate(record.posterior_variances):
            rows.append((record.epoch, j + 1, "posterior_variance", 1, 1, float(variance)))
        for j, snapshot in enumerate(record.prior_snapshot):
            for name, value in snapshot.items():
                grid = np.atleast_2d(value)
                for a in range(grid.shape[0]):
                    for b in range(grid.shape[1]):
                        rows.append((record.epoch, j + 1, name, a + 1, b + 1, float(grid[a, b])))
    return pd.DataFrame(rows, columns=["epoch", "source", "parameter", "row", "col", "value"])


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    """Fixed column order, 9 significant digits, '\\n' line endings, no index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path
