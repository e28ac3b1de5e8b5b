"""Permutation-aware metrics for recovered sources, states and transition matrices."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 6


@dataclass
class MatchResult:
    """Source matching; ``permutation[i]`` is the estimated column paired with true source i."""

    permutation: tuple[int, ...]
    signs: np.ndarray
    correlations: np.ndarray
    mean_correlation: float

    def align(self, estimated: np.ndarray) -> np.ndarray:
        """Estimated columns reordered and sign-corrected to face the true sources."""
        return estimated[:, list(self.permutation)] * self.signs


@dataclass
class StateMatch:
    """``permutation[k]`` is the true label assigned to decoded label k."""

    permutation: tuple[int, ...]
    accuracy: float
    confusion: np.ndarray  # rows: true label, cols: relabelled decoded label

    def relabel(self, decoded: np.ndarray) -> np.ndarray:
        return np.asarray(self.permutation)[decoded]


@dataclass
class StateMatchResult:
    matches: list[StateMatch]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.accuracy for m in self.matches])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())


@dataclass
class TransitionAgreement:
    mean_tv: float
    row_tv: np.ndarray
    learned_diagonal_dominant: bool
    empirical_diagonal_dominant: bool


def correlation_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlations (population normalisation) between columns of a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    za = a - a.mean(axis=0)
    zb = b - b.mean(axis=0)
    sa = np.sqrt((za**2).mean(axis=0))
    sb = np.sqrt((zb**2).mean(axis=0))
    if np.any(sa == 0) or np.any(sb == 0):
        raise ValueError("correlation is undefined for a zero-variance column")
    return (za / sa).T @ (zb / sb) / a.shape[0]


def _best_assignment(score: np.ndarray) -> tuple[int, ...]:
    """Column per row maximising the summed score; exhaustive for small problems."""
    n = score.shape[0]
    if n > MAX_EXHAUSTIVE:
        rows, cols = linear_sum_assignment(score, maximize=True)
        return tuple(int(c) for c in cols[np.argsort(rows)])
    best, best_total = None, -np.inf
    for perm in itertools.permutations(range(n)):
        total = score[np.arange(n), perm].sum()
        if total > best_total + 1e-12:
            best, best_total = perm, total
    return tuple(best)


def match_sources(estimated: np.ndarray, truth: np.ndarray) -> MatchResult:
    """
    Pair estimated sources with true sources by maximal total |correlation|.

    Args:
        estimated: T x n estimated sources
        truth: T x n ground-truth sources

    Returns:
        MatchResult with permutation, signs and per-source absolute correlations

    Raises:
        ValueError: If shapes differ or a column has zero variance
    """
    estimated = np.asarray(estimated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimated.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimated.shape} vs {truth.shape}")
    corr = correlation_matrix(truth, estimated)
    perm = _best_assignment(np.abs(corr))
    matched = corr[np.arange(len(perm)), perm]
    signs = np.where(matched < 0, -1.0, 1.0)
    correlations = np.clip(np.abs(matched), 0.0, 1.0)
    return MatchResult(perm, signs, correlations, float(correlations.mean()))


def _check_labels(states: np.ndarray, K: int) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    if states.size and (states.min() < 0 or states.max() >= K):
        raise ValueError(f"state labels must lie in [0, {K - 1}]")
    return states


def match_states(decoded: np.ndarray, truth: np.ndarray, K: int) -> StateMatch:
    """Best agreement over all K! relabelings of the decoded path."""
    decoded = _check_labels(decoded, K)
    truth = _check_labels(truth, K)
    if decoded.shape != truth.shape:
        raise ValueError(f"shape mismatch: {decoded.shape} vs {truth.shape}")
    counts = np.zeros((K, K))
    np.add.at(counts, (decoded, truth), 1.0)
    perm = _best_assignment(counts)
    relabelled = np.asarray(perm)[decoded]
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (truth, relabelled), 1)
    accuracy = float(np.trace(confusion) / max(len(truth), 1))
    return StateMatch(perm, accuracy, confusion)


def match_state_paths(
    decoded: np.ndarray, truth: np.ndarray, K: int, source_permutation: tuple[int, ...]
) -> StateMatchResult:
    """Per-source state matching, decoded column ``source_permutation[i]`` against truth i."""
    return StateMatchResult(
        [
            match_states(decoded[:, source_permutation[i]], truth[:, i], K)
            for i in range(truth.shape[1])
        ]
    )


def empirical_transition_matrix(states: np.ndarray, K: int) -> np.ndarray:
    """Row-normalised transition counts; rows of unvisited states are uniform."""
    states = _check_labels(states, K)
    if len(states) < 2:
        raise ValueError("need at least two time steps")
    counts = np.zeros((K, K))
    np.add.at(counts, (states[:-1], states[1:]), 1.0)
    visits = counts.sum(axis=1, keepdims=True)
    unvisited = visits[:, 0] == 0
    if np.any(unvisited):
        logger.warning(f"States {np.flatnonzero(unvisited).tolist()} never left; rows set uniform")
    return np.where(visits > 0, counts / np.where(visits > 0, visits, 1.0), 1.0 / K)


def unvisited_states(states: np.ndarray, K: int) -> np.ndarray:
    """Mask of states with no outgoing transition among t < T."""
    states = _check_labels(states, K)
    return np.bincount(states[:-1], minlength=K) == 0


def is_diagonal_dominant(matrix: np.ndarray) -> bool:
    """Every diagonal entry exceeds every off-diagonal entry in its row."""
    matrix = np.asarray(matrix)
    K = matrix.shape[0]
    if K == 1:
        return True
    off = np.where(np.eye(K, dtype=bool), -np.inf, matrix)
    return bool(np.all(np.diag(matrix) > off.max(axis=1)))


def _check_stochastic(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if (
        matrix.ndim != 2
        or matrix.shape[0] != matrix.shape[1]
        or np.any(matrix < -1e-9)
        or np.any(np.abs(matrix.sum(axis=1) - 1.0) > 1e-9)
    ):
        raise ValueError(f"{name} is not a row-stochastic square matrix")
    return matrix


def transition_agreement(
    learned: np.ndarray, empirical: np.ndarray, permutation: tuple[int, ...] | None = None
) -> TransitionAgreement:
    """
    Mean row-wise total-variation distance between two transition matrices.

    Args:
        learned: K x K learned transition matrix
        empirical: K x K empirical matrix
        permutation: state relabeling from ``match_states``; ``permutation[k]`` is the
            empirical label corresponding to learned state k. Identity when None.

    Returns:
        TransitionAgreement with mean TV, per-row TV and diagonal-dominance flags
    """
    learned = _check_stochastic(learned, "learned")
    empirical = _check_stochastic(empirical, "empirical")
    if learned.shape != empirical.shape:
        raise ValueError(f"shape mismatch: {learned.shape} vs {empirical.shape}")
    if permutation is not None:
        idx = np.asarray(permutation)
        empirical = empirical[np.ix_(idx, idx)]
    row_tv = 0.5 * np.abs(learned - empirical).sum(axis=1)
    return TransitionAgreement(
        mean_tv=float(row_tv.mean()),
        row_tv=row_tv,
        learned_diagonal_dominant=is_diagonal_dominant(learned),
        empirical_diagonal_dominant=is_diagonal_dominant(empirical),
    )
