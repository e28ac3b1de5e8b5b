"""Shared oracles for the test suite: finite differences and exhaustive path enumeration."""

from __future__ import annotations

import itertools
import json
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import logsumexp


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + step
        upper = f()
        x[idx] = original - step
        lower = f()
        x[idx] = original
        grad[idx] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _normalised(initial_logits: np.ndarray, transition_logits: np.ndarray):
    log_pi = initial_logits - logsumexp(initial_logits)
    log_A = transition_logits - logsumexp(transition_logits, axis=1, keepdims=True)
    return log_pi, log_A


def path_scores(
    local: np.ndarray, initial_logits: np.ndarray, transition_logits: np.ndarray
) -> dict[tuple[int, ...], float]:
    """Joint log-score of every one of the K^T state paths."""
    T, K = local.shape
    log_pi, log_A = _normalised(initial_logits, transition_logits)
    scores = {}
    for path in itertools.product(range(K), repeat=T):
        score = log_pi[path[0]] + local[0, path[0]]
        for t in range(1, T):
            score += log_A[path[t - 1], path[t]] + local[t, path[t]]
        scores[path] = score
    return scores


def enumerated_log_likelihood(
    local: np.ndarray, initial_logits: np.ndarray, transition_logits: np.ndarray
) -> float:
    return float(logsumexp(list(path_scores(local, initial_logits, transition_logits).values())))


def enumerated_marginals(
    local: np.ndarray, initial_logits: np.ndarray, transition_logits: np.ndarray
) -> np.ndarray:
    T, K = local.shape
    scores = path_scores(local, initial_logits, transition_logits)
    total = logsumexp(list(scores.values()))
    marginals = np.zeros((T, K))
    for path, score in scores.items():
        weight = np.exp(score - total)
        for t, k in enumerate(path):
            marginals[t, k] += weight
    return marginals


def write_config(directory: Path, name: str = "config.json", **sections: Any) -> Path:
    path = directory / name
    path.write_text(json.dumps(sections))
    return path
