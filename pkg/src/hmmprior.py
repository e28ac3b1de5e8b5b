"""Source-wise hidden-Markov priors over latent trajectories.

Every latent source j carries its own initial logits, transition logits and state
payload. Three payloads are supported:

* ``GaussianStates`` - state-specific Gaussian emissions.
* ``MsarStates`` - Markov-switching AR(1) dynamics.
* ``FlowStates`` - state-wise AR backbone whose innovations pass through a
  sinh-arcsinh flow.

States are indexed from 0 internally; exported tables use 1-based labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Any

import numpy as np
from scipy.special import logsumexp, softmax

from src import diffcore as dc
from src.diffcore import ArrayLike, Tensor
from src.flows import FlowParams, flow_inverse_with_logdet

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class Branch(IntEnum):
    GAUSSIAN = 1
    MSAR = 2
    STATE_FLOW = 3

    @property
    def label(self) -> str:
        return {1: "gaussian-emission", 2: "msar", 3: "state-flow"}[self.value]

    @classmethod
    def parse(cls, value: Any) -> Branch:
        """Accept 1/2/3, their string forms, or the kind names."""
        if isinstance(value, Branch):
            return value
        for branch in cls:
            if value in (branch.value, str(branch.value), branch.label, branch.name.lower()):
                return branch
        raise ValueError(f"unknown branch {value!r}")


@dataclass
class GaussianStates:
    means: Tensor
    log_vars: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"means": self.means, "log_vars": self.log_vars}

    def natural(self) -> dict[str, np.ndarray]:
        return {"means": self.means.value.copy(), "variances": np.exp(self.log_vars.value)}


@dataclass
class MsarStates:
    init_means: Tensor
    init_log_vars: Tensor
    ar_means: Tensor
    ar_coefs: Tensor
    log_innov_vars: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            "init_means": self.init_means,
            "init_log_vars": self.init_log_vars,
            "ar_means": self.ar_means,
            "ar_coefs": self.ar_coefs,
            "log_innov_vars": self.log_innov_vars,
        }

    def natural(self) -> dict[str, np.ndarray]:
        return {
            "init_means": self.init_means.value.copy(),
            "init_variances": np.exp(self.init_log_vars.value),
            "ar_means": self.ar_means.value.copy(),
            "ar_coefs": self.ar_coefs.value.copy(),
            "innov_variances": np.exp(self.log_innov_vars.value),
        }


@dataclass
class FlowStates:
    init_means: Tensor
    init_log_vars: Tensor
    ar_coefs: Tensor
    log_scales: Tensor
    flow: FlowParams  # (L, K)

    def tensors(self) -> dict[str, Tensor]:
        return {
            "init_means": self.init_means,
            "init_log_vars": self.init_log_vars,
            "ar_coefs": self.ar_coefs,
            "log_scales": self.log_scales,
            "flow_skew": self.flow.skew,
            "flow_tail_raw": self.flow.tail_raw,
        }

    def natural(self) -> dict[str, np.ndarray]:
        return {
            "init_means": self.init_means.value.copy(),
            "init_variances": np.exp(self.init_log_vars.value),
            "ar_coefs": self.ar_coefs.value.copy(),
            "scales": np.exp(self.log_scales.value),
            "flow_skew": self.flow.skew.value.copy(),
            "flow_tail": self.flow.tails(),
        }


StatePayload = GaussianStates | MsarStates | FlowStates


@dataclass
class SourcePrior:
    """Prior parameters of a single source; never shares storage with other sources."""

    initial_logits: Tensor
    transition_logits: Tensor
    states: StatePayload

    @property
    def num_states(self) -> int:
        return self.initial_logits.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        named = {"initial_logits": self.initial_logits, "transition_logits": self.transition_logits}
        named.update(self.states.tensors())
        return named

    def snapshot(self) -> dict[str, np.ndarray]:
        """pi, A and the state payload in natural units."""
        snap = {
            "pi": softmax(self.initial_logits.value),
            "A": softmax(self.transition_logits.value, axis=1),
        }
        snap.update(self.states.natural())
        return snap


@dataclass
class HmmPriorParams:
    branch: Branch
    sources: list[SourcePrior]

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def num_states(self) -> int:
        return self.sources[0].num_states

    def tensors(self) -> dict[str, Tensor]:
        return {
            f"prior.{j}.{name}": tensor
            for j, source in enumerate(self.sources)
            for name, tensor in source.tensors().items()
        }

    def snapshot(self) -> list[dict[str, np.ndarray]]:
        return [source.snapshot() for source in self.sources]


def init_prior_params(
    branch: Branch | int,
    num_sources: int,
    num_states: int,
    rng: np.random.Generator,
    num_flow_layers: int = 1,
) -> HmmPriorParams:
    """Initial prior: near-uniform logits with a persistence bias on the diagonal,
    state means spread over [-1, 1], variances at 0.5, AR terms at 0, identity flows."""
    branch = Branch.parse(branch)
    K = num_states
    spread = np.linspace(-1.0, 1.0, K) if K > 1 else np.zeros(1)
    half = np.full(K, np.log(0.5))

    def param(value: ArrayLike) -> Tensor:
        return Tensor(value, requires_grad=True)

    sources = []
    for _ in range(num_sources):
        initial_logits = param(rng.normal(0.0, 0.1, size=K))
        transition_logits = param(rng.normal(0.0, 0.1, size=(K, K)) + 2.0 * np.eye(K))
        if branch is Branch.GAUSSIAN:
            states: StatePayload = GaussianStates(means=param(spread), log_vars=param(half))
        elif branch is Branch.MSAR:
            states = MsarStates(
                init_means=param(spread),
                init_log_vars=param(half),
                ar_means=param(spread),
                ar_coefs=param(np.zeros(K)),
                log_innov_vars=param(half),
            )
        else:
            identity = FlowParams.identity(num_flow_layers, K)
            states = FlowStates(
                init_means=param(spread),
                init_log_vars=param(half),
                ar_coefs=param(np.zeros(K)),
                log_scales=param(0.5 * half),
                flow=FlowParams(
                    skew=param(identity.skew.value), tail_raw=param(identity.tail_raw.value)
                ),
            )
        sources.append(SourcePrior(initial_logits, transition_logits, states))
    return HmmPriorParams(branch=branch, sources=sources)


def _gaussian_log_density(x: Tensor, mean: ArrayLike, log_var: ArrayLike) -> Tensor:
    log_var = dc.as_tensor(log_var)
    return -0.5 * (dc.square(x - mean) * dc.exp(-log_var) + LOG_2PI + log_var)


def _column(trajectory: ArrayLike) -> Tensor:
    trajectory = dc.as_tensor(trajectory)
    if trajectory.ndim != 1 or trajectory.shape[0] < 1:
        raise dc.ShapeError(f"expected a non-empty 1-d trajectory, got {trajectory.shape}")
    return trajectory.reshape(trajectory.shape[0], 1)


def msar_step_scores(prev: ArrayLike, cur: ArrayLike, states: MsarStates) -> Tensor:
    """Log-density of ``cur`` given ``prev`` under every AR state; columns (N, 1) -> (N, K)."""
    eta = states.ar_means + states.ar_coefs * (dc.as_tensor(prev) - states.ar_means)
    return _gaussian_log_density(dc.as_tensor(cur), eta, states.log_innov_vars)


def flow_step_scores(prev: ArrayLike, cur: ArrayLike, states: FlowStates) -> Tensor:
    """Change-of-variables log-density of ``cur`` given ``prev``; (N, 1) -> (N, K)."""
    residual = (dc.as_tensor(cur) - states.ar_coefs * dc.as_tensor(prev)) * dc.exp(-states.log_scales)
    eps, logdet = flow_inverse_with_logdet(states.flow, residual)
    return -0.5 * (dc.square(eps) + LOG_2PI) + logdet - states.log_scales


def local_scores_branch1(trajectory: ArrayLike, states: GaussianStates) -> Tensor:
    s = _column(trajectory)
    return _gaussian_log_density(s, states.means, states.log_vars)


def local_scores_branch2(trajectory: ArrayLike, states: MsarStates) -> Tensor:
    s = _column(trajectory)
    first = _gaussian_log_density(s[0:1], states.init_means, states.init_log_vars)
    if s.shape[0] == 1:
        return first
    return dc.concatenate([first, msar_step_scores(s[:-1], s[1:], states)], axis=0)


def local_scores_branch3(trajectory: ArrayLike, states: FlowStates) -> Tensor:
    s = _column(trajectory)
    first = _gaussian_log_density(s[0:1], states.init_means, states.init_log_vars)
    if s.shape[0] == 1:
        return first
    return dc.concatenate([first, flow_step_scores(s[:-1], s[1:], states)], axis=0)


def local_scores(trajectory: ArrayLike, source: SourcePrior) -> Tensor:
    """T x K state-conditional log-densities of one source trajectory."""
    states = source.states
    if isinstance(states, GaussianStates):
        return local_scores_branch1(trajectory, states)
    if isinstance(states, MsarStates):
        return local_scores_branch2(trajectory, states)
    return local_scores_branch3(trajectory, states)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    """Max-shifted log-sum-exp for the per-step recursions; all -inf slices stay -inf."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _forward_backward_arrays(
    local: np.ndarray, log_pi: np.ndarray, log_A: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log-domain alpha/beta recursions; leading axes of every argument are batch axes."""
    T = local.shape[-2]
    alpha = np.empty_like(local)
    beta = np.zeros_like(local)
    alpha[..., 0, :] = log_pi + local[..., 0, :]
    for t in range(1, T):
        alpha[..., t, :] = local[..., t, :] + _lse(alpha[..., t - 1, :, None] + log_A, axis=-2)
    for t in range(T - 2, -1, -1):
        beta[..., t, :] = _lse(
            log_A + (local[..., t + 1, :] + beta[..., t + 1, :])[..., None, :], axis=-1
        )
    log_evidence = _lse(alpha[..., -1, :], axis=-1)
    return alpha, beta, log_evidence


def _hmm_log_evidence(local: Tensor, log_pi: Tensor, log_A: Tensor) -> Tensor:
    """Marginal log-likelihood with gradients from the smoothed state posteriors."""
    alpha, beta, log_evidence = _forward_backward_arrays(local.value, log_pi.value, log_A.value)
    A = log_A.value

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g = np.asarray(g)
        norm = log_evidence[..., None, None]
        gamma = np.exp(alpha + beta - norm)
        pairs = np.exp(
            alpha[..., :-1, :, None]
            + A[..., None, :, :]
            + (local.value[..., 1:, :] + beta[..., 1:, :])[..., None, :]
            - norm[..., None]
        ).sum(axis=-3)
        scale = g[..., None, None]
        return scale * gamma, scale[..., 0] * gamma[..., 0, :], scale * pairs

    return dc.primitive(log_evidence, (local, log_pi, log_A), vjp)


def forward_log_likelihood(
    local: ArrayLike, initial_logits: ArrayLike, transition_logits: ArrayLike
) -> Tensor:
    """log p(s_{:,j}) by the log-domain forward recursion, summing over all state paths.

    ``local`` is (T, K); a leading batch axis (n, T, K) with matching (n, K) and
    (n, K, K) logits scores n sources at once and returns an (n,) tensor.
    """
    local = dc.as_tensor(local)
    initial_logits = dc.as_tensor(initial_logits)
    transition_logits = dc.as_tensor(transition_logits)
    K = local.shape[-1]
    if initial_logits.shape[-1] != K or transition_logits.shape[-2:] != (K, K):
        raise dc.ShapeError(
            f"scores {local.shape} inconsistent with logits {initial_logits.shape}, "
            f"{transition_logits.shape}"
        )
    log_pi = dc.log_softmax(initial_logits, axis=-1)
    log_A = dc.log_softmax(transition_logits, axis=-1)
    return _hmm_log_evidence(local, log_pi, log_A)


def source_log_likelihoods(S: ArrayLike, params: HmmPriorParams) -> Tensor:
    """Per-source prior log-densities, shape (n,)."""
    S = dc.as_tensor(S)
    if S.ndim != 2 or S.shape[1] != params.num_sources:
        raise dc.ShapeError(f"S has shape {S.shape}, prior covers {params.num_sources} sources")
    scores = dc.stack([local_scores(S[:, j], src) for j, src in enumerate(params.sources)])
    initial = dc.stack([src.initial_logits for src in params.sources])
    transition = dc.stack([src.transition_logits for src in params.sources])
    return forward_log_likelihood(scores, initial, transition)


def total_prior_logp(S: ArrayLike, params: HmmPriorParams) -> Tensor:
    """log p(S) = sum over sources of each source's own HMM log-likelihood."""
    return source_log_likelihoods(S, params).sum()


def _log_probs(local: ArrayLike, initial_logits: ArrayLike, transition_logits: ArrayLike):
    local = np.asarray(local.value if isinstance(local, Tensor) else local, dtype=np.float64)
    initial = initial_logits.value if isinstance(initial_logits, Tensor) else initial_logits
    transition = (
        transition_logits.value if isinstance(transition_logits, Tensor) else transition_logits
    )
    initial = np.asarray(initial, dtype=np.float64)
    transition = np.asarray(transition, dtype=np.float64)
    log_pi = initial - logsumexp(initial)
    log_A = transition - logsumexp(transition, axis=1, keepdims=True)
    return local, log_pi, log_A


def viterbi(
    local: ArrayLike, initial_logits: ArrayLike, transition_logits: ArrayLike
) -> np.ndarray:
    """Most probable state path (0-based); ties resolve to the lower state index."""
    local, log_pi, log_A = _log_probs(local, initial_logits, transition_logits)
    T, K = local.shape
    delta = log_pi + local[0]
    backpointers = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        candidates = delta[:, None] + log_A
        backpointers[t] = np.argmax(candidates, axis=0)
        delta = candidates[backpointers[t], np.arange(K)] + local[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = backpointers[t, path[t]]
    return path


def path_log_score(
    path: ArrayLike, local: ArrayLike, initial_logits: ArrayLike, transition_logits: ArrayLike
) -> float:
    """Joint log-probability of one state path and the trajectory."""
    local, log_pi, log_A = _log_probs(local, initial_logits, transition_logits)
    path = np.asarray(path, dtype=np.int64)
    score = log_pi[path[0]] + local[np.arange(len(path)), path].sum()
    return float(score + log_A[path[:-1], path[1:]].sum())


def forward_backward(
    local: ArrayLike, initial_logits: ArrayLike, transition_logits: ArrayLike
) -> np.ndarray:
    """T x K posterior state marginals p(c_t = k | s_{:,j})."""
    local, log_pi, log_A = _log_probs(local, initial_logits, transition_logits)
    alpha, beta, log_evidence = _forward_backward_arrays(local, log_pi, log_A)
    marginals = np.exp(alpha + beta - log_evidence)
    return marginals / marginals.sum(axis=1, keepdims=True)


def decode_states(S: ArrayLike, params: HmmPriorParams, method: str = "viterbi") -> np.ndarray:
    """Hard state paths (T, n) for every source, by Viterbi or posterior mode."""
    S = np.asarray(S.value if isinstance(S, Tensor) else S, dtype=np.float64)
    columns = []
    for j, source in enumerate(params.sources):
        local = local_scores(S[:, j], source).value
        if method == "viterbi":
            path = viterbi(local, source.initial_logits, source.transition_logits)
        elif method == "posterior":
            path = np.argmax(
                forward_backward(local, source.initial_logits, source.transition_logits), axis=1
            )
        else:
            raise ValueError(f"unknown decoding method {method!r}")
        columns.append(path)
    return np.stack(columns, axis=1)
