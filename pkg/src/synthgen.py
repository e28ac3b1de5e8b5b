"""Synthetic regime-switching sources, mixing maps and training episodes."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import svdvals

from src.flows import FlowParams, flow_forward
from src.hmmprior import Branch
from src.settings import (
    DEFAULT_MIXING_MATRIX,
    DEFAULT_NOISE_STD,
    DEFAULT_NUM_SOURCES,
    DEFAULT_NUM_STATES,
    DEFAULT_SEED,
    DEFAULT_SELF_TRANSITION,
    DEFAULT_T,
    MLP_MIXING_HIDDEN,
)

logger = logging.getLogger(__name__)


class SpecError(ValueError):
    """A source or mixing specification violates its invariants."""


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based Philox generator, reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class SourceSpec:
    """Ground-truth regime-switching source.

    Field use per branch:
      - gaussian-emission: ``means`` (m_k), ``variances`` (v_k)
      - msar: ``init_means``, ``init_variances``, ``means`` (AR means mu_k),
        ``ar_coefs`` (phi_k), ``variances`` (innovation variances sigma_k^2)
      - state-flow: ``init_means``, ``init_variances``, ``ar_coefs`` (a_k),
        ``scales`` (rho_k), ``flow_skew`` / ``flow_tail`` of shape (L, K)
    """

    branch: Branch
    initial: np.ndarray
    transition: np.ndarray
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    init_means: np.ndarray | None = None
    init_variances: np.ndarray | None = None
    ar_coefs: np.ndarray | None = None
    scales: np.ndarray | None = None
    flow_skew: np.ndarray | None = None
    flow_tail: np.ndarray | None = None

    @property
    def num_states(self) -> int:
        return len(self.initial)

    def required_fields(self) -> tuple[str, ...]:
        if self.branch is Branch.GAUSSIAN:
            return ("means", "variances")
        if self.branch is Branch.MSAR:
            return ("init_means", "init_variances", "means", "ar_coefs", "variances")
        return ("init_means", "init_variances", "ar_coefs", "scales", "flow_skew", "flow_tail")

    def validate(self) -> None:
        errors = []
        K = self.num_states
        initial = np.asarray(self.initial, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        if K < 1:
            errors.append("at least one state is required")
        if np.any(initial < 0) or abs(initial.sum() - 1.0) > 1e-12:
            errors.append("initial distribution must be a probability vector")
        if transition.shape != (K, K):
            errors.append(f"transition matrix must be {K}x{K}, got {transition.shape}")
        elif np.any(transition < 0) or np.any(np.abs(transition.sum(axis=1) - 1.0) > 1e-12):
            errors.append("transition rows must be non-negative and sum to 1")

        for name in self.required_fields():
            value = getattr(self, name)
            if value is None:
                errors.append(f"{self.branch.label} source needs {name}")
                continue
            value = np.asarray(value)
            if name.startswith("flow_"):
                if value.ndim != 2 or value.shape[1] != K or value.shape[0] < 1:
                    errors.append(f"{name} must have shape (L, {K})")
            elif value.shape != (K,):
                errors.append(f"{name} must have length {K}")
        if not errors:
            for name in ("variances", "init_variances", "scales", "flow_tail"):
                if name in self.required_fields() and np.any(np.asarray(getattr(self, name)) <= 0):
                    errors.append(f"{name} must be strictly positive")
            if "ar_coefs" in self.required_fields() and np.any(np.abs(self.ar_coefs) >= 1):
                errors.append("AR coefficients must lie strictly inside (-1, 1)")

        if errors:
            raise SpecError("Invalid source spec:\n" + "\n".join(f"- {e}" for e in errors))

    def flow(self, states: np.ndarray) -> FlowParams:
        """Flow parameters gathered per time step for the given state sequence."""
        return FlowParams.from_natural(self.flow_skew[:, states], self.flow_tail[:, states])


@dataclass
class MixingSpec:
    """Ground-truth mixing map g: linear matrix (m x n) or a frozen one-hidden-layer tanh MLP."""

    kind: str
    num_sources: int
    num_observations: int
    noise_std: float = DEFAULT_NOISE_STD
    matrix: np.ndarray | None = None
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def linear(cls, matrix: np.ndarray, noise_std: float = DEFAULT_NOISE_STD) -> MixingSpec:
        matrix = np.asarray(matrix, dtype=np.float64)
        spec = cls("linear", matrix.shape[1], matrix.shape[0], noise_std, matrix=matrix)
        spec.validate()
        return spec

    @classmethod
    def mlp(
        cls,
        num_sources: int,
        num_observations: int,
        rng: np.random.Generator,
        noise_std: float = DEFAULT_NOISE_STD,
        hidden: int = MLP_MIXING_HIDDEN,
    ) -> MixingSpec:
        weights = {
            "W1": rng.normal(0.0, 1.0 / np.sqrt(num_sources), size=(num_sources, hidden)),
            "b1": rng.normal(0.0, 0.1, size=hidden),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, num_observations)),
            "b2": np.zeros(num_observations),
        }
        spec = cls("mlp", num_sources, num_observations, noise_std, weights=weights)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.noise_std < 0:
            raise SpecError("noise_std must be non-negative")
        if self.num_observations < self.num_sources:
            raise SpecError("underdetermined mixing (m < n) is not supported")
        if self.kind == "linear":
            if self.matrix is None or self.matrix.shape != (self.num_observations, self.num_sources):
                raise SpecError("linear mixing needs an m x n matrix")
            smallest = float(svdvals(self.matrix).min())
            if smallest <= 1e-6:
                raise SpecError(f"mixing matrix is rank deficient (sigma_min={smallest:.3g})")
        elif self.kind == "mlp":
            missing = {"W1", "b1", "W2", "b2"} - set(self.weights)
            if missing:
                raise SpecError(f"mlp mixing is missing weights {sorted(missing)}")
        else:
            raise SpecError(f"unknown mixing kind {self.kind!r}")

    def apply(self, sources: np.ndarray) -> np.ndarray:
        """Noise-free g(S) row by row."""
        if sources.ndim != 2 or sources.shape[1] != self.num_sources:
            raise SpecError(f"expected T x {self.num_sources} sources, got {sources.shape}")
        if self.kind == "linear":
            return sources @ self.matrix.T
        w = self.weights
        return np.tanh(sources @ w["W1"] + w["b1"]) @ w["W2"] + w["b2"]


@dataclass
class EpisodeData:
    T: int
    sources: np.ndarray  # (T, n)
    states: np.ndarray  # (T, n), 0-based
    observations: np.ndarray  # (T, m)
    source_specs: list[SourceSpec]
    mixing: MixingSpec
    seed: int

    @property
    def num_sources(self) -> int:
        return self.sources.shape[1]

    @property
    def num_states(self) -> int:
        """Largest generator K across sources."""
        return max(spec.num_states for spec in self.source_specs)

    def fingerprint(self) -> str:
        """SHA-256 over the episode arrays."""
        digest = hashlib.sha256()
        for array in (self.sources, self.states, self.observations):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


def sample_state_path(spec: SourceSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    """Markov chain path c_1 ~ pi, c_t | c_{t-1} ~ A[c_{t-1}] (0-based labels)."""
    if T < 1:
        raise SpecError("T must be at least 1")
    K = spec.num_states
    initial_cdf = np.cumsum(spec.initial)
    transition_cdf = np.cumsum(spec.transition, axis=1)
    draws = rng.random(T)
    path = np.empty(T, dtype=np.int64)
    path[0] = min(int(np.searchsorted(initial_cdf, draws[0], side="right")), K - 1)
    for t in range(1, T):
        row = transition_cdf[path[t - 1]]
        path[t] = min(int(np.searchsorted(row, draws[t], side="right")), K - 1)
    return path


def sample_source(spec: SourceSpec, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one trajectory given its state path."""
    states = np.asarray(states, dtype=np.int64)
    if np.any(states < 0) or np.any(states >= spec.num_states):
        raise SpecError("state path has labels outside the spec's state range")
    T = len(states)
    noise = rng.standard_normal(T)

    if spec.branch is Branch.GAUSSIAN:
        return spec.means[states] + np.sqrt(spec.variances[states]) * noise

    s = np.empty(T)
    c0 = states[0]
    s[0] = spec.init_means[c0] + np.sqrt(spec.init_variances[c0]) * noise[0]
    if spec.branch is Branch.MSAR:
        mu, phi = spec.means[states], spec.ar_coefs[states]
        innov = np.sqrt(spec.variances[states]) * noise
        for t in range(1, T):
            s[t] = mu[t] + phi[t] * (s[t - 1] - mu[t]) + innov[t]
        return s

    shaped = flow_forward(spec.flow(states), noise).value
    innov = spec.scales[states] * shaped
    a = spec.ar_coefs[states]
    for t in range(1, T):
        s[t] = a[t] * s[t - 1] + innov[t]
    return s


def mix(spec: MixingSpec, sources: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Observations y_t = g(s_t) + N(0, noise_std^2) per coordinate."""
    clean = spec.apply(np.asarray(sources, dtype=np.float64))
    return clean + spec.noise_std * rng.standard_normal(clean.shape)


def make_episode(
    source_specs: list[SourceSpec], mixing: MixingSpec, T: int, seed: int
) -> EpisodeData:
    """Deterministic episode: one generator stream per source plus one for the mixing noise."""
    if len(source_specs) != mixing.num_sources:
        raise SpecError(
            f"{len(source_specs)} source specs for a mixing map over {mixing.num_sources} sources"
        )
    for spec in source_specs:
        spec.validate()
    mixing.validate()

    streams = np.random.SeedSequence(seed).spawn(len(source_specs) + 1)
    states, sources = [], []
    for spec, stream in zip(source_specs, streams[:-1], strict=True):
        rng = make_rng(stream)
        path = sample_state_path(spec, T, rng)
        states.append(path)
        sources.append(sample_source(spec, path, rng))

    S = np.stack(sources, axis=1)
    Y = mix(mixing, S, make_rng(streams[-1]))
    logger.info(
        f"Generated episode: T={T}, n={S.shape[1]}, m={Y.shape[1]}, mixing={mixing.kind}, seed={seed}"
    )
    return EpisodeData(
        T=T,
        sources=S,
        states=np.stack(states, axis=1),
        observations=Y,
        source_specs=list(source_specs),
        mixing=mixing,
        seed=seed,
    )


def _sticky(K: int, self_transition: float) -> tuple[np.ndarray, np.ndarray]:
    initial = np.full(K, 1.0 / K)
    if K == 1:
        return initial, np.ones((1, 1))
    off = (1.0 - self_transition) / (K - 1)
    transition = np.full((K, K), off)
    np.fill_diagonal(transition, self_transition)
    return initial, transition


def default_source_specs(
    branch: Branch | int | str,
    num_sources: int = DEFAULT_NUM_SOURCES,
    num_states: int = DEFAULT_NUM_STATES,
    self_transition: float = DEFAULT_SELF_TRANSITION,
) -> list[SourceSpec]:
    """Sticky sources whose regimes differ from source to source.

    Regime parameters are laid out over states and offset per source so no two sources
    share a marginal law. Flow sources use one sinh-arcsinh layer per state with skew in
    {-0.5, 0.5} and tail weight in {0.7, 1.4}.
    """
    branch = Branch.parse(branch)
    K = num_states
    grid = np.linspace(0.0, 1.0, K) if K > 1 else np.zeros(1)
    specs = []
    for j in range(num_sources):
        initial, transition = _sticky(K, self_transition)
        order = grid if j % 2 == 0 else grid[::-1]
        shift = 0.5 * j / max(num_sources, 1)
        if branch is Branch.GAUSSIAN:
            spec = SourceSpec(
                branch,
                initial,
                transition,
                means=2.0 * order - 1.0 + shift,
                variances=0.02 + 0.1 * order,
            )
        elif branch is Branch.MSAR:
            spec = SourceSpec(
                branch,
                initial,
                transition,
                init_means=np.zeros(K),
                init_variances=np.ones(K),
                means=order - 0.5 + shift,
                ar_coefs=0.9 - 1.5 * order,
                variances=0.05 + 0.15 * order,
            )
        else:
            spec = SourceSpec(
                branch,
                initial,
                transition,
                init_means=np.zeros(K),
                init_variances=np.ones(K),
                ar_coefs=0.5 - 0.8 * order,
                scales=0.3 + 0.3 * order,
                flow_skew=(order - 0.5)[None, :],
                flow_tail=(0.7 + 0.7 * order)[None, :],
            )
        spec.validate()
        specs.append(spec)
    return specs


def default_episode(
    branch: Branch | int | str = Branch.GAUSSIAN,
    T: int = DEFAULT_T,
    seed: int = DEFAULT_SEED,
) -> EpisodeData:
    """Two sticky two-state sources under the default linear mixing."""
    mixing = MixingSpec.linear(np.array(DEFAULT_MIXING_MATRIX))
    return make_episode(default_source_specs(branch), mixing, T, seed)
