"""SAHMM-VAE: encoder, decoder, reparameterised posterior, loss and the joint training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from src import diffcore as dc
from src.diffcore import ArrayLike, Tensor
from src.evaluation import match_sources
from src.hmmprior import (
    Branch,
    HmmPriorParams,
    decode_states,
    init_prior_params,
    total_prior_logp,
)
from src.optimiser import Adam, AdamState
from src.settings import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BETA,
    DECODER_HIDDEN_LINEAR,
    DECODER_HIDDEN_MLP,
    DEFAULT_NUM_STATES,
    ENCODER_HIDDEN,
    EPOCHS,
    LEARNING_RATE,
    LOG_EVERY,
    NUM_FLOW_LAYERS,
    POSTERIOR_LOG_VAR_INIT,
    WARMUP_FRACTION,
    ModelConfig,
)
from src.synthgen import EpisodeData, make_rng

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; carries the state needed to diagnose it."""

    def __init__(
        self,
        epoch: int,
        components: LossComponents,
        report: TrainReport,
        dump: dict[str, Any],
    ) -> None:
        super().__init__(f"non-finite loss at epoch {epoch}: {components}")
        self.epoch = epoch
        self.components = components
        self.report = report
        self.dump = dump


@dataclass
class Mlp:
    """Feed-forward map with tanh between layers and a linear output layer."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> Mlp:
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:], strict=True):
            weights.append(
                Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), True)
            )
            biases.append(Tensor(np.zeros(fan_out), True))
        return cls(weights, biases)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases, strict=True)):
            x = x @ weight + bias
            if i < last:
                x = dc.tanh(x)
        return x

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases, strict=True)):
            named[f"{prefix}.{i}.weight"] = weight
            named[f"{prefix}.{i}.bias"] = bias
        return named


class EncoderParams(Mlp):
    """y_t (m) -> posterior mean mu_t (n)."""


class DecoderParams(Mlp):
    """s_t (n) -> reconstruction y_hat_t (m)."""


@dataclass
class PosteriorParams:
    """Free per-source log-variances, shared across time."""

    log_vars: Tensor

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.log_vars.value)

    def tensors(self) -> dict[str, Tensor]:
        return {"posterior.log_vars": self.log_vars}


@dataclass
class SahmmVaeParams:
    encoder: EncoderParams
    decoder: DecoderParams
    posterior: PosteriorParams
    prior: HmmPriorParams

    def tensors(self) -> dict[str, Tensor]:
        named = self.encoder.tensors("encoder")
        named.update(self.decoder.tensors("decoder"))
        named.update(self.posterior.tensors())
        named.update(self.prior.tensors())
        return named


@dataclass
class TrainConfig:
    branch: Branch = Branch.GAUSSIAN
    num_states: int = DEFAULT_NUM_STATES
    beta: float = BETA
    learning_rate: float = LEARNING_RATE
    epochs: int = EPOCHS
    seed: int = 0
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_epsilon: float = ADAM_EPSILON
    encoder_hidden: tuple[int, ...] = ENCODER_HIDDEN
    decoder_hidden: tuple[int, ...] = DECODER_HIDDEN_LINEAR
    warmup_fraction: float = WARMUP_FRACTION
    log_every: int = LOG_EVERY
    num_flow_layers: int = NUM_FLOW_LAYERS

    def __post_init__(self) -> None:
        self.branch = Branch.parse(self.branch)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.num_states < 1:
            raise ValueError("num_states must be at least 1")

    @classmethod
    def from_model_config(
        cls, model: ModelConfig, mixing_kind: str = "linear", episode_num_states: int | None = None
    ) -> TrainConfig:
        """Build from the config section; an unset K falls back to the episode's K."""
        decoder_hidden = model.decoder_hidden
        if decoder_hidden is None:
            decoder_hidden = DECODER_HIDDEN_MLP if mixing_kind == "mlp" else DECODER_HIDDEN_LINEAR
        return cls(
            branch=Branch.parse(model.branch),
            num_states=model.num_states or episode_num_states or DEFAULT_NUM_STATES,
            beta=model.beta,
            learning_rate=model.learning_rate,
            epochs=model.epochs,
            seed=model.seed,
            encoder_hidden=tuple(model.encoder_hidden),
            decoder_hidden=tuple(decoder_hidden),
            warmup_fraction=model.warmup_fraction,
            log_every=model.log_every,
            num_flow_layers=model.num_flow_layers,
        )

    def beta_at(self, epoch: int) -> float:
        """Linear warm-up from (near) zero over the first ``warmup_fraction`` of epochs."""
        warmup_epochs = int(round(self.warmup_fraction * self.epochs))
        if warmup_epochs <= 0:
            return self.beta
        return self.beta * min(1.0, (epoch + 1) / warmup_epochs)


@dataclass
class LossComponents:
    total: float
    rec: float
    logq: float
    logp: float
    beta: float


@dataclass
class EpochRecord:
    epoch: int
    components: LossComponents
    correlations: np.ndarray | None
    posterior_variances: np.ndarray
    prior_snapshot: list[dict[str, np.ndarray]]


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def init_params(
    config: TrainConfig, num_observations: int, num_sources: int, rng: np.random.Generator
) -> SahmmVaeParams:
    encoder = Mlp.init([num_observations, *config.encoder_hidden, num_sources], rng)
    decoder = Mlp.init([num_sources, *config.decoder_hidden, num_observations], rng)
    return SahmmVaeParams(
        encoder=EncoderParams(encoder.weights, encoder.biases),
        decoder=DecoderParams(decoder.weights, decoder.biases),
        posterior=PosteriorParams(Tensor(np.full(num_sources, POSTERIOR_LOG_VAR_INIT), True)),
        prior=init_prior_params(
            config.branch, num_sources, config.num_states, rng, config.num_flow_layers
        ),
    )


def encode(encoder: Mlp, Y: ArrayLike) -> Tensor:
    """Posterior means mu_t = f(y_t), row by row."""
    Y = dc.as_tensor(Y)
    if Y.ndim != 2 or Y.shape[1] != encoder.in_features:
        raise dc.ShapeError(f"encoder expects T x {encoder.in_features} input, got {Y.shape}")
    return encoder(Y)


def sample_latents(
    mu: Tensor,
    posterior: PosteriorParams,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Reparameterised draw s = mu + sigma * eps; returns the sample and the constant eps."""
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.standard_normal(mu.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape:
        raise dc.ShapeError(f"noise {noise.shape} does not match means {mu.shape}")
    sigma = dc.exp(0.5 * posterior.log_vars)
    return mu + sigma * noise, noise


def reconstruction_loss(Y: ArrayLike, Y_hat: ArrayLike) -> Tensor:
    """Sum over t of the squared reconstruction error."""
    Y, Y_hat = dc.as_tensor(Y), dc.as_tensor(Y_hat)
    if Y.shape != Y_hat.shape:
        raise dc.ShapeError(f"reconstruction {Y_hat.shape} does not match data {Y.shape}")
    return dc.square(Y_hat - Y).sum()


def posterior_logq(S: Tensor, mu: Tensor, posterior: PosteriorParams) -> Tensor:
    """log q(S | Y) under the factorised Gaussian posterior."""
    log_vars = posterior.log_vars
    terms = -0.5 * LOG_2PI - 0.5 * log_vars - 0.5 * dc.square(S - mu) * dc.exp(-log_vars)
    return terms.sum()


def total_loss(
    Y: ArrayLike,
    params: SahmmVaeParams,
    beta: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, LossComponents]:
    """Single-sample objective L_rec + beta * (log q - log p)."""
    mu = encode(params.encoder, Y)
    S, _ = sample_latents(mu, params.posterior, rng=rng, noise=noise)
    rec = reconstruction_loss(Y, params.decoder(S))
    logq = posterior_logq(S, mu, params.posterior)
    logp = total_prior_logp(S, params.prior)
    loss = rec + beta * (logq - logp)
    components = LossComponents(
        total=loss.item(), rec=rec.item(), logq=logq.item(), logp=logp.item(), beta=beta
    )
    return loss, components


class SahmmVae:
    """Trainable model bundling parameters, optimiser state and the sampling stream."""

    def __init__(self, config: TrainConfig, num_observations: int, num_sources: int) -> None:
        self.config = config
        init_stream, noise_stream = np.random.SeedSequence(config.seed).spawn(2)
        self.params = init_params(config, num_observations, num_sources, make_rng(init_stream))
        self.noise_rng = make_rng(noise_stream)
        self.optimizer = Adam(
            lr=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            epsilon=config.adam_epsilon,
        )
        self.epoch = 0
        self.report = TrainReport()

    def step(self, Y: np.ndarray) -> LossComponents:
        """One full-sequence gradient step."""
        tensors = self.params.tensors()
        self.optimizer.zero_grad(tensors)
        beta = self.config.beta_at(self.epoch)
        with dc.recording():
            loss, components = total_loss(Y, self.params, beta, rng=self.noise_rng)
            if not np.isfinite(components.total):
                return components
            dc.backward(loss)
        self.optimizer.step(tensors)
        return components

    def _should_log(self, epoch: int, last_epoch: int) -> bool:
        return epoch % self.config.log_every == 0 or epoch == last_epoch

    def _record(self, episode: EpisodeData, components: LossComponents) -> EpochRecord:
        correlations = None
        mu = self.posterior_means(episode.observations)
        try:
            correlations = match_sources(mu, episode.sources).correlations
        except ValueError as e:
            logger.warning(f"Epoch {self.epoch}: correlations unavailable ({e})")
        record = EpochRecord(
            epoch=self.epoch,
            components=components,
            correlations=correlations,
            posterior_variances=self.params.posterior.variances,
            prior_snapshot=self.params.prior.snapshot(),
        )
        corr_text = "n/a" if correlations is None else np.array2string(correlations, precision=4)
        logger.info(
            f"Epoch {self.epoch}: total={components.total:.4f} rec={components.rec:.4f} "
            f"logq={components.logq:.4f} logp={components.logp:.4f} "
            f"beta={components.beta:.4f} |corr|={corr_text}"
        )
        return record

    def fit(self, episode: EpisodeData, epochs: int | None = None) -> TrainReport:
        """
        Run gradient steps until ``epochs`` total epochs have been trained.

        Args:
            episode: Observations plus the ground truth used for correlation logging
            epochs: Target epoch count (default: config.epochs); training resumes from
                ``self.epoch``

        Returns:
            The TrainReport accumulated so far

        Raises:
            TrainingDiverged: If the loss becomes non-finite
        """
        epochs = self.config.epochs if epochs is None else epochs
        Y = episode.observations
        last_epoch = epochs - 1
        while self.epoch < epochs:
            components = self.step(Y)
            if not np.isfinite(components.total):
                dump = {name: t.value.tolist() for name, t in self.params.tensors().items()}
                logger.error(
                    f"Training diverged at epoch {self.epoch}: {components}; "
                    f"posterior variances {self.params.posterior.variances}"
                )
                raise TrainingDiverged(self.epoch, components, self.report, dump)
            self.report.epoch_losses.append(components.total)
            if self._should_log(self.epoch, last_epoch):
                self.report.records.append(self._record(episode, components))
            self.epoch += 1
        return self.report

    def posterior_means(self, Y: np.ndarray) -> np.ndarray:
        return encode(self.params.encoder, Y).value

    def decode_states(self, Y: np.ndarray, method: str = "viterbi") -> np.ndarray:
        """Hard state paths of the posterior-mean trajectories under each source prior."""
        return decode_states(self.posterior_means(Y), self.params.prior, method=method)

    def state_dict(self) -> dict[str, Any]:
        state = self.optimizer.state
        return {
            "epoch": self.epoch,
            "params": {name: t.value.copy() for name, t in self.params.tensors().items()},
            "adam": {"step": state.step, "m": dict(state.m), "v": dict(state.v)},
            "noise_rng": self.noise_rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        tensors = self.params.tensors()
        missing = set(tensors) - set(state["params"])
        if missing:
            raise ValueError(f"checkpoint is missing parameters {sorted(missing)}")
        for name, tensor in tensors.items():
            tensor.value[...] = np.asarray(state["params"][name], dtype=np.float64)
        adam = state["adam"]
        self.optimizer.state = AdamState(
            step=int(adam["step"]),
            m={k: np.asarray(v, dtype=np.float64) for k, v in adam["m"].items()},
            v={k: np.asarray(v, dtype=np.float64) for k, v in adam["v"].items()},
        )
        self.noise_rng.bit_generator.state = state["noise_rng"]
        self.epoch = int(state["epoch"])


def train(episode: EpisodeData, config: TrainConfig) -> tuple[SahmmVaeParams, TrainReport]:
    """Train a fresh model on ``episode`` for ``config.epochs`` epochs."""
    model = SahmmVae(config, episode.observations.shape[1], episode.num_sources)
    logger.info(
        f"Training branch {config.branch.value} ({config.branch.label}), K={config.num_states}, "
        f"epochs={config.epochs}, beta={config.beta}, lr={config.learning_rate}"
    )
    report = model.fit(episode)
    return model.params, report
