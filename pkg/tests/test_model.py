"""Tests for the SAHMM-VAE model and training loop."""

from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from src import diffcore as dc
from src.diffcore import Tensor
from src.hmmprior import Branch
from src.model import (
    EncoderParams,
    LossComponents,
    PosteriorParams,
    SahmmVae,
    TrainConfig,
    TrainingDiverged,
    encode,
    init_params,
    posterior_logq,
    reconstruction_loss,
    sample_latents,
    total_loss,
    train,
)
from src.processor import evaluate_run
from src.settings import POSTERIOR_LOG_VAR_INIT, ModelConfig
from src.synthgen import EpisodeData, default_episode, make_rng
from tests.helpers import numeric_gradient, relative_error

LOG_2PI = np.log(2.0 * np.pi)


def _small_config(**overrides) -> TrainConfig:
    fields = {
        "branch": Branch.GAUSSIAN,
        "num_states": 2,
        "epochs": 3,
        "seed": 1,
        "encoder_hidden": (4,),
        "decoder_hidden": (),
        "log_every": 1,
        "learning_rate": 1e-2,
    }
    fields.update(overrides)
    return TrainConfig(**fields)


class TestEncoder:
    """Test the posterior-mean network."""

    def test_zero_network(self) -> None:
        """Zero weights and biases give all-zero means."""
        encoder = EncoderParams([Tensor(np.zeros((2, 3)))], [Tensor(np.zeros(3))])
        mu = encode(encoder, np.random.default_rng(0).normal(size=(5, 2)))
        assert np.array_equal(mu.value, np.zeros((5, 3)))

    def test_identity_affine(self) -> None:
        """An identity affine encoder returns the observations."""
        Y = np.random.default_rng(1).normal(size=(6, 2))
        encoder = EncoderParams([Tensor(np.eye(2))], [Tensor(np.zeros(2))])
        assert np.allclose(encode(encoder, Y).value, Y)

    def test_first_layer_gradient(self) -> None:
        """d sum(mu) / d W1 agrees with central differences."""
        config = _small_config(encoder_hidden=(5,))
        params = init_params(config, 3, 2, make_rng(2))
        Y = np.random.default_rng(3).normal(size=(7, 3))
        weight = params.encoder.weights[0]
        with dc.recording():
            dc.backward(encode(params.encoder, Y).sum())
        numeric = numeric_gradient(lambda: encode(params.encoder, Y).value.sum(), weight.value)
        assert relative_error(weight.grad, numeric) < 1e-5

    def test_input_width(self) -> None:
        """Observations of the wrong width are rejected."""
        encoder = EncoderParams([Tensor(np.eye(2))], [Tensor(np.zeros(2))])
        with pytest.raises(dc.ShapeError):
            encode(encoder, np.zeros((4, 3)))


class TestSampleLatents:
    """Test the reparameterised posterior draw."""

    def test_vanishing_variance(self) -> None:
        """log sigma^2 = -40 returns the means."""
        mu = Tensor(np.random.default_rng(4).normal(size=(10, 2)))
        S, _ = sample_latents(mu, PosteriorParams(Tensor(np.full(2, -40.0))), rng=make_rng(5))
        assert np.allclose(S.value, mu.value, atol=1e-8)

    def test_unit_variance(self) -> None:
        """Zero means with unit variance give unit empirical std."""
        mu = Tensor(np.zeros((50_000, 2)))
        S, _ = sample_latents(mu, PosteriorParams(Tensor(np.zeros(2))), rng=make_rng(6))
        assert abs(S.value.std() - 1.0) < 0.02

    def test_replayed_noise_is_affine(self) -> None:
        """With fixed noise, S = mu + sigma * eps and log-variance gradients check out."""
        noise = np.random.default_rng(7).normal(size=(4, 2))
        mu = Tensor(np.random.default_rng(8).normal(size=(4, 2)))
        log_vars = np.array([0.3, -0.5])
        posterior = PosteriorParams(Tensor(log_vars, requires_grad=True))
        with dc.recording():
            S, _ = sample_latents(mu, posterior, noise=noise)
            dc.backward(dc.square(S).sum())
        assert np.allclose(S.value, mu.value + np.exp(0.5 * log_vars) * noise)

        def value() -> float:
            return float(np.square(mu.value + np.exp(0.5 * log_vars) * noise).sum())

        assert relative_error(posterior.log_vars.grad, numeric_gradient(value, log_vars)) < 1e-6

    def test_requires_rng_or_noise(self) -> None:
        """Either a generator or explicit noise is needed."""
        with pytest.raises(ValueError):
            sample_latents(Tensor(np.zeros((2, 1))), PosteriorParams(Tensor(np.zeros(1))))


class TestLossTerms:
    """Test the reconstruction and posterior terms."""

    def test_perfect_reconstruction(self) -> None:
        """Y_hat = Y costs nothing."""
        Y = np.ones((3, 2))
        assert reconstruction_loss(Y, Y).item() == 0.0

    def test_unit_difference(self) -> None:
        """A unit error in one coordinate costs 1."""
        Y = np.zeros((3, 2))
        Y_hat = Y.copy()
        Y_hat[1, 0] = 1.0
        assert reconstruction_loss(Y, Y_hat).item() == 1.0

    def test_matches_double_loop(self) -> None:
        """A random 3x2 pair matches the naive sum of squares."""
        rng = np.random.default_rng(9)
        Y, Y_hat = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        expected = sum((Y_hat[t, i] - Y[t, i]) ** 2 for t in range(3) for i in range(2))
        assert abs(reconstruction_loss(Y, Y_hat).item() - expected) < 1e-12

    def test_reconstruction_shape_mismatch(self) -> None:
        """Mismatched shapes are rejected."""
        with pytest.raises(dc.ShapeError):
            reconstruction_loss(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_logq_unit_variance(self) -> None:
        """S = mu with unit variance gives -log(2 pi)/2."""
        value = posterior_logq(Tensor([[0.4]]), Tensor([[0.4]]), PosteriorParams(Tensor([0.0])))
        assert abs(value.item() + 0.5 * LOG_2PI) < 1e-12

    def test_logq_unit_density(self) -> None:
        """S = mu with variance 1/(2 pi) gives 0."""
        posterior = PosteriorParams(Tensor([-LOG_2PI]))
        assert abs(posterior_logq(Tensor([[1.0]]), Tensor([[1.0]]), posterior).item()) < 1e-12

    def test_logq_is_additive_in_time(self) -> None:
        """Doubling T with identical rows doubles log q."""
        posterior = PosteriorParams(Tensor([0.2, -0.1]))
        S, mu = np.array([[0.3, -1.0]]), np.array([[0.0, 0.5]])
        once = posterior_logq(Tensor(S), Tensor(mu), posterior).item()
        twice = posterior_logq(Tensor(np.vstack([S, S])), Tensor(np.vstack([mu, mu])), posterior)
        assert abs(twice.item() - 2.0 * once) < 1e-12


class TestTotalLoss:
    """Test the full objective."""

    def setup_method(self) -> None:
        self.episode = default_episode(Branch.STATE_FLOW, T=8, seed=3)
        self.Y = self.episode.observations
        self.noise = np.random.default_rng(10).normal(size=(8, 2))

    def test_beta_zero_is_reconstruction(self) -> None:
        """With beta = 0 the loss is the reconstruction term."""
        params = init_params(_small_config(), 2, 2, make_rng(11))
        loss, components = total_loss(self.Y, params, 0.0, noise=self.noise)
        assert loss.item() == components.rec

    @pytest.mark.parametrize("branch", list(Branch))
    def test_beta_zero_gives_prior_no_gradient(self, branch: Branch) -> None:
        """With beta = 0 every prior parameter receives exactly zero gradient."""
        params = init_params(_small_config(branch=branch), 2, 2, make_rng(17))
        with dc.recording():
            loss, _ = total_loss(self.Y, params, 0.0, noise=self.noise)
            dc.backward(loss)
        for name, tensor in params.prior.tensors().items():
            assert tensor.grad is None or np.all(tensor.grad == 0.0), name
        assert np.any(params.encoder.weights[0].grad != 0.0)

    def test_decomposition(self) -> None:
        """total = rec + beta (logq - logp)."""
        params = init_params(_small_config(), 2, 2, make_rng(12))
        _, c = total_loss(self.Y, params, 0.3, noise=self.noise)
        assert abs(c.total - (c.rec + 0.3 * (c.logq - c.logp))) < 1e-9

    def test_deterministic(self) -> None:
        """Identical seeds and parameters give identical losses."""
        losses = []
        for _ in range(2):
            params = init_params(_small_config(), 2, 2, make_rng(13))
            losses.append(total_loss(self.Y, params, 0.1, make_rng(14))[1])
        assert losses[0] == losses[1]

    @pytest.mark.parametrize("branch", list(Branch))
    def test_gradients_match_finite_differences(self, branch: Branch) -> None:
        """Every parameter group passes a central-difference check."""
        config = _small_config(branch=branch, encoder_hidden=(3,), decoder_hidden=(3,))
        params = init_params(config, 2, 2, make_rng(15))
        rng = np.random.default_rng(16)
        for tensor in params.prior.tensors().values():
            tensor.value[...] += 0.1 * rng.normal(size=tensor.shape)

        with dc.recording():
            loss, _ = total_loss(self.Y, params, 0.5, noise=self.noise)
            dc.backward(loss)

        def value() -> float:
            return total_loss(self.Y, params, 0.5, noise=self.noise)[0].item()

        for name, tensor in params.tensors().items():
            analytic = tensor.grad.copy()
            numeric = numeric_gradient(value, tensor.value, step=1e-5)
            assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6), name


class TestTrainConfig:
    """Test training configuration."""

    def test_rejects_non_positive_beta(self) -> None:
        """beta must be positive."""
        with pytest.raises(ValueError):
            TrainConfig(beta=0.0)

    def test_rejects_zero_epochs(self) -> None:
        """At least one epoch is needed."""
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_beta_warmup(self) -> None:
        """beta ramps linearly over the warm-up and then stays constant."""
        config = TrainConfig(beta=0.05, epochs=100, warmup_fraction=0.1)
        assert abs(config.beta_at(0) - 0.005) < 1e-12
        assert config.beta_at(9) == 0.05
        assert config.beta_at(50) == 0.05

    def test_no_warmup(self) -> None:
        """A zero warm-up fraction uses beta from the first epoch."""
        assert TrainConfig(beta=0.2, warmup_fraction=0.0).beta_at(0) == 0.2

    def test_num_states_follows_episode(self) -> None:
        """An unset model K takes the episode's K; an explicit one wins."""
        assert ModelConfig().num_states is None
        assert TrainConfig.from_model_config(ModelConfig(), "linear", 3).num_states == 3
        explicit = ModelConfig(num_states=4)
        assert TrainConfig.from_model_config(explicit, "linear", 3).num_states == 4
        assert TrainConfig.from_model_config(ModelConfig()).num_states == 2


class TestSahmmVae:
    """Test the training loop."""

    def setup_method(self) -> None:
        self.episode = default_episode(Branch.GAUSSIAN, T=30, seed=5)

    def test_zero_learning_rate_keeps_parameters(self) -> None:
        """With lr = 0 no parameter moves."""
        model = SahmmVae(_small_config(learning_rate=0.0), 2, 2)
        before = {name: t.value.copy() for name, t in model.params.tensors().items()}
        model.fit(self.episode)
        for name, tensor in model.params.tensors().items():
            assert np.array_equal(tensor.value, before[name]), name

    def test_records_every_logged_epoch(self) -> None:
        """Each logged epoch records loss components, correlations and a prior snapshot."""
        model = SahmmVae(_small_config(epochs=4, log_every=2), 2, 2)
        report = model.fit(self.episode)
        assert [r.epoch for r in report.records] == [0, 2, 3]
        assert len(report.epoch_losses) == 4
        for record in report.records:
            c = record.components
            assert abs(c.total - (c.rec + c.beta * (c.logq - c.logp))) < 1e-9
            assert record.correlations.shape == (2,)
            assert len(record.prior_snapshot) == 2

    def test_every_branch_trains(self) -> None:
        """A few epochs of each branch produce finite losses."""
        for branch in Branch:
            episode = default_episode(branch, T=20, seed=6)
            model = SahmmVae(_small_config(branch=branch), 2, 2)
            report = model.fit(episode)
            assert np.all(np.isfinite(report.epoch_losses))

    def test_same_seed_same_run(self) -> None:
        """Two models with the same seed follow identical loss sequences."""
        a = SahmmVae(_small_config(), 2, 2).fit(self.episode)
        b = SahmmVae(_small_config(), 2, 2).fit(self.episode)
        assert a.epoch_losses == b.epoch_losses

    def test_divergence_is_reported(self) -> None:
        """A non-finite loss raises TrainingDiverged with the epoch and a parameter dump."""
        nan = float("nan")
        components = LossComponents(nan, nan, 0.0, 0.0, 0.05)
        model = SahmmVae(_small_config(), 2, 2)
        with patch("src.model.total_loss", return_value=(Tensor(nan), components)):
            with pytest.raises(TrainingDiverged) as excinfo:
                model.fit(self.episode)
        assert excinfo.value.epoch == 0
        assert "posterior.log_vars" in excinfo.value.dump

    def test_decode_states_shape(self) -> None:
        """Decoded paths cover every time step and source."""
        model = SahmmVae(_small_config(), 2, 2)
        assert model.decode_states(self.episode.observations).shape == (30, 2)

    @patch("src.model.SahmmVae.fit")
    def test_train_builds_model_for_episode(self, mock_fit: MagicMock) -> None:
        """train sizes the model from the episode and returns its parameters."""
        params, _ = train(self.episode, _small_config())
        mock_fit.assert_called_once_with(self.episode)
        assert params.encoder.in_features == 2
        assert params.prior.num_sources == 2


@pytest.fixture(scope="module", params=list(Branch), ids=lambda branch: branch.label)
def trained(request: pytest.FixtureRequest) -> tuple[SahmmVae, EpisodeData]:
    """One full-length run per branch on its own default scenario, shared by the slow tests."""
    episode = default_episode(request.param)
    model = SahmmVae(TrainConfig(branch=request.param, seed=0), 2, 2)
    model.fit(episode)
    return model, episode


@pytest.mark.slow
class TestEndToEnd:
    """Full-length training on the default scenario of every branch."""

    def test_separates_sources(self, trained: tuple[SahmmVae, EpisodeData]) -> None:
        """Mean |corr| reaches 0.95 and the last 500 epochs average below the first 500."""
        model, _ = trained
        report = model.report
        assert report.records[-1].correlations.mean() >= 0.95
        losses = np.array(report.epoch_losses)
        assert losses[-500:].mean() < losses[:500].mean()

    def test_posterior_variances_shrink(self, trained: tuple[SahmmVae, EpisodeData]) -> None:
        """Every learned sigma_j^2 ends at least ten times below its initial value."""
        model, _ = trained
        initial = np.exp(POSTERIOR_LOG_VAR_INIT)
        assert np.all(model.report.records[-1].posterior_variances <= initial / 10.0)

    def test_transitions_are_diagonal_dominant(
        self, trained: tuple[SahmmVae, EpisodeData]
    ) -> None:
        """Branches I and II learn sticky transitions that agree with decoded-path usage."""
        model, episode = trained
        if model.config.branch is Branch.STATE_FLOW:
            pytest.skip("transition agreement is only asserted for branches I and II")
        evaluation = evaluate_run(model, episode)
        for agreement in evaluation.decoded_agreement:
            assert agreement.learned_diagonal_dominant
            assert agreement.mean_tv < 0.15

    def test_msar_recovers_regimes(self, trained: tuple[SahmmVae, EpisodeData]) -> None:
        """Branch II finds AR regimes with at least 80% accuracy per source."""
        model, episode = trained
        if model.config.branch is not Branch.MSAR:
            pytest.skip("regime accuracy is asserted for the MSAR scenario")
        evaluation = evaluate_run(model, episode)
        for match in evaluation.state_match.matches:
            assert match.accuracy >= 0.8
