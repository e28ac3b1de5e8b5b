"""Tests for sinh-arcsinh flows."""

import numpy as np
import pytest

from src import diffcore as dc
from src.flows import FlowParams, flow_forward, flow_inverse_with_logdet, tail_raw_for
from tests.helpers import numeric_gradient, relative_error


class TestFlowForward:
    """Test the forward map."""

    def test_identity_parameters(self) -> None:
        """skew 0 and tail 1 leave inputs unchanged."""
        x = np.linspace(-5.0, 5.0, 11)
        out = flow_forward(FlowParams.identity(), x).value
        assert np.allclose(out, x, atol=1e-12)

    def test_odd_fixed_point(self) -> None:
        """skew 0, tail 2 maps 0 to 0."""
        params = FlowParams.from_natural([0.0], [2.0])
        assert abs(flow_forward(params, 0.0).item()) < 1e-15

    def test_skew_only(self) -> None:
        """skew 0.5, tail 1 maps 0 to sinh(0.5)."""
        params = FlowParams.from_natural([0.5], [1.0])
        assert abs(flow_forward(params, 0.0).item() - 0.521095) < 1e-6

    def test_tail_must_exceed_floor(self) -> None:
        """A tail weight at or below the floor cannot be represented."""
        with pytest.raises(ValueError):
            tail_raw_for(0.0)


class TestFlowInverse:
    """Test the inverse map and its log-Jacobian."""

    def test_identity_has_zero_logdet(self) -> None:
        """The identity flow inverts to (u, 0)."""
        u = np.array([-3.0, 0.0, 2.5])
        eps, logdet = flow_inverse_with_logdet(FlowParams.identity(), u)
        assert np.allclose(eps.value, u, atol=1e-12)
        assert np.allclose(logdet.value, 0.0, atol=1e-12)

    def test_fixed_point_logdet(self) -> None:
        """skew 0, tail 2 at u = 0 has log-det -log 2."""
        params = FlowParams.from_natural([0.0], [2.0])
        eps, logdet = flow_inverse_with_logdet(params, 0.0)
        assert abs(eps.item()) < 1e-15
        assert abs(logdet.item() + np.log(2.0)) < 1e-12

    def test_logdet_matches_finite_difference(self) -> None:
        """log|d eps/du| agrees with a central difference of the inverse."""
        rng = np.random.default_rng(11)
        for _ in range(5):
            skew, tail, u = rng.uniform(-1, 1), rng.uniform(0.5, 2.0), rng.uniform(-3, 3)
            params = FlowParams.from_natural([skew], [tail])
            _, logdet = flow_inverse_with_logdet(params, u)
            h = 1e-6
            upper = flow_inverse_with_logdet(params, u + h)[0].item()
            lower = flow_inverse_with_logdet(params, u - h)[0].item()
            numeric = np.log(abs((upper - lower) / (2 * h)))
            assert abs(logdet.item() - numeric) < 1e-6 * max(1.0, abs(numeric))

    def test_round_trip(self) -> None:
        """forward(inverse(u)) recovers u over [-50, 50] with two stacked layers."""
        params = FlowParams.from_natural([0.3, -0.4], [1.3, 0.8])
        u = np.linspace(-50.0, 50.0, 201)
        eps, _ = flow_inverse_with_logdet(params, u)
        back = flow_forward(params, eps).value
        assert np.all(np.abs(back - u) < 1e-10 * np.maximum(1.0, np.abs(u)))

    def test_gradients_flow_to_parameters(self) -> None:
        """Skew and raw tail receive gradients through the inverse."""
        params = FlowParams.from_natural([0.2], [1.2], requires_grad=True)
        with dc.recording():
            eps, logdet = flow_inverse_with_logdet(params, np.array([0.5, -1.0]))
            dc.backward((eps + logdet).sum())
        assert params.skew.grad is not None
        assert params.tail_raw.grad is not None

    def test_per_state_layers(self) -> None:
        """(L, K) parameters evaluate K state-specific flows side by side."""
        params = FlowParams.from_natural([[0.0, 0.5]], [[1.0, 1.0]])
        out = flow_forward(params, np.zeros((3, 2))).value
        assert np.allclose(out[:, 0], 0.0)
        assert np.allclose(out[:, 1], np.sinh(0.5))


class TestFlowShape:
    """Test monotonicity and parameter gradients over a grid of flows."""

    @pytest.mark.parametrize("skew", [-1.0, 0.0, 0.7])
    @pytest.mark.parametrize("tail", [0.4, 1.0, 2.5])
    def test_forward_is_strictly_increasing(self, skew: float, tail: float) -> None:
        """Every skew/tail pair maps an increasing grid to an increasing sequence."""
        x = np.linspace(-8.0, 8.0, 401)
        out = flow_forward(FlowParams.from_natural([skew], [tail]), x).value
        assert np.all(np.diff(out) > 0.0)

    def test_skew_and_tail_gradients_match_finite_differences(self) -> None:
        """d(eps + logdet)/d(skew, tail_raw) agrees with central differences."""
        rng = np.random.default_rng(12)
        u = rng.uniform(-3.0, 3.0, size=7)
        skew = np.array([0.3, -0.5])
        tail_raw = tail_raw_for([1.3, 0.8])

        def objective() -> float:
            params = FlowParams(dc.Tensor(skew), dc.Tensor(tail_raw))
            eps, logdet = flow_inverse_with_logdet(params, u)
            return (eps + logdet).sum().item()

        params = FlowParams(dc.Tensor(skew, True), dc.Tensor(tail_raw, True))
        with dc.recording():
            eps, logdet = flow_inverse_with_logdet(params, u)
            dc.backward((eps + logdet).sum())
        assert relative_error(params.skew.grad, numeric_gradient(objective, skew)) < 1e-6
        assert relative_error(params.tail_raw.grad, numeric_gradient(objective, tail_raw)) < 1e-6
