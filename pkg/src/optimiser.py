"""Adaptive-moment (Adam) optimiser for tape-trained parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from src.diffcore import Tensor
from src.settings import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, LEARNING_RATE


@dataclass
class AdamState:
    """First/second moment estimates per parameter name and the step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = LEARNING_RATE,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Args:
        params: Parameter arrays keyed by name
        grads: Gradients keyed by the same names (missing names count as zero)
        state: Moments from previous steps; not modified
        lr: Step size

    Returns:
        Tuple of (updated parameter arrays, new AdamState)

    Raises:
        ValueError: If a gradient's shape differs from its parameter's
    """
    t = state.step + 1
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    updated: dict[str, np.ndarray] = {}

    for name, value in params.items():
        g = grads.get(name)
        g = np.zeros_like(value) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {value.shape}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))

        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_m[name], new_v[name] = m, v

        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + epsilon)

    return updated, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Applies ``optimizer_step`` in place to named tensors, reading their ``grad``."""

    def __init__(
        self,
        lr: float = LEARNING_RATE,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        epsilon: float = ADAM_EPSILON,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.state = AdamState()

    def step(self, params: dict[str, Tensor]) -> None:
        values = {name: tensor.value for name, tensor in params.items()}
        grads = {name: tensor.grad for name, tensor in params.items() if tensor.grad is not None}
        updated, self.state = optimizer_step(
            values, grads, self.state, self.lr, self.beta1, self.beta2, self.epsilon
        )
        for name, tensor in params.items():
            tensor.value[...] = updated[name]

    def zero_grad(self, params: dict[str, Tensor]) -> None:
        for tensor in params.values():
            tensor.zero_grad()
