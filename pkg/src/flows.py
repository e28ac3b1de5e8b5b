"""Scalar sinh-arcsinh flows used as state-wise innovation transforms.

Each layer maps ``x -> sinh(delta * asinh(x) + skew)`` with ``delta = softplus(tail_raw)
+ TAIL_FLOOR``. Layers compose in order; the inverse runs them in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src import diffcore as dc
from src.diffcore import ArrayLike, Tensor

TAIL_FLOOR = 1e-3


def tail_raw_for(delta: ArrayLike) -> np.ndarray:
    """Raw tail parameter giving the requested tail weight ``delta`` (> TAIL_FLOOR)."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= TAIL_FLOOR):
        raise ValueError(f"tail weight must exceed {TAIL_FLOOR}")
    return np.log(np.expm1(delta - TAIL_FLOOR))


@dataclass
class FlowParams:
    """Per-layer skew and raw tail weight.

    Both tensors have shape ``(L,)`` for a single state or ``(L, K)`` for K states
    evaluated side by side; the trailing axis broadcasts against the flow input.
    """

    skew: Tensor
    tail_raw: Tensor

    def __post_init__(self) -> None:
        if self.skew.shape != self.tail_raw.shape:
            raise ValueError(f"skew {self.skew.shape} and tail {self.tail_raw.shape} differ")
        if self.skew.ndim == 0 or self.skew.shape[0] < 1:
            raise ValueError("a flow needs at least one layer")

    @property
    def num_layers(self) -> int:
        return self.skew.shape[0]

    def tail(self, layer: int) -> Tensor:
        return dc.softplus(self.tail_raw[layer]) + TAIL_FLOOR

    def tails(self) -> np.ndarray:
        """Tail weights in natural units (no tape)."""
        raw = self.tail_raw.value
        return np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw))) + TAIL_FLOOR

    def tensors(self) -> dict[str, Tensor]:
        return {"skew": self.skew, "tail_raw": self.tail_raw}

    @classmethod
    def identity(cls, num_layers: int = 1, num_states: int | None = None) -> FlowParams:
        shape = (num_layers,) if num_states is None else (num_layers, num_states)
        return cls.from_natural(np.zeros(shape), np.ones(shape))

    @classmethod
    def from_natural(
        cls, skew: ArrayLike, delta: ArrayLike, requires_grad: bool = False
    ) -> FlowParams:
        return cls(
            skew=Tensor(skew, requires_grad=requires_grad),
            tail_raw=Tensor(tail_raw_for(delta), requires_grad=requires_grad),
        )


def flow_forward(params: FlowParams, eps: ArrayLike) -> Tensor:
    """Push base noise through every layer in order."""
    x = dc.as_tensor(eps)
    for layer in range(params.num_layers):
        x = dc.sinh(params.tail(layer) * dc.asinh(x) + params.skew[layer])
    return x


def flow_inverse_with_logdet(params: FlowParams, u: ArrayLike) -> tuple[Tensor, Tensor]:
    """Invert the flow at ``u`` and return ``(eps, log|d eps / d u|)``."""
    y = dc.as_tensor(u)
    logdet: Tensor | float = 0.0
    for layer in reversed(range(params.num_layers)):
        tail = params.tail(layer)
        z = (dc.asinh(y) - params.skew[layer]) / tail
        logdet = logdet + dc.logcosh(z) - dc.log(tail) - 0.5 * dc.log(1.0 + dc.square(y))
        y = dc.sinh(z)
    return y, dc.as_tensor(logdet)
