"""Small parameterized layers shared by the refinement and scoring stages."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, add, gelu, layer_norm, matmul

__all__ = ["ConfigError", "Linear", "LayerNorm", "MLP", "wants_decay"]

INIT_STD = 0.02


class ConfigError(ValueError):
    """A configuration value is out of range or internally inconsistent."""


def wants_decay(name: str) -> bool:
    """Weight decay applies to projection matrices only, never to biases
    or layer-norm gains."""
    return name.endswith(".w")


class Linear:
    """Affine map ``x @ w + b`` with weights stored (n_in, n_out).

    ``bias=False`` drops the offset entirely. The key projection uses this:
    a shared key offset shifts every score in a softmax row equally, so the
    softmax cancels it exactly and the parameter could never train away
    from zero anyway.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator | None,
        std: float = INIT_STD,
        zero_init: bool = False,
        bias: bool = True,
    ):
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"Linear dims must be positive, got ({n_in}, {n_out})")
        if zero_init or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, std, size=(n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is None:
            return y
        return add(y, self.b)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    """Per-row layer normalization with learned gain and bias."""

    def __init__(self, dim: int, eps: float = 1e-5):
        if dim < 1:
            raise ConfigError(f"LayerNorm dim must be positive, got {dim}")
        self.g = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b, self.eps)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class MLP:
    """Two-layer perceptron with a GELU hidden activation."""

    def __init__(
        self,
        n_in: int,
        n_hidden: int,
        n_out: int,
        rng: np.random.Generator | None,
        std: float = INIT_STD,
        zero_out: bool = False,
    ):
        self.fc1 = Linear(n_in, n_hidden, rng, std=std)
        self.fc2 = Linear(n_hidden, n_out, rng, std=std, zero_init=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")
