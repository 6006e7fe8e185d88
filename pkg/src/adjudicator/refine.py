"""Token sequences and the gated stack of refinement blocks.

A sequence enters as a padded (L, d) block of token embeddings. The stack
runs K bidirectional pre-norm transformer blocks over the unpadded tokens
and mixes the K block outputs with a depth gate computed from the raw
input, so shallow sequences can lean on early blocks and harder ones on
deeper output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .nn import ConfigError, LayerNorm, Linear
from .tensor import (
    Tensor,
    add,
    gelu,
    masked_mean,
    masked_softmax,
    matmul,
    mul,
    reshape,
    scale,
    select,
    softmax,
    transpose,
)

__all__ = [
    "SequenceError",
    "TokenSequence",
    "TransformerBlock",
    "RefinementStack",
    "RefinedStates",
    "refine",
    "depth_gate",
]


class SequenceError(ValueError):
    """A token sequence violates its layout invariants."""


@dataclass
class TokenSequence:
    """One padded token-embedding sequence plus its role masks.

    Layout is [prompt | response | padding]: the first ``prompt_len`` rows
    are prompt tokens, response tokens are marked by ``response_mask``, and
    padding is a contiguous suffix marked by zeros in ``pad_mask``.
    """

    embeddings: np.ndarray
    response_mask: np.ndarray
    prompt_len: int
    pad_mask: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.response_mask = np.asarray(self.response_mask, dtype=np.float64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=np.float64)
        emb = self.embeddings
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise SequenceError(f"embeddings must be (L, d) with L, d >= 1, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise SequenceError("embeddings contain non-finite values")
        L = emb.shape[0]
        for label, mask in (("response_mask", self.response_mask), ("pad_mask", self.pad_mask)):
            if mask.shape != (L,):
                raise SequenceError(f"{label} must have shape ({L},), got {mask.shape}")
            if not np.all((mask == 0.0) | (mask == 1.0)):
                raise SequenceError(f"{label} entries must be 0 or 1")
        if not 1 <= self.prompt_len <= L:
            raise SequenceError(f"prompt_len {self.prompt_len} out of range for L={L}")
        if self.response_mask.sum() < 1:
            raise SequenceError("sequence has no response tokens")
        if np.any(self.response_mask[: self.prompt_len] == 1.0):
            raise SequenceError("response tokens may not overlap the prompt span")
        if np.any(self.pad_mask < self.response_mask):
            raise SequenceError("response tokens cannot sit on padding")
        if np.any(self.pad_mask[: self.prompt_len] == 0.0):
            raise SequenceError("prompt tokens cannot sit on padding")
        if np.any(np.diff(self.pad_mask) > 0.0):
            raise SequenceError("padding must be a contiguous suffix")

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def response_len(self) -> int:
        return int(self.response_mask.sum())

    @property
    def last_response_index(self) -> int:
        return int(np.nonzero(self.response_mask)[0][-1])

    @property
    def prompt_mask(self) -> np.ndarray:
        m = np.zeros(self.length)
        m[: self.prompt_len] = 1.0
        return m

    @classmethod
    def from_parts(
        cls, prompt: np.ndarray, response: np.ndarray, pad_to: int | None = None
    ) -> "TokenSequence":
        """Assemble [prompt | response | zero padding] with derived masks."""
        prompt = np.asarray(prompt, dtype=np.float64)
        response = np.asarray(response, dtype=np.float64)
        if prompt.ndim != 2 or response.ndim != 2 or prompt.shape[1] != response.shape[1]:
            raise SequenceError(
                f"prompt {prompt.shape} and response {response.shape} must be (L, d) with equal d"
            )
        used = prompt.shape[0] + response.shape[0]
        total = used if pad_to is None else pad_to
        if total < used:
            raise SequenceError(f"pad_to {total} is shorter than the {used} real tokens")
        emb = np.zeros((total, prompt.shape[1]))
        emb[: prompt.shape[0]] = prompt
        emb[prompt.shape[0] : used] = response
        resp = np.zeros(total)
        resp[prompt.shape[0] : used] = 1.0
        pad = np.zeros(total)
        pad[:used] = 1.0
        return cls(emb, resp, prompt.shape[0], pad)


class TransformerBlock:
    """Pre-norm bidirectional attention block with a 2-layer GELU FFN.

    Output projections of both the attention and the FFN start at zero, so
    an untrained block is the identity map.
    """

    def __init__(self, d: int, n_heads: int, ffn_hidden: int, rng: np.random.Generator | None):
        if d % n_heads != 0:
            raise ConfigError(f"model dim {d} is not divisible by n_heads {n_heads}")
        self.d = d
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.ln1 = LayerNorm(d)
        self.attn_q = Linear(d, d, rng)
        self.attn_k = Linear(d, d, rng, bias=False)
        self.attn_v = Linear(d, d, rng)
        self.attn_out = Linear(d, d, rng, zero_init=True)
        self.ln2 = LayerNorm(d)
        self.ffn_in = Linear(d, ffn_hidden, rng)
        self.ffn_out = Linear(ffn_hidden, d, rng, zero_init=True)

    def _split_heads(self, x: Tensor, length: int) -> Tensor:
        return transpose(reshape(x, (length, self.n_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, h: Tensor, attn_mask: np.ndarray) -> Tensor:
        """``attn_mask`` broadcasts over the key axis of the score stack;
        pass the pad mask (L,) or a combined (L, L) mask for causal runs."""
        length = h.data.shape[0]
        x = self.ln1(h)
        q = self._split_heads(self.attn_q(x), length)
        k = self._split_heads(self.attn_k(x), length)
        v = self._split_heads(self.attn_v(x), length)
        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        weights = masked_softmax(scores, attn_mask)
        ctx = matmul(weights, v)
        merged = reshape(transpose(ctx, (1, 0, 2)), (length, self.d))
        h = add(h, self.attn_out(merged))
        return add(h, self.ffn_out(gelu(self.ffn_in(self.ln2(h)))))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn_q.named_params(f"{prefix}.attn_q")
        yield from self.attn_k.named_params(f"{prefix}.attn_k")
        yield from self.attn_v.named_params(f"{prefix}.attn_v")
        yield from self.attn_out.named_params(f"{prefix}.attn_out")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ffn_in.named_params(f"{prefix}.ffn_in")
        yield from self.ffn_out.named_params(f"{prefix}.ffn_out")


@dataclass
class RefinedStates:
    """Per-block hidden states, the depth-gate weights, and their mixture."""

    per_block: list[Tensor]
    alpha: Tensor
    refined: Tensor


class RefinementStack:
    """K sequential blocks whose outputs are mixed by a depth gate.

    The gate reads the pad-masked mean of the raw input, so the mixture
    weights are decided before any refinement happens. The raw input itself
    is not a mixture component; with K=1 the output is exactly block 1.
    """

    def __init__(
        self,
        d: int,
        K: int,
        n_heads: int,
        ffn_hidden: int,
        rng: np.random.Generator | None,
        causal: bool = False,
    ):
        if K < 1:
            raise ConfigError(f"refinement depth K must be >= 1, got {K}")
        self.d = d
        self.K = K
        self.causal = causal
        self.blocks = [TransformerBlock(d, n_heads, ffn_hidden, rng) for _ in range(K)]
        self.gate = Linear(d, K, rng)

    def _attn_mask(self, pad_mask: np.ndarray) -> np.ndarray:
        if not self.causal:
            return pad_mask
        length = pad_mask.shape[0]
        return np.tril(np.ones((length, length))) * pad_mask[None, :]

    def depth_gate(self, h0: Tensor, pad_mask: np.ndarray) -> Tensor:
        context = masked_mean(h0, pad_mask)
        return softmax(self.gate(context))

    def refine(self, h0: Tensor, pad_mask: np.ndarray) -> RefinedStates:
        if h0.data.ndim != 2 or h0.data.shape[1] != self.d:
            raise ConfigError(f"input dims {h0.data.shape} do not match model dim {self.d}")
        attn_mask = self._attn_mask(np.asarray(pad_mask, dtype=np.float64))
        states: list[Tensor] = []
        h = h0
        for block in self.blocks:
            h = block(h, attn_mask)
            states.append(h)
        alpha = self.depth_gate(h0, pad_mask)
        mixed = mul(states[0], select(alpha, 0))
        for k in range(1, self.K):
            mixed = add(mixed, mul(states[k], select(alpha, k)))
        return RefinedStates(per_block=states, alpha=alpha, refined=mixed)

    def named_params(self, prefix: str = "refine") -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.gate.named_params(f"{prefix}.gate")


def refine(seq: TokenSequence, stack: RefinementStack) -> RefinedStates:
    """Run the stack over one sequence's embeddings."""
    return stack.refine(Tensor(seq.embeddings), seq.pad_mask)


def depth_gate(seq: TokenSequence, stack: RefinementStack) -> Tensor:
    """Depth-gate weights for one sequence without running the blocks."""
    return stack.depth_gate(Tensor(seq.embeddings), seq.pad_mask)
