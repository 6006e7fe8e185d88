"""Pooling experts, per-view scoring heads, and the routing layer.

Four views summarize a refined sequence: the last response token, the mean
over response tokens, an attention-weighted mix over all unpadded tokens,
and the prompt mean. Three scalar heads score the first three views; a
router reads all four views and mixes the head scores into one reward, so
the blend is conditioned on what the sequence looks like rather than fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .nn import MLP, ConfigError, Linear
from .refine import RefinedStates, RefinementStack, TokenSequence
from .tensor import (
    Tensor,
    ShapeError,
    concat,
    masked_mean,
    masked_softmax,
    matmul,
    reshape,
    select,
    softmax,
    stack,
    tape_paused,
)

__all__ = [
    "ROUTE_MODES",
    "SINGLE_VIEW_MODES",
    "VIEW_NAMES",
    "ModelConfig",
    "AttentionScorer",
    "ViewBundle",
    "RewardOutput",
    "RewardModel",
    "pool_last",
    "pool_mean",
    "pool_attention",
    "pool_prompt",
    "reward",
]

ROUTE_MODES = ("full", "last_only", "mean_only", "attn_only")
SINGLE_VIEW_MODES = ("last_only", "mean_only", "attn_only")
VIEW_NAMES = ("last", "mean", "attn")

_FORCED_PI = {
    "last_only": np.array([1.0, 0.0, 0.0]),
    "mean_only": np.array([0.0, 1.0, 0.0]),
    "attn_only": np.array([0.0, 0.0, 1.0]),
}


@dataclass
class ModelConfig:
    """Architecture hyperparameters; width fields default from ``d``."""

    d: int
    K: int = 3
    n_heads: int = 4
    ffn_hidden: int | None = None
    head_hidden: int | None = None
    router_hidden: int | None = None
    route_mode: str = "full"
    use_refinement: bool = True
    causal_attention: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"model dim must be >= 1, got {self.d}")
        if self.K < 1:
            raise ConfigError(f"refinement depth K must be >= 1, got {self.K}")
        if self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ConfigError(f"model dim {self.d} is not divisible by n_heads {self.n_heads}")
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.d
        if self.head_hidden is None:
            self.head_hidden = max(self.d // 2, 1)
        if self.router_hidden is None:
            self.router_hidden = self.d
        for label, width in (
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
            ("router_hidden", self.router_hidden),
        ):
            if width < 1:
                raise ConfigError(f"{label} must be >= 1, got {width}")
        if self.route_mode not in ROUTE_MODES:
            raise ConfigError(f"route_mode must be one of {ROUTE_MODES}, got {self.route_mode!r}")

    def variant(self, mode: str) -> "ModelConfig":
        """Same architecture with a different forward pathway.

        ``no_refine`` keeps the full router but bypasses the refinement
        stack; the named single-view modes pin the routing one-hot.
        """
        if mode == "no_refine":
            return replace(self, route_mode="full", use_refinement=False)
        return replace(self, route_mode=mode, use_refinement=True)


class AttentionScorer:
    """Scalar relevance score per token, used by the attention pool.

    Bias-free for the same reason as the key projection: the logits feed a
    softmax over tokens, which cancels any shared offset exactly.
    """

    def __init__(self, d: int, rng: np.random.Generator | None):
        self.proj = Linear(d, 1, rng, bias=False)

    def logits(self, h: Tensor) -> Tensor:
        return reshape(self.proj(h), (h.data.shape[0],))

    def named_params(self, prefix: str = "attn_pool") -> Iterator[tuple[str, Tensor]]:
        yield from self.proj.named_params(prefix)


def pool_last(refined: Tensor, response_mask: np.ndarray) -> Tensor:
    """The row of the final response token."""
    mask = np.asarray(response_mask)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise ShapeError("pool_last", "response mask selects no tokens")
    return select(refined, int(idx[-1]))


def pool_mean(refined: Tensor, response_mask: np.ndarray) -> Tensor:
    """Mean over response-token rows."""
    return masked_mean(refined, response_mask)


def pool_attention(
    refined: Tensor, pad_mask: np.ndarray, scorer: AttentionScorer
) -> tuple[Tensor, Tensor]:
    """Learned soft selection over every unpadded token (prompt included).

    Returns the pooled vector and the attention weights; padded positions
    carry exactly zero weight.
    """
    beta = masked_softmax(scorer.logits(refined), pad_mask)
    return matmul(beta, refined), beta


def pool_prompt(refined: Tensor, prompt_len: int) -> Tensor:
    """Mean over the prompt rows, the router's context signal."""
    if prompt_len < 1:
        raise ShapeError("pool_prompt", f"prompt_len must be >= 1, got {prompt_len}")
    mask = np.zeros(refined.data.shape[0])
    mask[:prompt_len] = 1.0
    return masked_mean(refined, mask)


@dataclass
class ViewBundle:
    """The four pooled views and the three per-view scalar scores."""

    z_last: Tensor
    z_mean: Tensor
    z_attn: Tensor
    z_prompt: Tensor
    scores: tuple[Tensor, Tensor, Tensor]


@dataclass
class RewardOutput:
    """Routing weights, final scalar reward, and the views behind them.

    ``alpha`` is None when the refinement stack was bypassed.
    """

    pi: Tensor
    reward: Tensor
    views: ViewBundle
    alpha: Tensor | None = None


class RewardModel:
    """Refinement stack, pooling experts, scoring heads, and router.

    Every pathway's parameters exist in every mode (construction consumes
    the init stream identically), so variants that share a seed differ only
    in which pathway the forward pass uses.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None):
        self.cfg = cfg
        d = cfg.d
        self.refiner = RefinementStack(
            d, cfg.K, cfg.n_heads, cfg.ffn_hidden, rng, causal=cfg.causal_attention
        )
        self.scorer = AttentionScorer(d, rng)
        self.head_last = MLP(d, cfg.head_hidden, 1, rng)
        self.head_mean = MLP(d, cfg.head_hidden, 1, rng)
        self.head_attn = MLP(d, cfg.head_hidden, 1, rng)
        # zero-initialized router logits: an untrained model routes uniformly
        self.router = MLP(4 * d, cfg.router_hidden, 3, rng, zero_out=True)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "RewardModel":
        return cls(cfg, np.random.default_rng(seed))

    def _score(self, head: MLP, z: Tensor) -> Tensor:
        return reshape(head(z), ())

    def route(self, views: ViewBundle) -> Tensor:
        packed = concat([views.z_last, views.z_mean, views.z_attn, views.z_prompt])
        return softmax(self.router(packed))

    def pooled_views(self, refined: Tensor, seq: TokenSequence) -> ViewBundle:
        z_last = pool_last(refined, seq.response_mask)
        z_mean = pool_mean(refined, seq.response_mask)
        z_attn, _ = pool_attention(refined, seq.pad_mask, self.scorer)
        z_prompt = pool_prompt(refined, seq.prompt_len)
        return self.score_views(z_last, z_mean, z_attn, z_prompt)

    def score_views(self, z_last: Tensor, z_mean: Tensor, z_attn: Tensor, z_prompt: Tensor) -> ViewBundle:
        scores = (
            self._score(self.head_last, z_last),
            self._score(self.head_mean, z_mean),
            self._score(self.head_attn, z_attn),
        )
        return ViewBundle(z_last, z_mean, z_attn, z_prompt, scores)

    def combine(self, views: ViewBundle) -> tuple[Tensor, Tensor]:
        """Routing weights plus the routed mixture of the three scores."""
        if self.cfg.route_mode == "full":
            pi = self.route(views)
        else:
            pi = Tensor(_FORCED_PI[self.cfg.route_mode].copy())
        return pi, matmul(pi, stack(list(views.scores)))

    def refined_states(self, seq: TokenSequence) -> tuple[Tensor, Tensor | None]:
        """Run the refinement stack (or pass the input through when bypassed)."""
        if seq.dim != self.cfg.d:
            raise ShapeError("reward", f"sequence dim {seq.dim} does not match model dim {self.cfg.d}")
        h0 = Tensor(seq.embeddings)
        if not self.cfg.use_refinement:
            return h0, None
        states = self.refiner.refine(h0, seq.pad_mask)
        return states.refined, states.alpha

    def forward_from(self, seq: TokenSequence, refined: Tensor, alpha: Tensor | None) -> RewardOutput:
        """Pool, score, and route a precomputed stack of refined states."""
        views = self.pooled_views(refined, seq)
        pi, r = self.combine(views)
        return RewardOutput(pi=pi, reward=r, views=views, alpha=alpha)

    def forward(self, seq: TokenSequence, freeze_refinement: bool = False) -> RewardOutput:
        """Score one sequence end to end.

        With ``freeze_refinement`` the refinement stack runs off-tape and its
        output re-enters as a constant, so no gradient reaches stack
        parameters. Readout-only training uses this to hold a trained stack
        fixed while heads learn on top of it.
        """
        if freeze_refinement and self.cfg.use_refinement:
            with tape_paused():
                refined, alpha = self.refined_states(seq)
            refined = Tensor(refined.data)
            alpha = None if alpha is None else Tensor(alpha.data)
        else:
            refined, alpha = self.refined_states(seq)
        return self.forward_from(seq, refined, alpha)

    __call__ = forward

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        params.extend(self.refiner.named_params("refine"))
        params.extend(self.scorer.named_params("attn_pool"))
        params.extend(self.head_last.named_params("head_last"))
        params.extend(self.head_mean.named_params("head_mean"))
        params.extend(self.head_attn.named_params("head_attn"))
        params.extend(self.router.named_params("router"))
        return params

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())


def reward(seq: TokenSequence, model: RewardModel) -> RewardOutput:
    """Score one sequence with the full refine-pool-route pipeline."""
    return model.forward(seq)
