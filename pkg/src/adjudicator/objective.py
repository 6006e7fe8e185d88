"""Focal pairwise ranking loss with a routing-entropy floor.

The preferred and rejected rewards feed a temperature-scaled Bradley-Terry
probability. Easy pairs are down-weighted by a focal factor, annotated
preference magnitudes scale the loss through a square-root weight, and a
hinge on routing entropy keeps the router from collapsing early.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .aggregate import RewardOutput
from .nn import ConfigError
from .tensor import (
    Tensor,
    add,
    clamp_min,
    entropy,
    log_sigmoid,
    mul,
    neg,
    powc,
    relu,
    scale,
    sigmoid,
    sub,
)

__all__ = [
    "LossConfig",
    "PairLossBreakdown",
    "bt_probability",
    "magnitude_weight",
    "routing_entropy",
    "entropy_penalty",
    "pair_loss",
]

FOCAL_FLOOR = 1e-12
_LN3 = math.log(3.0)


@dataclass
class LossConfig:
    temperature: float = 1.3
    gamma: float = 0.9
    entropy_coef: float = 0.01
    target_entropy: float = 0.7
    entropy_on: str = "both"

    def __post_init__(self):
        if not self.temperature > 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.entropy_coef < 0.0:
            raise ConfigError(f"entropy_coef must be >= 0, got {self.entropy_coef}")
        if self.entropy_on not in ("both", "chosen"):
            raise ConfigError(f"entropy_on must be 'both' or 'chosen', got {self.entropy_on!r}")
        if self.target_entropy > _LN3:
            warnings.warn(
                f"target_entropy {self.target_entropy} exceeds ln 3 ~= {_LN3:.4f}; "
                "a 3-way routing distribution can never reach it, so the penalty "
                "never vanishes",
                stacklevel=2,
            )


def bt_probability(r_plus: Tensor, r_minus: Tensor, temperature: float) -> Tensor:
    """P(preferred beats rejected) under the temperature-scaled pairwise model."""
    if not temperature > 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return sigmoid(scale(sub(r_plus, r_minus), 1.0 / temperature))


def magnitude_weight(magnitude: int) -> float:
    """Square-root scaling of an annotated preference magnitude.

    Magnitudes 0 (unannotated) and 1 both weigh 1.
    """
    if magnitude < 0:
        raise ConfigError(f"preference magnitude must be >= 0, got {magnitude}")
    return math.sqrt(max(float(magnitude), 1.0))


def routing_entropy(pi: Tensor) -> Tensor:
    """Shannon entropy of a routing distribution (0 ln 0 == 0)."""
    return entropy(pi)


def entropy_penalty(h: Tensor, target: float, coef: float) -> Tensor:
    """Squared hinge pushing routing entropy up to ``target``."""
    return scale(powc(relu(add(neg(h), target)), 2.0), coef)


@dataclass
class PairLossBreakdown:
    """Logged components of one pair's loss. ``total`` stays a graph node
    so the training loop can backpropagate through it."""

    p: float
    focal_term: float
    entropy_chosen: float
    entropy_rejected: float
    penalty: float
    w_m: float
    total: Tensor


def pair_loss(
    out_plus: RewardOutput,
    out_minus: RewardOutput,
    magnitude: int,
    cfg: LossConfig,
) -> PairLossBreakdown:
    """Loss for one preference pair.

    The focal factor is computed from sigmoid(-x) rather than 1 - p so both
    tails stay accurate, with a 1e-12 floor before the fractional power; the
    log-probability term goes through log_sigmoid directly. The entropy
    hinge is evaluated on both responses' routing distributions and averaged
    unless ``entropy_on == 'chosen'``.
    """
    w = magnitude_weight(magnitude)
    x = scale(sub(out_plus.reward, out_minus.reward), 1.0 / cfg.temperature)
    p = sigmoid(x)
    focal_factor = powc(clamp_min(sigmoid(neg(x)), FOCAL_FLOOR), cfg.gamma)
    focal = scale(mul(focal_factor, neg(log_sigmoid(x))), w)

    h_chosen = routing_entropy(out_plus.pi)
    h_rejected = routing_entropy(out_minus.pi)
    pen_chosen = entropy_penalty(h_chosen, cfg.target_entropy, cfg.entropy_coef)
    if cfg.entropy_on == "both":
        pen_rejected = entropy_penalty(h_rejected, cfg.target_entropy, cfg.entropy_coef)
        penalty = scale(add(pen_chosen, pen_rejected), 0.5)
    else:
        penalty = pen_chosen
    total = add(focal, penalty)
    return PairLossBreakdown(
        p=p.item(),
        focal_term=focal.item(),
        entropy_chosen=h_chosen.item(),
        entropy_rejected=h_rejected.item(),
        penalty=penalty.item(),
        w_m=w,
        total=total,
    )
