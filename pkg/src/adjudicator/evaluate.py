"""Evaluation and analysis: pairwise accuracy, routing profiles, ablation
runs, and the view-alignment diagnostic.

Accuracy evaluation is forward-only (no tape) and can fan out across a
thread pool; set ADJUDICATOR_EVAL_THREADS to enable. Results are merged in
input order, so the thread count never changes a reported number.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .aggregate import (
    RewardModel,
    RewardOutput,
    SINGLE_VIEW_MODES,
    VIEW_NAMES,
    pool_attention,
    pool_last,
    pool_mean,
    pool_prompt,
)
from .data import ResolvedPair
from .nn import ConfigError
from .refine import TokenSequence
from .tensor import Tape, Tensor
from .training import TrainConfig, TrainResult, train

__all__ = [
    "EVAL_THREADS_ENV",
    "AccuracyReport",
    "RoutingProfile",
    "AlignmentReport",
    "EvalReport",
    "eval_thread_count",
    "pairwise_accuracy",
    "routing_profile",
    "alignment_score",
    "ablation_eval",
    "ablation_table",
    "emit_report",
]

EVAL_THREADS_ENV = "ADJUDICATOR_EVAL_THREADS"

ALIGNMENT_STAGES = ("before", "after")


def eval_thread_count() -> int:
    """Worker count for evaluation fan-out, from the environment (default 1)."""
    raw = os.environ.get(EVAL_THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{EVAL_THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{EVAL_THREADS_ENV} must be >= 1, got {n}")
    return n


def _map_in_order(fn: Callable, items: Sequence) -> list:
    workers = eval_thread_count()
    if workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _score_fn(model) -> Callable[[TokenSequence], float]:
    if isinstance(model, RewardModel):
        return lambda seq: model.forward(seq).reward.item()

    def call(seq: TokenSequence) -> float:
        out = model(seq)
        if isinstance(out, RewardOutput):
            return out.reward.item()
        if isinstance(out, Tensor):
            return out.item()
        return float(out)

    return call


@dataclass
class AccuracyReport:
    """Tie-aware pairwise accuracy, overall and per domain."""

    overall: float
    by_domain: dict[str, float]
    n_pairs: int
    n_by_domain: dict[str, int]

    def format(self) -> str:
        lines = [f"pairs {self.n_pairs}  accuracy {self.overall:.4f}"]
        for domain in sorted(self.by_domain):
            lines.append(
                f"  {domain:<12} {self.by_domain[domain]:.4f}  (n={self.n_by_domain[domain]})"
            )
        return "\n".join(lines)


def pairwise_accuracy(model, pairs: Sequence[ResolvedPair]) -> AccuracyReport:
    """Fraction of pairs where the chosen response outscores the rejected
    one. An exact tie earns half credit."""
    if not pairs:
        raise ConfigError("pairwise_accuracy needs at least one pair")
    score = _score_fn(model)

    def judge(pair: ResolvedPair) -> float:
        r_plus = score(pair.chosen_seq)
        r_minus = score(pair.rejected_seq)
        if r_plus > r_minus:
            return 1.0
        if r_plus == r_minus:
            return 0.5
        return 0.0

    credits = _map_in_order(judge, pairs)
    total: dict[str, float] = {}
    count: dict[str, int] = {}
    for pair, credit in zip(pairs, credits):
        total[pair.domain] = total.get(pair.domain, 0.0) + credit
        count[pair.domain] = count.get(pair.domain, 0) + 1
    return AccuracyReport(
        overall=sum(credits) / len(pairs),
        by_domain={d: total[d] / count[d] for d in total},
        n_pairs=len(pairs),
        n_by_domain=count,
    )


@dataclass
class RoutingProfile:
    """Mean routing weights over chosen responses, per domain."""

    per_domain: dict[str, list[float]]
    n_pairs: dict[str, int]

    def weight(self, domain: str, view: str) -> float:
        return self.per_domain[domain][VIEW_NAMES.index(view)]

    def format(self) -> str:
        header = "domain       " + "".join(f"{v:>10}" for v in VIEW_NAMES)
        lines = [header]
        for domain in sorted(self.per_domain):
            row = "".join(f"{w:>10.4f}" for w in self.per_domain[domain])
            lines.append(f"{domain:<13}{row}")
        return "\n".join(lines)


def routing_profile(model: RewardModel, pairs: Sequence[ResolvedPair]) -> RoutingProfile:
    if not pairs:
        raise ConfigError("routing_profile needs at least one pair")

    def weights(pair: ResolvedPair) -> np.ndarray:
        return model.forward(pair.chosen_seq).pi.data

    rows = _map_in_order(weights, pairs)
    acc: dict[str, np.ndarray] = {}
    count: dict[str, int] = {}
    for pair, pi in zip(pairs, rows):
        if pair.domain not in acc:
            acc[pair.domain] = np.zeros(3)
        acc[pair.domain] += pi
        count[pair.domain] = count.get(pair.domain, 0) + 1
    return RoutingProfile(
        per_domain={d: [float(x) for x in acc[d] / count[d]] for d in acc},
        n_pairs=count,
    )


# ---------------------------------------------------------------------------
# view alignment


def _stage_views(model: RewardModel, seq: TokenSequence, stage: str) -> tuple[np.ndarray, ...]:
    """Pooled views taken either from the raw embeddings (``before``) or
    from the refined mixture the model actually scores (``after``)."""
    h = Tensor(seq.embeddings)
    if stage == "after" and model.cfg.use_refinement:
        h = model.refiner.refine(h, seq.pad_mask).refined
    z_last = pool_last(h, seq.response_mask).data
    z_mean = pool_mean(h, seq.response_mask).data
    z_attn = pool_attention(h, seq.pad_mask, model.scorer)[0].data
    z_prompt = pool_prompt(h, seq.prompt_len).data
    return z_last, z_mean, z_attn, z_prompt


def _reward_view_grads(
    model: RewardModel, views: tuple[np.ndarray, ...]
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """d(reward)/d(view) for each pooled view, plus the routing weights."""
    leaves = [Tensor(v.copy(), requires_grad=True) for v in views]
    with Tape() as tape:
        bundle = model.score_views(*leaves)
        pi, r = model.combine(bundle)
        tape.backward(r)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in zip(VIEW_NAMES, leaves[:3])
    }
    pi_value = pi.data.copy()
    for _, p in model.named_parameters():
        p.grad = None
    return grads, pi_value


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(a, b) / (na * nb))


@dataclass
class AlignmentReport:
    """Cosine alignment between each view's reward gradient and the
    chosen-minus-rejected separation of that view, per domain.

    ``gate_weighted`` folds the per-view means through the domain-mean
    routing weights; a view with no valid samples contributes zero and is
    visible in ``excluded``.
    """

    stage: str
    grad_at: str
    per_view: dict[str, dict[str, float | None]]
    gate_weighted: dict[str, float]
    mean_pi: dict[str, list[float]]
    excluded: dict[str, dict[str, int]]
    n_pairs: dict[str, int]

    def format(self) -> str:
        header = "domain       " + "".join(f"{v:>10}" for v in VIEW_NAMES) + "  gate-weighted"
        lines = [f"alignment ({self.stage})", header]
        for domain in sorted(self.per_view):
            cells = []
            for view in VIEW_NAMES:
                val = self.per_view[domain][view]
                cells.append(f"{val:>10.4f}" if val is not None else f"{'--':>10}")
            lines.append(f"{domain:<13}{''.join(cells)}  {self.gate_weighted[domain]:>12.4f}")
        return "\n".join(lines)


def alignment_score(
    model: RewardModel,
    pairs: Sequence[ResolvedPair],
    stage: str = "after",
    grad_at: str = "chosen",
) -> AlignmentReport:
    """How well each pooled view separates preferred from rejected content.

    For every pair, the reward gradient with respect to each view (taken at
    the ``grad_at`` response's views) is compared against the difference
    between the chosen and rejected pooled views. Pairs where either vector
    has zero norm are excluded per view and counted.
    """
    if stage not in ALIGNMENT_STAGES:
        raise ConfigError(f"stage must be one of {ALIGNMENT_STAGES}, got {stage!r}")
    if grad_at not in ("chosen", "rejected"):
        raise ConfigError(f"grad_at must be 'chosen' or 'rejected', got {grad_at!r}")
    if not pairs:
        raise ConfigError("alignment_score needs at least one pair")

    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    excluded: dict[str, dict[str, int]] = {}
    pi_sum: dict[str, np.ndarray] = {}
    n_pairs: dict[str, int] = {}

    for pair in pairs:
        vp = _stage_views(model, pair.chosen_seq, stage)
        vm = _stage_views(model, pair.rejected_seq, stage)
        at = vp if grad_at == "chosen" else vm
        grads, pi = _reward_view_grads(model, at)
        domain = pair.domain
        if domain not in sums:
            sums[domain] = {v: 0.0 for v in VIEW_NAMES}
            counts[domain] = {v: 0 for v in VIEW_NAMES}
            excluded[domain] = {v: 0 for v in VIEW_NAMES}
            pi_sum[domain] = np.zeros(3)
            n_pairs[domain] = 0
        pi_sum[domain] += pi
        n_pairs[domain] += 1
        for i, view in enumerate(VIEW_NAMES):
            cos = _cosine(grads[view], vp[i] - vm[i])
            if cos is None:
                excluded[domain][view] += 1
            else:
                sums[domain][view] += cos
                counts[domain][view] += 1

    per_view: dict[str, dict[str, float | None]] = {}
    gate_weighted: dict[str, float] = {}
    mean_pi: dict[str, list[float]] = {}
    for domain in sums:
        per_view[domain] = {
            v: (sums[domain][v] / counts[domain][v] if counts[domain][v] else None)
            for v in VIEW_NAMES
        }
        pis = pi_sum[domain] / n_pairs[domain]
        mean_pi[domain] = [float(x) for x in pis]
        gate_weighted[domain] = float(
            sum(
                pis[i] * per_view[domain][v]
                for i, v in enumerate(VIEW_NAMES)
                if per_view[domain][v] is not None
            )
        )
    return AlignmentReport(
        stage=stage,
        grad_at=grad_at,
        per_view=per_view,
        gate_weighted=gate_weighted,
        mean_pi=mean_pi,
        excluded=excluded,
        n_pairs=n_pairs,
    )


# ---------------------------------------------------------------------------
# ablations


@dataclass
class EvalReport:
    """Accuracy of one trained variant across the evaluation sets."""

    mode: str
    seed: int
    by_domain: dict[str, float]
    overall: float

    @property
    def macro(self) -> float:
        return sum(self.by_domain.values()) / len(self.by_domain)


def ablation_eval(
    train_pairs: Sequence[ResolvedPair],
    eval_sets: Mapping[str, Sequence[ResolvedPair]],
    cfg: TrainConfig,
    mode: str,
    out_dir: Path | str | None = None,
    base_model: RewardModel | None = None,
) -> tuple[TrainResult, EvalReport]:
    """Train one routing variant and score it on each evaluation set.

    Every variant sees the identical batch stream for a given seed, so mode
    comparisons isolate the architecture pathway. Single-view modes measure
    what one pooling readout extracts from representations that were learned
    without favoring it: they copy ``base_model``'s refinement stack, hold it
    fixed, and train only the fresh readout. That keeps the stack identical
    between the full run and its single-view probes; an end-to-end
    single-view run would instead let the stack reshape itself around the
    pooling handicap. ``no_refine`` and ``full`` train end to end.
    """
    if not eval_sets:
        raise ConfigError("ablation_eval needs at least one evaluation set")
    variant_cfg = replace(cfg, model=cfg.model.variant(mode))
    warm = None
    if mode in SINGLE_VIEW_MODES:
        if base_model is None:
            raise ConfigError(
                f"mode {mode!r} retrains only the readout on a fixed refinement "
                "stack; pass base_model (a trained full-mode model)"
            )
        donor_cfg = replace(base_model.cfg, route_mode=mode)
        if donor_cfg != variant_cfg.model:
            raise ConfigError(
                f"base_model architecture {base_model.cfg} does not match variant {variant_cfg.model}"
            )
        warm = {
            name: t.data.copy()
            for name, t in base_model.named_parameters()
            if name.startswith("refine.")
        }
        variant_cfg = replace(variant_cfg, freeze_refinement=True)
    elif base_model is not None:
        raise ConfigError("base_model applies only to single-view modes")
    result = train(train_pairs, variant_cfg, out_dir=out_dir, warm_start=warm)
    by_domain = {}
    credit = 0.0
    total = 0
    for name, eval_pairs in eval_sets.items():
        report = pairwise_accuracy(result.model, eval_pairs)
        by_domain[name] = report.overall
        credit += report.overall * report.n_pairs
        total += report.n_pairs
    return result, EvalReport(
        mode=mode, seed=cfg.seed, by_domain=by_domain, overall=credit / total
    )


def ablation_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text mode-by-domain accuracy table with a macro column."""
    if not reports:
        return "(no ablation results)"
    domains = list(reports[0].by_domain)
    header = "mode        seed" + "".join(f"{d:>13}" for d in domains) + f"{'macro':>10}"
    lines = [header]
    for rep in reports:
        cells = "".join(f"{rep.by_domain.get(d, float('nan')):>13.4f}" for d in domains)
        lines.append(f"{rep.mode:<12}{rep.seed:>4}{cells}{rep.macro:>10.4f}")
    return "\n".join(lines)


def emit_report(
    reports: Sequence[EvalReport],
    json_path: Path | str | None = None,
    txt_path: Path | str | None = None,
    csv_path: Path | str | None = None,
) -> None:
    """Write ablation results as JSON, a text table, and/or CSV."""
    rows = [
        {
            "mode": r.mode,
            "seed": r.seed,
            "by_domain": r.by_domain,
            "overall": r.overall,
            "macro": r.macro,
        }
        for r in reports
    ]
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    if txt_path is not None:
        Path(txt_path).write_text(ablation_table(reports) + "\n", encoding="utf-8")
    if csv_path is not None:
        domains = list(reports[0].by_domain) if reports else []
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mode", "seed", *domains, "overall", "macro"])
            for r in reports:
                writer.writerow(
                    [r.mode, r.seed, *(r.by_domain[d] for d in domains), r.overall, r.macro]
                )
