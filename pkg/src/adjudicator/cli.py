"""Command-line interface.

Subcommands:
  gen        generate a synthetic preference dataset
  train      train a reward model on one or more datasets
  eval       score a checkpoint on evaluation data
  ablate     train and compare routing variants
  analyze    routing profile and view-alignment diagnostics
  gradcheck  verify tape gradients against finite differences

Exit codes: 0 on success, 1 on a validation problem (bad flags, malformed
config or data files), 2 on a numeric failure (non-finite values, failed
gradient check). Evaluation parallelism is controlled by the
ADJUDICATOR_EVAL_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aggregate import ModelConfig, RewardModel, ROUTE_MODES, SINGLE_VIEW_MODES
from .data import (
    ManifestError,
    REGIMES,
    ResolvedPair,
    StoreFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .evaluate import (
    ablation_eval,
    ablation_table,
    alignment_score,
    emit_report,
    pairwise_accuracy,
    routing_profile,
)
from .nn import ConfigError
from .objective import LossConfig, pair_loss
from .refine import SequenceError, TokenSequence
from .tensor import DomainError, ShapeError, Tensor, UsageError, finite_diff_check
from .training import (
    CheckpointError,
    NumericError,
    TrainConfig,
    load_checkpoint,
    train,
)

__all__ = ["main", "build_parser", "load_config", "build_train_config"]

ABLATION_MODES = ("full", "no_refine", "last_only", "mean_only", "attn_only")

_MODEL_DEFAULTS = {
    "d": 32,
    "K": 3,
    "n_heads": 4,
    "ffn_hidden": None,
    "head_hidden": None,
    "router_hidden": None,
    "route_mode": "full",
    "use_refinement": True,
    "causal_attention": False,
}
_LOSS_DEFAULTS = {
    "temperature": 1.3,
    "gamma": 0.9,
    "entropy_coef": 0.01,
    "target_entropy": 0.7,
    "entropy_on": "both",
}
_TRAIN_DEFAULTS = {
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.95,
    "weight_decay": 0.1,
    "warmup_ratio": 0.03,
    "max_grad_norm": 2.0,
    "batch_pairs": 8,
    "total_steps": 1000,
    "checkpoint_every": 25,
    "freeze_refinement": False,
}
_SYNTH_DEFAULTS = {
    "regime": "terminal",
    "d": 32,
    "n_pairs": 1000,
    "prompt_len": [4, 8],
    "response_len": [10, 20],
    "signal_strength": 2.5,
    "noise_std": 1.0,
    "seed": 0,
}


def _merge_section(name: str, defaults: dict, supplied) -> dict:
    if not isinstance(supplied, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(supplied) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in config section {name!r}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(supplied)
    return merged


def load_config(path: Path | str | None) -> dict:
    """Merge a JSON config file over the built-in defaults.

    Recognized sections: seed, model, loss, train, data, synthetic. Unknown
    sections or keys are rejected rather than ignored.
    """
    supplied: dict = {}
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
        try:
            supplied = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(supplied, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    known = {"seed", "model", "loss", "train", "data", "synthetic"}
    unknown = set(supplied) - known
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    seed = supplied.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"config 'seed' must be an integer, got {seed!r}")
    data = supplied.get("data", {})
    if not isinstance(data, dict):
        raise ConfigError("config section 'data' must be an object")
    unknown = set(data) - {"train", "eval"}
    if unknown:
        raise ConfigError(f"unknown key(s) in config section 'data': {sorted(unknown)}")
    return {
        "seed": seed,
        "model": _merge_section("model", _MODEL_DEFAULTS, supplied.get("model", {})),
        "loss": _merge_section("loss", _LOSS_DEFAULTS, supplied.get("loss", {})),
        "train": _merge_section("train", _TRAIN_DEFAULTS, supplied.get("train", {})),
        "data": data,
        "synthetic": _merge_section("synthetic", _SYNTH_DEFAULTS, supplied.get("synthetic", {})),
    }


def build_train_config(cfg: dict) -> TrainConfig:
    model = ModelConfig(**cfg["model"])
    loss = LossConfig(**cfg["loss"])
    return TrainConfig(model=model, loss=loss, seed=cfg["seed"], **cfg["train"])


def _resolved_config(tcfg: TrainConfig, data: dict) -> dict:
    out = {
        "seed": tcfg.seed,
        "model": dataclasses.asdict(tcfg.model),
        "loss": dataclasses.asdict(tcfg.loss),
        "train": {
            k: getattr(tcfg, k)
            for k in (
                "lr",
                "beta1",
                "beta2",
                "weight_decay",
                "warmup_ratio",
                "max_grad_norm",
                "batch_pairs",
                "total_steps",
                "checkpoint_every",
                "freeze_refinement",
            )
        },
        "data": data,
    }
    return out


def _load_many(paths: Sequence[str]) -> list[ResolvedPair]:
    pairs: list[ResolvedPair] = []
    for p in paths:
        pairs.extend(load_dataset(p))
    if not pairs:
        raise ConfigError("no pairs found in the given dataset(s)")
    return pairs


def _group_by_domain(pairs: Sequence[ResolvedPair]) -> dict[str, list[ResolvedPair]]:
    groups: dict[str, list[ResolvedPair]] = {}
    for pair in pairs:
        groups.setdefault(pair.domain, []).append(pair)
    return groups


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen(args) -> int:
    cfg = load_config(args.config)
    section = dict(cfg["synthetic"])
    for key in ("regime", "d", "n_pairs", "seed", "signal_strength", "noise_std"):
        flag = getattr(args, key)
        if flag is not None:
            section[key] = flag
    for key in ("prompt_len", "response_len"):
        flag = getattr(args, key)
        if flag is not None:
            section[key] = flag
    section["prompt_len"] = tuple(section["prompt_len"])
    section["response_len"] = tuple(section["response_len"])
    spec = SyntheticSpec(**section)
    store, pairs = generate_synthetic(spec)
    out = save_dataset(store, pairs, args.out)
    stamp = dataclasses.asdict(spec)
    (out / "generator.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(pairs)} {spec.regime} pairs ({len(store)} sequences, d={spec.d}) to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("lr", "total_steps", "batch_pairs"):
        flag = getattr(args, key)
        if flag is not None:
            cfg["train"][key] = flag
    if args.mode is not None:
        base = ModelConfig(**cfg["model"])
        cfg["model"] = dataclasses.asdict(base.variant(args.mode))
    if args.freeze_stack:
        cfg["train"]["freeze_refinement"] = True
    warm = None
    if args.stack_from is not None:
        donor, _ = load_checkpoint(args.stack_from)
        warm = {
            name: t.data.copy()
            for name, t in donor.named_parameters()
            if name.startswith("refine.")
        }
    data_paths = list(args.data or [])
    if not data_paths:
        train_entry = cfg["data"].get("train")
        if isinstance(train_entry, str):
            data_paths = [train_entry]
        elif isinstance(train_entry, list):
            data_paths = list(train_entry)
    if not data_paths:
        raise ConfigError("no training data: pass --data or set data.train in the config")
    tcfg = build_train_config(cfg)
    pairs = _load_many(data_paths)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = _resolved_config(tcfg, {"train": data_paths})
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    result = train(pairs, tcfg, out_dir=out_dir, resume_from=args.resume, warm_start=warm)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(
            f"trained {tcfg.total_steps} steps on {len(pairs)} pairs: "
            f"loss {last['loss']:.4f}, mean p {last['mean_p']:.4f}"
        )
    print(f"run artifacts in {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    pairs = _load_many(args.data)
    report = pairwise_accuracy(model, pairs)
    print(report.format())
    if args.json is not None:
        payload = {
            "overall": report.overall,
            "by_domain": report.by_domain,
            "n_pairs": report.n_pairs,
            "n_by_domain": report.n_by_domain,
        }
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    modes = args.modes.split(",") if args.modes else list(ABLATION_MODES)
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ConfigError(f"unknown mode {mode!r}; choose from {ABLATION_MODES}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    train_paths = list(args.train_data or [])
    if not train_paths:
        entry = cfg["data"].get("train")
        train_paths = [entry] if isinstance(entry, str) else list(entry or [])
    eval_paths = list(args.eval_data or [])
    if not eval_paths:
        entry = cfg["data"].get("eval")
        eval_paths = [entry] if isinstance(entry, str) else list(entry or [])
    if not train_paths or not eval_paths:
        raise ConfigError("ablate needs training and evaluation data (flags or config data section)")
    train_pairs = _load_many(train_paths)
    eval_sets = _group_by_domain(_load_many(eval_paths))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    needs_base = any(m in SINGLE_VIEW_MODES for m in modes)
    for seed in seeds:
        run_cfg = dict(cfg, seed=seed)
        tcfg = build_train_config(run_cfg)
        # single-view probes share the full run's trained stack, so the full
        # run goes first (and happens even when not asked for, as a donor)
        ordered = [m for m in modes if m == "full"] + [m for m in modes if m != "full"]
        base_model = None
        if needs_base and "full" not in modes:
            print(f"full seed={seed}: training donor stack for single-view probes")
            donor, _ = ablation_eval(
                train_pairs, eval_sets, tcfg, "full", out_dir=out_dir / f"full-seed{seed}"
            )
            base_model = donor.model
        for mode in ordered:
            run_dir = out_dir / f"{mode}-seed{seed}"
            result, report = ablation_eval(
                train_pairs,
                eval_sets,
                tcfg,
                mode,
                out_dir=run_dir,
                base_model=base_model if mode in SINGLE_VIEW_MODES else None,
            )
            if mode == "full":
                base_model = result.model
            reports.append(report)
            cells = "  ".join(f"{d}={v:.4f}" for d, v in report.by_domain.items())
            print(f"{mode} seed={seed}: {cells}  macro={report.macro:.4f}")
    emit_report(
        reports,
        json_path=out_dir / "ablation.json",
        txt_path=out_dir / "ablation.txt",
        csv_path=out_dir / "ablation.csv",
    )
    print()
    print(ablation_table(reports))
    print(f"reports in {out_dir}")
    return 0


def _cmd_analyze(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    pairs = _load_many(args.data)
    profile = routing_profile(model, pairs)
    before = alignment_score(model, pairs, stage="before", grad_at=args.grad_at)
    after = alignment_score(model, pairs, stage="after", grad_at=args.grad_at)
    print("routing profile (mean weights over chosen responses)")
    print(profile.format())
    print()
    print(before.format())
    print()
    print(after.format())
    if args.json is not None:
        payload = {
            "routing_profile": {"per_domain": profile.per_domain, "n_pairs": profile.n_pairs},
            "alignment": {
                stage.stage: {
                    "per_view": stage.per_view,
                    "gate_weighted": stage.gate_weighted,
                    "mean_pi": stage.mean_pi,
                    "excluded": stage.excluded,
                }
                for stage in (before, after)
            },
        }
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _gradcheck_setup(args):
    rng = np.random.default_rng(args.seed)
    d = args.d
    model_cfg = ModelConfig(d=d, K=args.K, n_heads=args.n_heads)
    model = RewardModel.create(model_cfg, args.seed)
    # Check at a generic random point. The fresh-init state is useless for
    # finite differences: its zero-initialized residual and router outputs
    # make whole pathways first-order flat, so the quotient of a near-zero
    # derivative and ordinary curvature is all truncation noise.
    for name, t in model.named_parameters():
        t.data = rng.normal(scale=0.3, size=t.data.shape)
        if name.endswith(".g"):
            t.data += 1.0
    loss_cfg = LossConfig()
    prompt = rng.normal(size=(args.prompt_len, d))
    total = args.length - args.prompt_len
    if total < 1:
        raise ConfigError("length must leave at least one response token after the prompt")
    chosen = TokenSequence.from_parts(prompt, rng.normal(size=(total, d)))
    rejected = TokenSequence.from_parts(prompt, rng.normal(size=(total, d)))

    def f() -> Tensor:
        out_plus = model.forward(chosen)
        out_minus = model.forward(rejected)
        return pair_loss(out_plus, out_minus, args.magnitude, loss_cfg).total

    return model, f


def _cmd_gradcheck(args) -> int:
    model, f = _gradcheck_setup(args)
    params = model.named_parameters()
    restore = None
    if args.corrupt is not None:
        names = [n for n, _ in params]
        if args.corrupt not in names:
            raise ConfigError(f"--corrupt: no parameter named {args.corrupt!r} (have {names})")
        target = dict(params)[args.corrupt]
        original = Tensor._accumulate

        def tampered(self, g):
            if self is target:
                g = np.asarray(g) * 1.5 + 0.01
            original(self, g)

        Tensor._accumulate = tampered
        restore = original
    try:
        report = finite_diff_check(f, params, step=args.step, tolerance=args.tolerance)
    finally:
        if restore is not None:
            Tensor._accumulate = restore
    print(report.format())
    return 0 if report.passed else 2


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; this project reserves 2 for numeric
    failures, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adjudicator", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic preference dataset")
    p.add_argument("--config", help="JSON config supplying the synthetic section")
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--d", type=int)
    p.add_argument("--n-pairs", dest="n_pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--signal", dest="signal_strength", type=float)
    p.add_argument("--noise", dest="noise_std", type=float)
    p.add_argument("--prompt-len", dest="prompt_len", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--response-len", dest="response_len", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(handler=_cmd_gen)

    p = sub.add_parser("train", help="train a reward model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", nargs="+", help="dataset dir(s); overrides config data.train")
    p.add_argument("--out", required=True, help="run directory for config, metrics, checkpoints")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", dest="total_steps", type=int)
    p.add_argument("--batch-pairs", dest="batch_pairs", type=int)
    p.add_argument("--mode", choices=ABLATION_MODES, help="routing variant to train")
    p.add_argument(
        "--stack-from",
        metavar="CKPT",
        help="copy the refinement stack from this checkpoint before training",
    )
    p.add_argument(
        "--freeze-stack",
        action="store_true",
        help="hold the refinement stack fixed; train readout parameters only",
    )
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", nargs="+", required=True, help="evaluation dataset dir(s)")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare routing variants")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--train-data", nargs="+", help="training dataset dir(s)")
    p.add_argument("--eval-data", nargs="+", help="evaluation dataset dir(s)")
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(ABLATION_MODES)}")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--out", required=True, help="output directory for runs and reports")
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("analyze", help="routing profile and alignment diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", nargs="+", required=True, help="dataset dir(s) to analyze")
    p.add_argument("--grad-at", dest="grad_at", choices=("chosen", "rejected"), default="chosen")
    p.add_argument("--json", help="also write the analysis as JSON")
    p.set_defaults(handler=_cmd_analyze)

    p = sub.add_parser("gradcheck", help="verify gradients with finite differences")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=2)
    p.add_argument("--length", type=int, default=12)
    p.add_argument("--prompt-len", dest="prompt_len", type=int, default=4)
    p.add_argument("--magnitude", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="PARAM", help="tamper with one parameter's gradient (self-test)")
    p.set_defaults(handler=_cmd_gradcheck)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (NumericError, DomainError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except (
        ConfigError,
        ManifestError,
        StoreFormatError,
        CheckpointError,
        SequenceError,
        ShapeError,
        UsageError,
        ValueError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
