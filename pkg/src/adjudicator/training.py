"""Training loop: AdamW with linear warmup, global-norm clipping, periodic
binary checkpoints, and a JSON-lines metrics log.

Everything here is deterministic for a fixed seed: model init, batch order
(a pure function of seed and epoch), and the optimizer arithmetic. Resuming
from a checkpoint replays the batch stream up to the stored step, so a
resumed run continues bit-for-bit where the original would have gone.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .aggregate import ModelConfig, RewardModel, ROUTE_MODES
from .data import ResolvedPair, batch_iter
from .nn import ConfigError, wants_decay
from .objective import LossConfig, pair_loss
from .tensor import Tape, Tensor, add, scale, tape_paused

__all__ = [
    "NumericError",
    "CheckpointError",
    "TrainConfig",
    "TrainResult",
    "OptimizerState",
    "lr_at",
    "clip_global_norm",
    "adamw_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"ADJC"
CKPT_VERSION = 1
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """Training hit a non-finite value and aborted."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with expectations."""


@dataclass
class TrainConfig:
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    max_grad_norm: float = 2.0
    batch_pairs: int = 8
    total_steps: int = 1000
    checkpoint_every: int = 25
    seed: int = 0
    # hold the refinement stack fixed and train only pooling heads and
    # router (readout-only training on top of an already-trained stack)
    freeze_refinement: bool = False

    def __post_init__(self):
        if not self.lr > 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for label, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{label} must be in [0, 1), got {b}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if not self.max_grad_norm > 0.0:
            raise ConfigError(f"max_grad_norm must be positive, got {self.max_grad_norm}")
        if self.batch_pairs < 1:
            raise ConfigError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_ratio * self.total_steps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to ``cfg.lr`` over the warmup steps, constant after."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    warmup = cfg.warmup_steps
    if warmup <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / warmup)


@dataclass
class OptimizerState:
    """First and second moments per parameter name, plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init_for(cls, params: Sequence[tuple[str, Tensor]]) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params},
            v={name: np.zeros_like(t.data) for name, t in params},
        )


def clip_global_norm(
    params: Sequence[tuple[str, Tensor]], max_norm: float
) -> tuple[float, float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns (scale factor applied, pre-clip global norm). Parameters whose
    gradient is None count as zero.
    """
    sq = 0.0
    for _, t in params:
        if t.grad is not None:
            sq += float((t.grad * t.grad).sum())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        factor = max_norm / norm
        for _, t in params:
            if t.grad is not None:
                t.grad *= factor
    else:
        factor = 1.0
    return factor, norm


def adamw_step(
    params: Sequence[tuple[str, Tensor]],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    Decay applies only to projection weights (``wants_decay``), never to
    biases or layer-norm gains. A missing gradient is treated as zero, so
    unused pathways still see moment decay and weight decay.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        v *= cfg.beta2
        if g is not None:
            m += (1.0 - cfg.beta1) * g
            v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if cfg.weight_decay != 0.0 and wants_decay(name):
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update


# ---------------------------------------------------------------------------
# checkpoints


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def _cfg_records(cfg: ModelConfig) -> dict[str, float]:
    return {
        "cfg/d": float(cfg.d),
        "cfg/K": float(cfg.K),
        "cfg/n_heads": float(cfg.n_heads),
        "cfg/ffn_hidden": float(cfg.ffn_hidden),
        "cfg/head_hidden": float(cfg.head_hidden),
        "cfg/router_hidden": float(cfg.router_hidden),
        "cfg/route_mode": float(ROUTE_MODES.index(cfg.route_mode)),
        "cfg/use_refinement": float(cfg.use_refinement),
        "cfg/causal_attention": float(cfg.causal_attention),
    }


def save_checkpoint(model: RewardModel, state: OptimizerState, path: Path | str) -> Path:
    """Write model parameters, optimizer moments, and the architecture
    shape as 64-bit little-endian records. Round-trips bit-exactly."""
    path = Path(path)
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, value in _cfg_records(model.cfg).items():
            _write_record(fh, name, np.asarray(value))
        for name, t in params:
            _write_record(fh, name, t.data)
        for name, t in params:
            _write_record(fh, f"opt/m/{name}", state.m[name])
        for name, t in params:
            _write_record(fh, f"opt/v/{name}", state.v[name])
        _write_record(fh, "opt/step", np.asarray(float(state.step)))
    return path


def _read_records(path: Path) -> dict[str, np.ndarray]:
    blob = path.read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated reading {what} at offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    records: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<H", take(2, "record name length"))
        name = take(name_len, "record name").decode("utf-8")
        (rank,) = struct.unpack("B", take(1, f"{name} rank"))
        dims = tuple(
            struct.unpack("<I", take(4, f"{name} dim {i}"))[0] for i in range(rank)
        )
        count = 1
        for dim in dims:
            count *= dim
        payload = take(8 * count, f"{name} payload")
        if name in records:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return records


def _cfg_from_records(records: dict[str, np.ndarray], path: Path) -> ModelConfig:
    def scalar(name: str) -> float:
        if name not in records:
            raise CheckpointError(f"{path}: missing record {name!r}")
        return float(records[name].reshape(()))

    return ModelConfig(
        d=int(scalar("cfg/d")),
        K=int(scalar("cfg/K")),
        n_heads=int(scalar("cfg/n_heads")),
        ffn_hidden=int(scalar("cfg/ffn_hidden")),
        head_hidden=int(scalar("cfg/head_hidden")),
        router_hidden=int(scalar("cfg/router_hidden")),
        route_mode=ROUTE_MODES[int(scalar("cfg/route_mode"))],
        use_refinement=bool(scalar("cfg/use_refinement")),
        causal_attention=bool(scalar("cfg/causal_attention")),
    )


def load_checkpoint(
    path: Path | str, expect: ModelConfig | None = None
) -> tuple[RewardModel, OptimizerState]:
    """Rebuild the model and optimizer state stored at ``path``.

    With ``expect`` given, any architecture mismatch is rejected before a
    single parameter is touched (no partial loads).
    """
    path = Path(path)
    records = _read_records(path)
    cfg = _cfg_from_records(records, path)
    if expect is not None and cfg != expect:
        raise CheckpointError(
            f"{path}: stored architecture {cfg} does not match expected {expect}; refusing to load"
        )
    model = RewardModel(cfg, rng=None)
    params = model.named_parameters()
    state = OptimizerState(m={}, v={}, step=0)
    expected_names = {"opt/step"} | set(_cfg_records(cfg))
    for name, t in params:
        expected_names.update((name, f"opt/m/{name}", f"opt/v/{name}"))
        for key in (name, f"opt/m/{name}", f"opt/v/{name}"):
            if key not in records:
                raise CheckpointError(f"{path}: missing record {key!r}")
            if records[key].shape != t.data.shape:
                raise CheckpointError(
                    f"{path}: record {key!r} has dims {records[key].shape}, expected {t.data.shape}"
                )
        t.data = records[name]
        state.m[name] = records[f"opt/m/{name}"]
        state.v[name] = records[f"opt/v/{name}"]
    if "opt/step" not in records:
        raise CheckpointError(f"{path}: missing record 'opt/step'")
    state.step = int(records["opt/step"].reshape(()))
    stray = set(records) - expected_names
    if stray:
        raise CheckpointError(f"{path}: unexpected record(s) {sorted(stray)}")
    return model, state


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: RewardModel
    state: OptimizerState
    metrics: list[dict]
    out_dir: Path | None = None


def _apply_warm_start(model: RewardModel, warm_start: Mapping[str, np.ndarray]) -> None:
    by_name = dict(model.named_parameters())
    for name, arr in warm_start.items():
        if name not in by_name:
            raise ConfigError(f"warm_start names unknown parameter {name!r}")
        target = by_name[name]
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != target.data.shape:
            raise ConfigError(
                f"warm_start value for {name!r} has dims {arr.shape}, expected {target.data.shape}"
            )
        target.data = arr.copy()


def _batch_stream(pairs: Sequence[ResolvedPair], batch_pairs: int, seed: int) -> Iterator[list]:
    epoch = 0
    while True:
        for batch in batch_iter(pairs, batch_pairs, seed, epoch):
            yield batch
        epoch += 1


def train(
    dataset: Sequence[ResolvedPair],
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    resume_from: Path | str | None = None,
    warm_start: Mapping[str, np.ndarray] | None = None,
) -> TrainResult:
    """Train a reward model on resolved preference pairs.

    Writes ``metrics.jsonl`` plus periodic and final checkpoints when
    ``out_dir`` is given. Aborts with NumericError on a non-finite loss,
    leaving the last periodic checkpoint in place.

    ``warm_start`` maps parameter names to arrays copied into a freshly
    created model before the first step (ignored on resume, where the
    checkpoint already holds them). With ``cfg.freeze_refinement`` the stack
    runs off-tape, its output is cached per sequence, and only readout
    parameters are stepped; warm-starting ``refine.*`` from a trained model
    then reproduces that model's representations exactly.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        model, state = load_checkpoint(resume_from, expect=cfg.model)
        if state.step > cfg.total_steps:
            raise ConfigError(
                f"checkpoint is at step {state.step}, beyond total_steps {cfg.total_steps}"
            )
    else:
        model = RewardModel.create(cfg.model, cfg.seed)
        state = OptimizerState.init_for(model.named_parameters())
        if warm_start is not None:
            _apply_warm_start(model, warm_start)

    params = model.named_parameters()
    freeze = cfg.freeze_refinement and cfg.model.use_refinement
    if freeze:
        trainable = [(n, t) for n, t in params if not n.startswith("refine.")]
    else:
        trainable = params
    refined_cache: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def run_forward(seq):
        if not freeze:
            return model.forward(seq)
        cached = refined_cache.get(id(seq))
        if cached is None:
            with tape_paused():
                refined_t, alpha_t = model.refined_states(seq)
            cached = (refined_t.data, None if alpha_t is None else alpha_t.data)
            refined_cache[id(seq)] = cached
        refined_arr, alpha_arr = cached
        alpha = None if alpha_arr is None else Tensor(alpha_arr)
        return model.forward_from(seq, Tensor(refined_arr), alpha)

    stream = _batch_stream(dataset, cfg.batch_pairs, cfg.seed)
    for _ in range(state.step):
        next(stream)

    metrics: list[dict] = []
    log_fh = None
    if out_dir is not None:
        log_fh = open(out_dir / "metrics.jsonl", "a" if resume_from else "w", encoding="utf-8")
    try:
        while state.step < cfg.total_steps:
            batch = next(stream)
            records = []
            with Tape() as tape:
                total = None
                for pair in batch:
                    out_plus = run_forward(pair.chosen_seq)
                    out_minus = run_forward(pair.rejected_seq)
                    breakdown = pair_loss(out_plus, out_minus, pair.magnitude, cfg.loss)
                    records.append((out_plus, out_minus, breakdown))
                    total = breakdown.total if total is None else add(total, breakdown.total)
                total = scale(total, 1.0 / len(batch))
                loss_value = total.item()
                if not math.isfinite(loss_value):
                    raise NumericError(
                        f"non-finite loss at step {state.step + 1}; last checkpoint retained"
                    )
                tape.backward(total)
            factor, grad_norm = clip_global_norm(trainable, cfg.max_grad_norm)
            lr = lr_at(state.step + 1, cfg)
            adamw_step(trainable, state, lr, cfg)
            for _, t in params:
                t.grad = None

            entry = _metrics_entry(state.step, loss_value, lr, grad_norm, records)
            metrics.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if out_dir is not None and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(model, state, out_dir / f"ckpt-{state.step:06d}.adjc")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(model, state, out_dir / "ckpt-final.adjc")
    return TrainResult(model=model, state=state, metrics=metrics, out_dir=out_dir)


def _metrics_entry(step, loss_value, lr, grad_norm, records) -> dict:
    ps = [b.p for _, _, b in records]
    ents = []
    pis = []
    alphas = []
    for out_plus, out_minus, breakdown in records:
        ents.extend((breakdown.entropy_chosen, breakdown.entropy_rejected))
        pis.extend((out_plus.pi.data, out_minus.pi.data))
        if out_plus.alpha is not None:
            alphas.extend((out_plus.alpha.data, out_minus.alpha.data))
    return {
        "step": step,
        "loss": loss_value,
        "mean_p": float(np.mean(ps)),
        "mean_entropy": float(np.mean(ents)),
        "lr": lr,
        "grad_norm": grad_norm,
        "alpha_mean": [float(x) for x in np.mean(alphas, axis=0)] if alphas else [],
        "pi_mean": [float(x) for x in np.mean(pis, axis=0)],
    }
