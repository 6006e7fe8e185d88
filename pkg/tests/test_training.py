"""Optimizer arithmetic, schedule, checkpoint format, and loop determinism."""

import json
import math
import struct
from dataclasses import replace

import numpy as np
import pytest

from adjudicator.aggregate import ModelConfig, RewardModel
from adjudicator.data import SyntheticSpec, generate_synthetic, resolve_pairs
from adjudicator.nn import ConfigError, wants_decay
from adjudicator.objective import LossConfig
from adjudicator.tensor import Tensor
from adjudicator.training import (
    ADAM_EPS,
    CheckpointError,
    NumericError,
    OptimizerState,
    TrainConfig,
    adamw_step,
    clip_global_norm,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

MODEL = ModelConfig(d=8, K=2, n_heads=2)


def tiny_dataset(regime="terminal", n_pairs=6, seed=0):
    spec = SyntheticSpec(regime=regime, d=8, n_pairs=n_pairs, prompt_len=(2, 3),
                         response_len=(4, 6), seed=seed)
    store, pairs = generate_synthetic(spec)
    return resolve_pairs(pairs, store)


def tiny_cfg(**kw):
    base = dict(model=MODEL, lr=1e-3, total_steps=12, batch_pairs=2,
                checkpoint_every=5, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# --- schedule and config --------------------------------------------------


def test_lr_warmup_ramp():
    cfg = tiny_cfg(total_steps=100, warmup_ratio=0.03, lr=2e-3)
    assert cfg.warmup_steps == 3
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1, cfg) == pytest.approx(2e-3 / 3.0, abs=1e-18)
    assert lr_at(2, cfg) == pytest.approx(4e-3 / 3.0, abs=1e-18)
    assert lr_at(3, cfg) == 2e-3
    assert lr_at(77, cfg) == 2e-3
    with pytest.raises(ConfigError):
        lr_at(-1, cfg)


def test_zero_warmup_means_full_lr_from_the_start():
    cfg = tiny_cfg(total_steps=10, warmup_ratio=0.04)  # rounds to 0 steps
    assert cfg.warmup_steps == 0
    assert lr_at(0, cfg) == cfg.lr


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(lr=0.0)
    with pytest.raises(ConfigError):
        tiny_cfg(beta2=1.0)
    with pytest.raises(ConfigError):
        tiny_cfg(weight_decay=-0.1)
    with pytest.raises(ConfigError):
        tiny_cfg(warmup_ratio=0.0)
    with pytest.raises(ConfigError):
        tiny_cfg(max_grad_norm=0.0)
    with pytest.raises(ConfigError):
        tiny_cfg(total_steps=-1)
    with pytest.raises(ConfigError):
        tiny_cfg(checkpoint_every=0)


# --- gradient clipping ----------------------------------------------------


def make_param(name, data, grad=None):
    t = Tensor(np.asarray(data, dtype=float), requires_grad=True)
    if grad is not None:
        t.grad = np.asarray(grad, dtype=float)
    return name, t


def test_clip_rescales_to_the_budget():
    params = [make_param("a.w", [0.0], grad=[3.0]), make_param("b.w", [0.0], grad=[4.0])]
    factor, norm = clip_global_norm(params, 2.5)
    assert norm == 5.0 and factor == 0.5
    assert params[0][1].grad[0] == 1.5 and params[1][1].grad[0] == 2.0


def test_clip_leaves_small_gradients_alone():
    params = [make_param("a.w", [0.0], grad=[0.3, 0.4]), make_param("c.b", [1.0])]
    factor, norm = clip_global_norm(params, 2.0)
    assert factor == 1.0 and norm == 0.5
    assert np.array_equal(params[0][1].grad, [0.3, 0.4])
    assert params[1][1].grad is None


def test_clip_rejects_non_finite_norm():
    params = [make_param("a.w", [0.0], grad=[float("inf")])]
    with pytest.raises(NumericError):
        clip_global_norm(params, 1.0)


# --- AdamW ----------------------------------------------------------------


def test_adamw_first_step_oracle():
    cfg = tiny_cfg(lr=0.01, beta1=0.9, beta2=0.95, weight_decay=0.1)
    params = [make_param("p.w", [1.0], grad=[0.5]), make_param("p.b", [1.0], grad=[0.5])]
    state = OptimizerState.init_for(params)
    adamw_step(params, state, lr=0.01, cfg=cfg)
    # by hand: m_hat = 0.5, v_hat = 0.25, adam term = 0.5 / (0.5 + eps)
    adam = 0.5 / (0.5 + ADAM_EPS)
    assert state.step == 1
    assert params[0][1].data[0] == pytest.approx(1.0 - 0.01 * (adam + 0.1 * 1.0), abs=1e-16)
    assert params[1][1].data[0] == pytest.approx(1.0 - 0.01 * adam, abs=1e-16)  # no decay on bias


def test_adamw_missing_grad_still_decays():
    cfg = tiny_cfg(lr=0.01, weight_decay=0.1)
    params = [make_param("p.w", [1.0])]
    state = OptimizerState.init_for(params)
    adamw_step(params, state, lr=0.01, cfg=cfg)
    assert params[0][1].data[0] == pytest.approx(0.999, abs=1e-15)
    # moments stay at zero when they started there and no grad arrived
    assert state.m["p.w"][0] == 0.0 and state.v["p.w"][0] == 0.0


def test_adamw_moments_decay_without_grad():
    cfg = tiny_cfg(lr=0.01, weight_decay=0.0, beta1=0.5, beta2=0.5)
    params = [make_param("p.g", [2.0], grad=[1.0])]
    state = OptimizerState.init_for(params)
    adamw_step(params, state, lr=0.0, cfg=cfg)  # lr 0: only moments move
    assert state.m["p.g"][0] == 0.5 and state.v["p.g"][0] == 0.5
    params[0][1].grad = None
    adamw_step(params, state, lr=0.0, cfg=cfg)
    assert state.m["p.g"][0] == 0.25 and state.v["p.g"][0] == 0.25


def test_decay_targets_projection_weights_only():
    assert wants_decay("refine.block0.attn.q.w")
    assert not wants_decay("refine.block0.attn.q.b")
    assert not wants_decay("refine.block0.ln1.g")


# --- the loop -------------------------------------------------------------


def test_training_is_deterministic():
    data = tiny_dataset()
    a = train(data, tiny_cfg())
    b = train(data, tiny_cfg())
    for (name_a, pa), (_, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(pa.data, pb.data), name_a
    assert a.metrics == b.metrics


def test_metrics_schema_and_progression():
    data = tiny_dataset()
    res = train(data, tiny_cfg(total_steps=6))
    assert [m["step"] for m in res.metrics] == list(range(1, 7))
    for m in res.metrics:
        assert set(m) == {"step", "loss", "mean_p", "mean_entropy", "lr",
                          "grad_norm", "alpha_mean", "pi_mean"}
        assert m["loss"] > 0.0 and math.isfinite(m["grad_norm"])
        assert len(m["pi_mean"]) == 3
        assert len(m["alpha_mean"]) == MODEL.K


def test_no_refine_runs_log_empty_alpha():
    data = tiny_dataset()
    cfg = tiny_cfg(model=MODEL.variant("no_refine"), total_steps=2)
    res = train(data, cfg)
    assert res.metrics[0]["alpha_mean"] == []


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError, match="empty"):
        train([], tiny_cfg())


def test_zero_steps_writes_final_checkpoint_only(tmp_path):
    data = tiny_dataset()
    res = train(data, tiny_cfg(total_steps=0), out_dir=tmp_path)
    assert res.metrics == []
    assert (tmp_path / "ckpt-final.adjc").exists()
    assert not list(tmp_path.glob("ckpt-0*.adjc"))


def test_metrics_jsonl_matches_returned_metrics(tmp_path):
    data = tiny_dataset()
    res = train(data, tiny_cfg(total_steps=4), out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(ln) for ln in lines] == res.metrics


# --- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    data = tiny_dataset()
    res = train(data, tiny_cfg(total_steps=7), out_dir=tmp_path)
    model, state = load_checkpoint(tmp_path / "ckpt-final.adjc", expect=MODEL)
    assert state.step == 7
    for (name, orig), (_, back) in zip(res.model.named_parameters(), model.named_parameters()):
        assert np.array_equal(orig.data, back.data), name
        assert np.array_equal(res.state.m[name], state.m[name])
        assert np.array_equal(res.state.v[name], state.v[name])
    seq = data[0].chosen_seq
    assert model.forward(seq).reward.data == res.model.forward(seq).reward.data


def test_resume_matches_uninterrupted_run(tmp_path):
    data = tiny_dataset()
    full = train(data, tiny_cfg(), out_dir=tmp_path / "full")
    partial_dir = tmp_path / "partial"
    train(data, tiny_cfg(), out_dir=partial_dir)
    resumed = train(data, tiny_cfg(), resume_from=partial_dir / "ckpt-000010.adjc")
    assert resumed.state.step == 12
    for (name, pa), (_, pb) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(pa.data, pb.data), name
    assert [m["step"] for m in resumed.metrics] == [11, 12]
    assert resumed.metrics == full.metrics[10:]


def test_resume_beyond_total_steps_rejected(tmp_path):
    data = tiny_dataset()
    train(data, tiny_cfg(), out_dir=tmp_path)
    with pytest.raises(ConfigError, match="beyond total_steps"):
        train(data, tiny_cfg(total_steps=5), resume_from=tmp_path / "ckpt-final.adjc")


def test_load_rejects_architecture_mismatch(tmp_path):
    data = tiny_dataset()
    train(data, tiny_cfg(total_steps=1), out_dir=tmp_path)
    other = ModelConfig(d=8, K=3, n_heads=2)
    with pytest.raises(CheckpointError, match="refusing to load"):
        load_checkpoint(tmp_path / "ckpt-final.adjc", expect=other)


def test_loader_rejects_malformed_files(tmp_path):
    data = tiny_dataset()
    train(data, tiny_cfg(total_steps=1), out_dir=tmp_path)
    blob = (tmp_path / "ckpt-final.adjc").read_bytes()

    bad_magic = tmp_path / "magic.adjc"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "version.adjc"
    bad_version.write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        load_checkpoint(bad_version)

    truncated = tmp_path / "trunc.adjc"
    truncated.write_bytes(blob[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    # cut cleanly before the trailing opt/step record (stored rank-1, so
    # header + name + rank + one dim + payload): parses, but incomplete
    tail = 2 + len(b"opt/step") + 1 + 4 + 8
    missing = tmp_path / "missing.adjc"
    missing.write_bytes(blob[:-tail])
    with pytest.raises(CheckpointError, match="missing record 'opt/step'"):
        load_checkpoint(missing)

    # a stray record the architecture does not expect
    extra = tmp_path / "extra.adjc"
    name = b"mystery"
    record = struct.pack("<H", len(name)) + name + struct.pack("B", 0) + struct.pack("<d", 1.0)
    extra.write_bytes(blob + record)
    with pytest.raises(CheckpointError, match="unexpected record"):
        load_checkpoint(extra)

    duplicate = tmp_path / "dup.adjc"
    duplicate.write_bytes(blob + record + record)
    with pytest.raises(CheckpointError, match="duplicate record"):
        load_checkpoint(duplicate)


# --- warm start and frozen stack -------------------------------------------


def test_warm_start_validation():
    data = tiny_dataset()
    with pytest.raises(ConfigError, match="unknown parameter"):
        train(data, tiny_cfg(total_steps=1), warm_start={"nope.w": np.zeros(3)})
    with pytest.raises(ConfigError, match="dims"):
        train(data, tiny_cfg(total_steps=1), warm_start={"router.fc2.b": np.zeros(7)})


def test_warm_start_seeds_the_named_parameters():
    data = tiny_dataset()
    donor = RewardModel.create(MODEL, seed=99)
    wanted = {n: t.data.copy() for n, t in donor.named_parameters() if n.startswith("refine.")}
    res = train(data, tiny_cfg(total_steps=0), warm_start=wanted)
    got = dict(res.model.named_parameters())
    for name, arr in wanted.items():
        assert np.array_equal(got[name].data, arr), name


def test_frozen_stack_keeps_donor_weights_and_trains_heads():
    data = tiny_dataset()
    donor = train(data, tiny_cfg(total_steps=4)).model
    warm = {n: t.data.copy() for n, t in donor.named_parameters() if n.startswith("refine.")}
    cfg = tiny_cfg(total_steps=6, freeze_refinement=True)
    res = train(data, cfg, warm_start=warm)
    fresh = RewardModel.create(cfg.model, cfg.seed)
    for name, t in res.model.named_parameters():
        if name.startswith("refine."):
            assert np.array_equal(t.data, warm[name]), name
            assert not state_moved(res.state, name)
    head_moved = any(
        not np.array_equal(t.data, dict(fresh.named_parameters())[name].data)
        for name, t in res.model.named_parameters()
        if name.startswith(("head_", "router.", "attn_pool."))
    )
    assert head_moved


def state_moved(state, name):
    return state.m[name].any() or state.v[name].any()


def test_freeze_flag_is_inert_without_refinement():
    data = tiny_dataset()
    cfg = tiny_cfg(model=MODEL.variant("no_refine"), total_steps=2, freeze_refinement=True)
    res = train(data, cfg)
    assert res.state.step == 2


def test_overflowing_run_aborts_with_numeric_error(tmp_path):
    # a pathological bias makes one view's score astronomically large; the
    # loss itself cancels it but the router's gradient overflows on the
    # first step, which must surface as NumericError, not silent inf
    data = tiny_dataset()
    fresh = dict(RewardModel.create(MODEL, seed=0).named_parameters())
    poison = {"head_last.fc2.b": np.full_like(fresh["head_last.fc2.b"].data, 1.7e308)}
    with pytest.raises(NumericError, match="non-finite"), np.errstate(over="ignore"):
        train(data, tiny_cfg(), out_dir=tmp_path, warm_start=poison)
    assert not (tmp_path / "ckpt-final.adjc").exists()
