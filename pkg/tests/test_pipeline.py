"""Staged training, checkpoints, determinism, and evaluation."""

import copy
import csv
import os

import numpy as np
import pytest

from ddmc.datagen import Dataset, build_dataset
from ddmc.errors import (CheckpointIntegrityError, StageOrderError,
                         TruncatedFileError, ValidationError)
from ddmc.pipeline import (Checkpoint, RunLog, StagePlan, StageSettings,
                           cell_name, check_stage_order, evaluate,
                           run_ablation, train_all, train_stage)


def tiny_plan(**kw):
    settings = {s: StageSettings(max_epochs=2, patience=2, batch_size=2,
                                 lr=1e-3) for s in
                ("synthesis", "registration", "reconstruction")}
    args = dict(contrast_mode="fused", domain_mode="dual", accel=4,
                image_size=32, base_channels=4, depth=2,
                reg_channels=(4, 4), reg_fc_hidden=8, stages=settings)
    args.update(kw)
    plan = StagePlan(**args)
    plan.validate()
    return plan


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("ds"))
    build_dataset(root, n_train=4, n_val=2, n_test=2, size=32,
                  n_structures=3, seed=5)
    return Dataset.load(root)


def read_rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_plan_validation():
    with pytest.raises(ValidationError):
        tiny_plan(image_size=24)
    with pytest.raises(ValidationError):
        tiny_plan(contrast_mode="both")
    with pytest.raises(ValidationError):
        tiny_plan(domain_mode="spectral")
    with pytest.raises(ValidationError):
        tiny_plan(accel=0)
    with pytest.raises(ValidationError):
        tiny_plan(reg_refine_iters=0)


def test_required_stages_by_contrast_mode():
    assert tiny_plan().required_stages() == (
        "synthesis", "registration", "reconstruction")
    assert tiny_plan(contrast_mode="concat").required_stages() == (
        "reconstruction",)
    assert tiny_plan(contrast_mode="single").required_stages() == (
        "reconstruction",)


def test_plan_roundtrip():
    plan = tiny_plan(domain_mode="image", image_loss="magnitude")
    back = StagePlan.from_dict(plan.to_dict())
    assert back.to_dict() == plan.to_dict()


def test_out_of_order_raises_and_writes_nothing(dataset, tmp_path):
    out = str(tmp_path / "run")
    with pytest.raises(StageOrderError) as exc:
        train_stage("reconstruction", dataset, tiny_plan(), out_dir=out)
    assert "synthesis" in str(exc.value)
    assert not os.path.exists(out) or not os.listdir(out)
    with pytest.raises(StageOrderError):
        train_stage("registration", dataset, tiny_plan(),
                    checkpoints={}, out_dir=out)


def test_bypassed_stage_rejected(dataset, tmp_path):
    plan = tiny_plan(contrast_mode="single")
    with pytest.raises(StageOrderError) as exc:
        train_stage("synthesis", dataset, plan,
                    out_dir=str(tmp_path / "run"))
    assert "single" in str(exc.value)


def test_check_stage_order_prior_quality(dataset):
    plan = tiny_plan()
    ck = train_stage("synthesis", dataset, plan, seed=1)
    # non-finalised prior
    broken = copy.copy(ck)
    broken.finalised = False
    with pytest.raises(CheckpointIntegrityError):
        check_stage_order("registration", plan, {"synthesis": broken})
    # config mismatch
    other = copy.copy(ck)
    other.config = tiny_plan(base_channels=8).to_dict()
    with pytest.raises(CheckpointIntegrityError):
        check_stage_order("registration", plan, {"synthesis": other})
    # the real thing passes
    check_stage_order("registration", plan, {"synthesis": ck})


def test_full_chain_and_freeze_invariance(dataset, tmp_path):
    out = str(tmp_path / "run")
    plan = tiny_plan()
    cks = train_all(dataset, plan, seed=3, out_dir=out)
    assert set(cks) == {"synthesis", "registration", "reconstruction"}
    for stage, ck in cks.items():
        assert ck.finalised
        assert os.path.exists(os.path.join(out, stage + ".ckpt"))
    # training later stages must not have touched earlier parameters
    synth_before = Checkpoint.load(os.path.join(out, "synthesis.ckpt"))
    for name, ps in synth_before.param_sets.items():
        assert ps.content_hash() == cks["synthesis"].param_sets[
            name].content_hash()
    # metrics come out finite and the final stage beats zero filling
    res = evaluate(cks, dataset, "test", plan)
    assert res.aggregates[("reconstruction", "image")]["psnr_mean"] > 0


def test_checkpoint_roundtrip_and_tamper(dataset, tmp_path):
    plan = tiny_plan(contrast_mode="single")
    ck = train_stage("reconstruction", dataset, plan, seed=2)
    path = str(tmp_path / "r.ckpt")
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.stage == ck.stage
    assert back.seed == ck.seed
    assert back.finalised
    assert back.config == ck.config
    for name, ps in ck.param_sets.items():
        assert back.param_sets[name].content_hash() == ps.content_hash()

    raw = bytearray(open(path, "rb").read())
    raw[-3] ^= 0x40
    tampered = str(tmp_path / "t.ckpt")
    open(tampered, "wb").write(bytes(raw))
    with pytest.raises(CheckpointIntegrityError):
        Checkpoint.load(tampered)

    truncated = str(tmp_path / "u.ckpt")
    open(truncated, "wb").write(bytes(raw[:len(raw) // 2]))
    with pytest.raises((TruncatedFileError, CheckpointIntegrityError)):
        Checkpoint.load(truncated)


def test_rerun_determinism(dataset, tmp_path):
    plan = tiny_plan()
    outs = []
    for tag in ("a", "b"):
        out = str(tmp_path / tag)
        log = RunLog(out)
        train_all(dataset, plan, seed=7, out_dir=out, run_log=log)
        log.finish(seed=7, config=plan.to_dict())
        outs.append(out)
    for name in ("synthesis.ckpt", "registration.ckpt",
                 "reconstruction.ckpt", "train_steps.csv",
                 "val_epochs.csv"):
        a = open(os.path.join(outs[0], name), "rb").read()
        b = open(os.path.join(outs[1], name), "rb").read()
        assert a == b, name
    # run.json differs only by wall clock
    import json
    ra = json.load(open(os.path.join(outs[0], "run.json")))
    rb = json.load(open(os.path.join(outs[1], "run.json")))
    ra.pop("wall_clock_s")
    rb.pop("wall_clock_s")
    assert ra == rb


def test_seed_changes_training(dataset, tmp_path):
    plan = tiny_plan(contrast_mode="single")
    a = train_stage("reconstruction", dataset, plan, seed=1)
    b = train_stage("reconstruction", dataset, plan, seed=2)
    ha = [ps.content_hash() for ps in a.param_sets.values()]
    hb = [ps.content_hash() for ps in b.param_sets.values()]
    assert ha != hb


def test_early_stop_keeps_best_epoch(dataset):
    plan = tiny_plan(contrast_mode="single")
    plan.stages["reconstruction"] = StageSettings(
        max_epochs=6, patience=2, batch_size=2, lr=1e-3)
    ck = train_stage("reconstruction", dataset, plan, seed=4)
    vals = ck.val_history
    assert len(vals) >= 1
    best = min(vals)
    # training may stop after patience worse epochs; the kept epoch is
    # the best seen
    assert vals.index(best) <= len(vals) - 1
    assert ck.finalised


def test_full_sampling_reconstructs_exactly(dataset):
    # acceleration 1 keeps every k-space row, so data consistency
    # returns the ground truth regardless of the network
    plan = tiny_plan(contrast_mode="single", accel=1)
    ck = train_stage("reconstruction", dataset, plan, seed=0)
    res = evaluate({"reconstruction": ck}, dataset, "test", plan)
    for row in res.per_record:
        if row["stage"] == "reconstruction" and row["branch"] == "image":
            assert row["psnr"] == 100.0
            assert row["ssim"] == pytest.approx(1.0, abs=1e-9)


def test_evaluate_with_outputs_panels(dataset):
    plan = tiny_plan(contrast_mode="single")
    ck = train_stage("reconstruction", dataset, plan, seed=5)
    res = evaluate({"reconstruction": ck}, dataset, "test", plan,
                   with_outputs=True)
    assert res.outputs
    panels = res.outputs[0]
    assert "zero_filled" in panels
    assert "reconstruction" in panels


def test_evaluate_missing_checkpoint_raises(dataset):
    plan = tiny_plan()
    with pytest.raises(StageOrderError):
        evaluate({}, dataset, "test", plan)


def test_cell_name_and_ablation(dataset, tmp_path):
    assert cell_name("fused", "dual", 4) == "fused-dual-4x"
    root = dataset  # reuse records by regenerating a root on disk
    ds_root = str(tmp_path / "ds")
    build_dataset(ds_root, n_train=4, n_val=2, n_test=2, size=32,
                  n_structures=3, seed=5)
    out = str(tmp_path / "ab")
    plan = tiny_plan(contrast_mode="single")
    rows = run_ablation([("single", "dual", 4), ("concat", "dual", 4)],
                        ds_root, plan, out, seed=0)
    summary = read_rows(os.path.join(out, "summary.csv"))
    assert len(summary) == 3
    assert summary[1][0] == "single-dual-4x"
    assert summary[2][0] == "concat-dual-4x"
    for cid in ("single-dual-4x", "concat-dual-4x"):
        assert os.path.exists(os.path.join(out, cid, "metrics.csv"))
    with pytest.raises(ValidationError):
        run_ablation([], ds_root, plan, str(tmp_path / "ab2"))
    with pytest.raises(ValidationError):
        run_ablation([("single", "dual", 4), ("single", "dual", 4)],
                     ds_root, plan, str(tmp_path / "ab3"))
