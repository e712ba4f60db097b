import math
from dataclasses import replace

import numpy as np
import pytest

import detector.transfer as transfer
from detector.network import Mode, init_model
from detector.transfer import (
    Stage2Mode,
    TraceRecord,
    TrainConfig,
    TrainTrace,
    build_stage2_dataset,
    classify,
    effective_batch,
    finetune,
    pretrain,
    train_source_only,
)
from gridsim.dataset import Domain, Label
from gridsim.errors import TrainingDivergedError
from gridsim.state_estimation import Verdict


def _record(iteration):
    return TraceRecord(iteration, *([0.0] * 9))


def test_effective_batch():
    assert effective_batch(1000, 1_000_000) == 1000
    assert effective_batch(1000, 50_000) == 100
    assert effective_batch(1000, 40) == 40
    assert effective_batch(32, 40, scale=False) == 32


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(stage1_acc_threshold=0.0)
    assert TrainConfig(stage2_mode="strict").stage2_mode is Stage2Mode.STRICT


def test_tie_is_normal(tiny_mlp, source):
    model = init_model(tiny_mlp).eval()
    model.params["W_out"][:] = 0.0
    model.params["b_out"][:] = 0.0
    result = classify(model, source.features[:5])
    assert result.verdicts == [Verdict.NORMAL] * 5


def test_trace_must_increase():
    trace = TrainTrace(stage="stage1")
    trace.append(_record(0))
    trace.append(_record(5))
    with pytest.raises(ValueError):
        trace.append(_record(5))
    assert list(trace.to_frame()["iteration"]) == [0, 5]


def test_pretrain(tiny_mlp, tiny_train, source, target, target_test):
    model, trace = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train, test=target_test)
    assert model.mode is Mode.EVAL
    assert model.norm_stats.same_as(source.norm_stats)
    assert trace.records[0].iteration == 0 and math.isnan(trace.records[0].loss_total)
    assert trace.stop_reason in {"threshold", "max_iters"}
    assert all(math.isfinite(r.loss_total) for r in trace.records[1:])
    assert all(r.domain_gap >= 0 for r in trace.records)
    assert {"stage1_acc_val", "stage1_best_iteration", "stage1_stop_reason"} <= set(model.metrics)
    frame = trace.to_frame()
    assert list(frame.columns) == list(transfer.TRACE_COLUMNS)


def test_pretrain_rejects_bad_inputs(tiny_mlp, tiny_train, source, raw_source, target_test):
    model = init_model(tiny_mlp)
    with pytest.raises(ValueError):
        pretrain(model, source, target_test, tiny_train)
    with pytest.raises(ValueError):
        pretrain(model, raw_source, source, tiny_train)


def test_stage2_replay_and_strict(tiny_train, source, target):
    replay = build_stage2_dataset(target, source, tiny_train)
    replayed = min(source.class_counts()["attack"], len(target))
    assert len(replay) == len(target) + replayed
    assert replay.class_counts()["attack"] == replayed
    assert set(replay.domains) == {Domain.TARGET, Domain.SOURCE}
    assert len(replay.split.train) + len(replay.split.validation) == len(replay)

    strict = build_stage2_dataset(target, source, TrainConfig(stage2_mode=Stage2Mode.STRICT))
    assert len(strict) == len(target)
    assert np.all(strict.labels == Label.NORMAL)


def test_finetune_keeps_statistics(tiny_mlp, tiny_train, source, target, target_test):
    model, _ = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train)
    stage2 = build_stage2_dataset(target, source, tiny_train)
    tuned, trace = finetune(model, stage2, tiny_train, test=target_test)
    assert tuned.norm_stats.same_as(source.norm_stats)
    assert trace.stage == "stage2" and trace.records[-1].iteration == tiny_train.stage2_max_iters
    assert tuned.step >= model.step


def test_source_only_training(tiny_mlp, tiny_train, source):
    model, trace = train_source_only(init_model(tiny_mlp, seed=2), source, tiny_train)
    assert trace.stage == "source_only"
    assert all(r.loss_mmd == 0.0 for r in trace.records[1:])
    assert 0.0 <= model.metrics["source_only_acc_val"] <= 1.0


def test_divergence_carries_the_trace(monkeypatch, tiny_mlp, tiny_train, source, target):
    real_backward = transfer.backward

    def poisoned(model, *args, **kwargs):
        grads, terms = real_backward(model, *args, **kwargs)
        return {name: np.full_like(g, np.nan) for name, g in grads.items()}, terms

    monkeypatch.setattr(transfer, "backward", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        pretrain(init_model(tiny_mlp), source, target, tiny_train)
    assert info.value.trace.stop_reason == "diverged"
    assert info.value.trace.records[0].iteration == 0
    assert info.value.exit_code == 3


def test_zero_lambda_matches_source_only_training(tiny_mlp, tiny_train, source, target):
    cfg = replace(tiny_train, lam=0.0, mu=0.0)
    transferred, _ = pretrain(init_model(tiny_mlp, seed=4), source, target, cfg)
    plain, _ = train_source_only(init_model(tiny_mlp, seed=4), source, cfg)
    for name in plain.params:
        np.testing.assert_array_equal(transferred.params[name], plain.params[name])


def test_training_is_reproducible(tiny_mlp, tiny_train, source, target):
    first, trace_a = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train)
    second, trace_b = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train)
    np.testing.assert_array_equal(first.params["W0"], second.params["W0"])
    a = trace_a.to_frame().drop(columns="seconds")
    b = trace_b.to_frame().drop(columns="seconds")
    assert a.equals(b)


def test_zero_iteration_finetune_leaves_the_model(tiny_mlp, tiny_train, source, target):
    model, _ = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train)
    stage2 = build_stage2_dataset(target, source, tiny_train)
    tuned, trace = finetune(model, stage2, replace(tiny_train, stage2_max_iters=0))
    assert [r.iteration for r in trace.records] == [0]
    for name in model.params:
        np.testing.assert_array_equal(tuned.params[name], model.params[name])


def test_small_stage2_steps_barely_move_the_weights(tiny_mlp, tiny_train, source, target):
    model, _ = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train)
    stage2 = build_stage2_dataset(target, source, tiny_train)
    tuned, _ = finetune(model, stage2, replace(tiny_train, stage2_max_iters=50))
    assert abs(tuned.frobenius_norm() - model.frobenius_norm()) < 0.05 * model.frobenius_norm()


def test_domain_gap_ignores_feature_scale(tiny_mlp, source, target):
    model = init_model(tiny_mlp, seed=6).eval()
    fs, ft = source.features[:30], target.features[:30]
    before = transfer.domain_gap(model, fs, ft)
    last = f"W{tiny_mlp.mmd_depth - 1}"
    model.params[last] *= 7.0
    model.params[f"b{tiny_mlp.mmd_depth - 1}"] *= 7.0
    assert transfer.domain_gap(model, fs, ft) == pytest.approx(before)
    assert transfer.domain_gap(model, fs, fs) == 0.0


def test_pretrain_reports_the_gap_of_the_returned_model(tiny_mlp, tiny_train, source, target):
    model, trace = pretrain(init_model(tiny_mlp, seed=1), source, target, tiny_train)
    assert model.metrics["stage1_domain_gap_initial"] == trace.records[0].domain_gap
    best = next(r for r in trace.records if r.iteration == trace.best_iteration)
    assert model.metrics["stage1_domain_gap"] == pytest.approx(best.domain_gap)


def test_empty_validation_keeps_the_latest_model(tiny_mlp, tiny_train, source):
    start = init_model(tiny_mlp, seed=3)
    empty = source.subset(np.array([], dtype=np.int64))
    trained, trace = transfer._run_stage(
        start,
        "source_only",
        source.train_part(),
        empty,
        tiny_train,
        lr=tiny_train.lr_stage1,
        lam=0.0,
        mu=0.0,
        max_iters=10,
        threshold=None,
    )
    assert trace.best_iteration == 10
    assert not np.array_equal(trained.params["W0"], start.params["W0"])
