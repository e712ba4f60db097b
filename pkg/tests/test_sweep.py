import pytest

import detector.sweep as sweep
from detector.baselines import BaselineGrid
from detector.config import ConfigBundle, SweepConfig
from detector.reports import emit_report
from detector.sweep import Scenario, run_delta_sweep, run_scenario, run_sigma_sweep, trial_seed
from detector.transfer import TrainConfig
from gridsim.dataset import GenerationConfig
from gridsim.errors import PowerFlowError


@pytest.fixture
def tiny_bundle():
    return ConfigBundle(
        model={"hidden_layers": 2, "hidden_width": 16, "mmd_depth": 2},
        train=TrainConfig(
            batch_source=32,
            batch_target=32,
            stage1_max_iters=20,
            stage2_max_iters=10,
            eval_every=5,
            scale_batches=False,
        ),
        generation=GenerationConfig(n_base=2, n_per_base=20, seed=1),
        sweep=SweepConfig(trials=1, methods=("proposed", "lr"), target_scale=1.0, test_scale=0.5),
    )


def _fake_trial(case, scenario, bundle, seed, workers):
    acc = 0.9 if seed % 2 else 0.7
    return {
        "sizes": {"source": 10, "target": 5, "target_test": 4},
        "methods": {m: {"acc": acc, "mar": None, "runtime": 0.25} for m in bundle.sweep.methods},
        "notes": {"domain_gap_initial": 1.0},
    }


def test_trial_seeds_depend_on_the_scenario_only():
    assert trial_seed(0, 0.5, 0.0, 1) == trial_seed(0, 0.5, 0.0, 1)
    seeds = {trial_seed(0, d, s, t) for d in (0.0, 0.5) for s in (0.0, 0.01) for t in range(3)}
    assert len(seeds) == 12


def test_failed_scenario_is_recorded(monkeypatch, case14, tiny_bundle):
    def explode(*args, **kwargs):
        raise PowerFlowError("no convergence", mismatch=1.0, iterations=50)

    monkeypatch.setattr(sweep, "_run_trial", explode)
    (result,) = run_delta_sweep(case14, [0.3], tiny_bundle)
    assert result.error.startswith("PowerFlowError")
    assert result.methods == {}
    assert "- δ=30%: PowerFlowError: no convergence" in emit_report([result])


def test_unfit_baseline_grid_fails_only_its_scenario(case14):
    bundle = ConfigBundle(
        baselines=BaselineGrid(knn_k=(50,)),
        generation=GenerationConfig(n_base=1, n_per_base=5, seed=1),
        sweep=SweepConfig(trials=1, methods=("knn",)),
    )
    results = run_delta_sweep(case14, [0.0, 0.5], bundle)
    assert [r.scenario.delta for r in results] == [0.0, 0.5]
    for result in results:
        assert result.error.startswith("ConfigError: no KNN candidate")
        assert result.methods == {}


def test_value_errors_are_recorded(monkeypatch, case14, tiny_bundle):
    def reject(*args, **kwargs):
        raise ValueError("batch sizes must be at least 2")

    monkeypatch.setattr(sweep, "_run_trial", reject)
    (result,) = run_delta_sweep(case14, [0.1], tiny_bundle)
    assert result.error == "ValueError: batch sizes must be at least 2"


def test_trials_are_aggregated(monkeypatch, case14, tiny_bundle):
    monkeypatch.setattr(sweep, "_run_trial", _fake_trial)
    bundle = ConfigBundle(
        generation=tiny_bundle.generation,
        sweep=SweepConfig(trials=4, methods=("lr", "gnb"), include_runtime=False),
    )
    scenario = Scenario("delta", 0.2, 0.0, 0.01, case14.id, 3)
    result = run_scenario(case14, scenario, bundle)
    expected = [0.9 if trial_seed(3, 0.2, 0.0, t) % 2 else 0.7 for t in range(4)]
    assert result.methods["lr"].acc == pytest.approx(sum(expected) / 4)
    assert result.methods["lr"].trials == 4
    assert result.methods["gnb"].mar is None
    assert result.methods["gnb"].runtime is None
    assert result.notes == {"domain_gap_initial": 1.0}


def test_sweeps_order_scenarios(monkeypatch, case14, tiny_bundle):
    monkeypatch.setattr(sweep, "_run_trial", _fake_trial)
    results = run_sigma_sweep(case14, [0.05, 0.0, 0.01], 0.5, tiny_bundle)
    assert [r.scenario.sigma_source for r in results] == [0.0, 0.01, 0.05]
    assert all(r.scenario.kind == "sigma" and r.scenario.delta == 0.5 for r in results)
    assert run_delta_sweep(case14, [], tiny_bundle) == []


def test_small_delta_sweep_end_to_end(case14, tiny_bundle):
    results = run_delta_sweep(case14, [0.0, 0.5], tiny_bundle)
    assert [r.scenario.delta for r in results] == [0.0, 0.5]
    for result in results:
        assert result.error is None
        assert set(result.methods) == {"proposed", "lr"}
        assert result.sizes == {"source": 80, "target": 40, "target_test": 40}
        assert 0.0 <= result.methods["proposed"].acc <= 1.0
        assert {"domain_gap_initial", "domain_gap_final", "acc_test_before_finetune"} <= set(result.notes)


def _desk_bundle(methods):
    return ConfigBundle(sweep=SweepConfig(trials=1, methods=methods))


@pytest.mark.slow
def test_desk_scale_identical_domains(case14):
    (result,) = run_delta_sweep(case14, [0.0], _desk_bundle(("proposed", "dnn_b")))
    assert result.methods["proposed"].acc >= 0.99
    assert result.methods["dnn_b"].acc >= 0.99


@pytest.mark.slow
def test_desk_scale_modeling_error(case14):
    (result,) = run_delta_sweep(case14, [0.5], _desk_bundle(("proposed", "dnn_b")))
    proposed, baseline = result.methods["proposed"].acc, result.methods["dnn_b"].acc
    assert proposed >= 0.95
    assert proposed - baseline >= 0.05
    assert result.notes["domain_gap_final"] < result.notes["domain_gap_initial"]
    assert proposed >= result.notes["acc_test_before_finetune"]


@pytest.mark.slow
def test_desk_scale_source_noise(case14):
    results = run_sigma_sweep(case14, [0.0, 0.01, 0.05, 0.1], 0.5, _desk_bundle(("proposed",)))
    accs = {r.scenario.sigma_source: r.methods["proposed"].acc for r in results}
    assert min(accs[0.0], accs[0.01], accs[0.05]) >= 0.95
    assert accs[0.01] - accs[0.1] >= 0.15
