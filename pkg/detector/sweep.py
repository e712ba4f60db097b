"""Scenario sweeps over the modeling-error level and the source noise level.

One scenario = (delta, source sigma, target sigma, case, seed). Each trial
builds H*, generates the three datasets, trains the transfer detector and
the baselines, and scores everything on the target-test set. Trial seeds
are derived from the scenario key, so scenarios are independent of each
other and of execution order.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from detector.baselines import BaselineKind, evaluate_baseline, train_baseline
from detector.config import ConfigBundle
from detector.metrics import ConfusionCounts, compute_metrics
from detector.network import init_model
from detector.transfer import accuracy, build_stage2_dataset, classify, finetune, pretrain
from gridsim.dataset import (
    Label,
    generate_source_dataset,
    generate_target_dataset,
    generate_target_test_dataset,
    normalize_and_split,
)
from gridsim.errors import FdiaError
from gridsim.grid_model import GridCase, PerturbSpec, perturb_case

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    kind: str
    delta: float
    sigma_source: float
    sigma_target: float
    case_id: str
    seed: int

    @property
    def key(self) -> tuple:
        return (self.delta, self.sigma_source, self.sigma_target)


@dataclass
class MethodResult:
    acc: float
    acc_std: float
    mar: Optional[float]
    mar_std: Optional[float]
    runtime: Optional[float]
    trials: int


@dataclass
class ScenarioResult:
    scenario: Scenario
    methods: Dict[str, MethodResult] = field(default_factory=dict)
    sizes: Dict[str, int] = field(default_factory=dict)
    notes: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def trial_seed(base_seed: int, delta: float, sigma_source: float, trial: int) -> int:
    key = [base_seed, int(round(delta * 1e6)), int(round(sigma_source * 1e6)), trial]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _aggregate(values: List[Dict[str, Optional[float]]]) -> MethodResult:
    accs = np.array([v["acc"] for v in values], dtype=float)
    mars = np.array([math.nan if v["mar"] is None else v["mar"] for v in values], dtype=float)
    runtimes = np.array([v["runtime"] for v in values], dtype=float)
    has_mar = bool(np.any(np.isfinite(mars)))
    return MethodResult(
        acc=float(accs.mean()),
        acc_std=float(accs.std()),
        mar=float(np.nanmean(mars)) if has_mar else None,
        mar_std=float(np.nanstd(mars)) if has_mar else None,
        runtime=float(runtimes.mean()),
        trials=len(values),
    )


def _run_trial(case: GridCase, scenario: Scenario, bundle: ConfigBundle, seed: int, workers: int) -> Dict[str, Any]:
    sweep = bundle.sweep
    gen = bundle.generation
    case_star = perturb_case(case, PerturbSpec(scenario.delta, seed=seed, scope=sweep.perturb_scope))

    source_cfg = replace(gen, seed=seed, sigma=scenario.sigma_source)
    target_cfg = replace(
        gen, seed=seed, sigma=scenario.sigma_target, n_per_base=max(1, round(gen.n_per_base * sweep.target_scale))
    )
    test_cfg = replace(
        gen, seed=seed, sigma=scenario.sigma_target, n_per_base=max(1, round(gen.n_per_base * sweep.test_scale))
    )
    source = normalize_and_split(generate_source_dataset(case, source_cfg, workers), seed)
    target = normalize_and_split(generate_target_dataset(case_star, target_cfg, workers), seed, source.norm_stats)
    test = normalize_and_split(generate_target_test_dataset(case_star, test_cfg, workers), seed, source.norm_stats)
    actual = test.labels == Label.ATTACK

    out: Dict[str, Any] = {
        "sizes": {"source": len(source), "target": len(target), "target_test": len(test)},
        "methods": {},
        "notes": {},
    }
    train_cfg = replace(bundle.train, seed=seed)

    for method in sweep.methods:
        started = time.perf_counter()
        if method == "proposed":
            model = init_model(bundle.mlp_config(source.n_features), seed)
            stage1, _ = pretrain(model, source, target, train_cfg)
            stage2_set = build_stage2_dataset(target, source, train_cfg)
            final, _ = finetune(stage1, stage2_set, train_cfg)
            verdicts = classify(final, test.features).verdicts
            out["notes"].update(
                domain_gap_initial=stage1.metrics["stage1_domain_gap_initial"],
                domain_gap_final=stage1.metrics["stage1_domain_gap"],
                acc_test_before_finetune=accuracy(stage1, test),
            )
        else:
            baseline = train_baseline(
                BaselineKind(method),
                source,
                bundle.baselines,
                case=case,
                train_cfg=train_cfg,
                model_cfg=bundle.mlp_config(source.n_features),
                seed=seed,
                workers=workers,
            )
            verdicts = evaluate_baseline(baseline, test, workers)
        metrics = compute_metrics(ConfusionCounts.from_verdicts(verdicts, actual))
        out["methods"][method] = {
            "acc": metrics.acc,
            "mar": metrics.mar,
            "runtime": time.perf_counter() - started,
        }
    return out


def run_scenario(case: GridCase, scenario: Scenario, bundle: ConfigBundle, workers: int = 1) -> ScenarioResult:
    """All trials of one scenario; failures are recorded, not raised."""

    result = ScenarioResult(scenario=scenario)
    trials: List[Dict[str, Any]] = []
    try:
        for trial in range(bundle.sweep.trials):
            seed = trial_seed(scenario.seed, scenario.delta, scenario.sigma_source, trial)
            trials.append(_run_trial(case, scenario, bundle, seed, workers))
    except (FdiaError, ValueError) as exc:
        logger.exception("Scenario %s failed", scenario.key)
        result.error = f"{type(exc).__name__}: {exc}"
        return result

    result.sizes = trials[0]["sizes"]
    for method in bundle.sweep.methods:
        result.methods[method] = _aggregate([t["methods"][method] for t in trials])
        if not bundle.sweep.include_runtime:
            result.methods[method].runtime = None
    note_keys = trials[0]["notes"].keys()
    result.notes = {key: float(np.mean([t["notes"][key] for t in trials])) for key in note_keys}
    logger.info(
        "Scenario delta=%g sigma_source=%g done: %s",
        scenario.delta,
        scenario.sigma_source,
        {m: round(r.acc, 4) for m, r in result.methods.items()},
    )
    return result


def _run_all(case: GridCase, scenarios: List[Scenario], bundle: ConfigBundle, workers: int) -> List[ScenarioResult]:
    if workers > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(partial(run_scenario, case, bundle=bundle, workers=1), scenarios))
    else:
        results = [run_scenario(case, scenario, bundle, workers) for scenario in scenarios]
    return sorted(results, key=lambda r: r.scenario.key)


def run_delta_sweep(
    case: GridCase, deltas: Sequence[float], bundle: ConfigBundle, workers: int = 1
) -> List[ScenarioResult]:
    gen = bundle.generation
    scenarios = [
        Scenario("delta", float(d), gen.sigma, bundle.sweep.sigma_target, case.id, gen.seed) for d in deltas
    ]
    return _run_all(case, scenarios, bundle, workers)


def run_sigma_sweep(
    case: GridCase, sigmas_source: Sequence[float], delta: float, bundle: ConfigBundle, workers: int = 1
) -> List[ScenarioResult]:
    gen = bundle.generation
    scenarios = [
        Scenario("sigma", float(delta), float(s), bundle.sweep.sigma_target, case.id, gen.seed) for s in sigmas_source
    ]
    return _run_all(case, scenarios, bundle, workers)
