"""Two-stage training: domain-aligned pre-training, then supervised fine-tuning.

Stage 1 minimizes cross-entropy on labeled source batches plus lambda times
the layer-J MMD between source and target batches plus mu times the weight
regularizer. Stage 2 fine-tunes with cross-entropy only, at a much smaller
learning rate, on target-domain data.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from detector.losses import MMDKernel, backward, loss_mmd
from detector.network import MLPModel, forward
from detector.optim import OptimizerState, optimizer_step
from gridsim.dataset import Dataset, Label, split_indices
from gridsim.errors import NumericalError, TrainingDivergedError
from gridsim.state_estimation import Verdict

logger = logging.getLogger(__name__)

# Batch sizes are set for datasets of this many samples and scaled down below it.
REFERENCE_DATASET_SIZE = 1_000_000
MIN_BATCH = 100
EVAL_LIMIT = 5000
GAP_BATCH = 1000

TRACE_COLUMNS = (
    "iteration",
    "loss_ce",
    "loss_mmd",
    "loss_reg",
    "loss_total",
    "acc_train",
    "acc_val",
    "acc_test",
    "domain_gap",
    "seconds",
)


class Stage2Mode(str, Enum):
    REPLAY = "replay"
    STRICT = "strict"


@dataclass(frozen=True)
class TrainConfig:
    batch_source: int = 1000
    batch_target: int = 1000
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-5
    lam: float = 1e-2
    mu: float = 5e2
    stage1_acc_threshold: float = 0.995
    stage1_max_iters: int = 5000
    stage2_max_iters: int = 2000
    seed: int = 0
    mmd_kernel: MMDKernel = MMDKernel.MEAN_DIFFERENCE
    stage2_mode: Stage2Mode = Stage2Mode.REPLAY
    replay_ratio: float = 1.0
    eval_every: int = 10
    scale_batches: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mmd_kernel", MMDKernel(self.mmd_kernel))
        object.__setattr__(self, "stage2_mode", Stage2Mode(self.stage2_mode))
        if not (self.lr_stage1 > 0 and self.lr_stage2 > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.stage1_acc_threshold <= 1:
            raise ValueError("stage1_acc_threshold must lie in (0, 1]")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be non-negative")
        if self.batch_source < 2 or self.batch_target < 2:
            raise ValueError("batch sizes must be at least 2")
        if self.stage1_max_iters < 0 or self.stage2_max_iters < 0 or self.eval_every < 1:
            raise ValueError("iteration counts must be non-negative and eval_every at least 1")
        if self.replay_ratio < 0:
            raise ValueError("replay_ratio must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["mmd_kernel"] = self.mmd_kernel.value
        out["stage2_mode"] = self.stage2_mode.value
        return out


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss_ce: float
    loss_mmd: float
    loss_reg: float
    loss_total: float
    acc_train: float
    acc_val: float
    acc_test: float
    domain_gap: float
    seconds: float


@dataclass
class TrainTrace:
    stage: str
    records: List[TraceRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_iteration: int = 0

    def append(self, record: TraceRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=list(TRACE_COLUMNS))

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


class Classification(NamedTuple):
    verdicts: List[Verdict]
    attack: np.ndarray
    probs: np.ndarray


def effective_batch(configured: int, available: int, scale: bool = True) -> int:
    batch = configured
    if scale:
        batch = min(configured, max(MIN_BATCH, int(round(configured * available / REFERENCE_DATASET_SIZE))))
    return max(2, min(batch, available))


def classify(model: MLPModel, features: np.ndarray) -> Classification:
    """Attack iff the attack probability is strictly larger; ties go to normal."""

    probs = forward(model, features, train=False).probs
    attack = probs[:, 0] > probs[:, 1]
    verdicts = [Verdict.ATTACK if flag else Verdict.NORMAL for flag in attack]
    return Classification(verdicts=verdicts, attack=attack, probs=probs)


def classify_raw(model: MLPModel, raw_features: np.ndarray) -> Classification:
    if model.norm_stats is None:
        raise ValueError("model carries no normalization statistics")
    return classify(model, model.norm_stats.transform(raw_features))


def accuracy(model: MLPModel, data: Dataset) -> float:
    if len(data) == 0:
        return math.nan
    predicted = classify(model, data.features).attack
    return float(np.mean(predicted == (data.labels == Label.ATTACK)))


def domain_gap(model: MLPModel, source_features: np.ndarray, target_features: np.ndarray) -> float:
    """Mean-difference MMD of eval-mode layer-J features of two held-out batches.

    Features are divided by their pooled per-unit standard deviation first,
    so the gap does not grow just because training scales the features up.
    """

    fs = forward(model, source_features, train=False).features
    ft = forward(model, target_features, train=False).features
    scale = np.vstack([fs, ft]).std(axis=0)
    scale[scale == 0] = 1.0
    return loss_mmd(fs / scale, ft / scale)


def _held_out(data: Dataset, limit: int, seed: int) -> Dataset:
    if len(data) <= limit:
        return data
    picks = np.random.default_rng(seed).choice(len(data), size=limit, replace=False)
    return data.subset(np.sort(picks))


def _run_stage(
    model: MLPModel,
    stage: str,
    train: Dataset,
    validation: Dataset,
    cfg: TrainConfig,
    *,
    lr: float,
    lam: float,
    mu: float,
    max_iters: int,
    threshold: Optional[float],
    target_pool: Optional[np.ndarray] = None,
    gap_pair: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    test: Optional[Dataset] = None,
) -> Tuple[MLPModel, TrainTrace]:
    model = model.copy().train()
    trace = TrainTrace(stage=stage)
    optimizer = OptimizerState(lr=lr)
    rng_source = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rng_target = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    batch_s = effective_batch(cfg.batch_source, len(train), cfg.scale_batches)
    use_target = lam > 0 and target_pool is not None and len(target_pool) > 0
    batch_t = effective_batch(cfg.batch_target, len(target_pool), cfg.scale_batches) if use_target else 0
    train_eval = _held_out(train, EVAL_LIMIT, cfg.seed)
    started = time.perf_counter()

    def record(iteration: int, terms: Optional[Tuple[float, float, float, float]]) -> TraceRecord:
        ce, mmd, reg, total = terms if terms is not None else (math.nan,) * 4
        entry = TraceRecord(
            iteration=iteration,
            loss_ce=ce,
            loss_mmd=mmd,
            loss_reg=reg,
            loss_total=total,
            acc_train=accuracy(model, train_eval),
            acc_val=accuracy(model, validation),
            acc_test=accuracy(model, test) if test is not None else math.nan,
            domain_gap=domain_gap(model, *gap_pair) if gap_pair is not None else math.nan,
            seconds=time.perf_counter() - started,
        )
        trace.append(entry)
        logger.debug("%s iteration %d: %s", stage, iteration, entry)
        return entry

    first = record(0, None)
    best, best_acc = model.copy(), first.acc_val
    trace.stop_reason = "max_iters"
    logger.info(
        "Starting %s: %d train / %d validation samples, batch %d%s, lr %g, up to %d iterations",
        stage,
        len(train),
        len(validation),
        batch_s,
        f" + {batch_t} target" if use_target else "",
        lr,
        max_iters,
    )

    terms = None
    for iteration in range(1, max_iters + 1):
        idx = rng_source.choice(len(train), size=batch_s, replace=False)
        batch_target = None
        if use_target:
            batch_target = target_pool[rng_target.choice(len(target_pool), size=batch_t, replace=False)]
        try:
            grads, terms = backward(
                model,
                train.features[idx],
                batch_target,
                train.labels[idx],
                lam,
                mu,
                cfg.mmd_kernel,
                update_running=True,
            )
            if not math.isfinite(terms.total):
                raise NumericalError(f"non-finite loss {terms.total}")
            optimizer_step(optimizer, model, grads)
        except NumericalError as exc:
            trace.stop_reason = "diverged"
            raise TrainingDivergedError(f"{stage} diverged at iteration {iteration}: {exc}", trace) from exc

        if iteration % cfg.eval_every == 0 or iteration == max_iters:
            entry = record(iteration, tuple(terms))
            # without validation data the latest model wins
            if math.isnan(best_acc) or entry.acc_val > best_acc:
                best, best_acc = model.copy(), entry.acc_val
                trace.best_iteration = iteration
            if threshold is not None and entry.acc_train >= threshold and entry.acc_val >= threshold:
                trace.stop_reason = "threshold"
                break

    best.metrics = {
        **best.metrics,
        f"{stage}_best_iteration": trace.best_iteration,
        f"{stage}_acc_val": best_acc,
        f"{stage}_stop_reason": trace.stop_reason,
    }
    logger.info(
        "Finished %s after %d iterations (%s); best validation ACC %.4f at iteration %d",
        stage,
        trace.records[-1].iteration,
        trace.stop_reason,
        best_acc,
        trace.best_iteration,
    )
    return best.eval(), trace


def _require_normalized(data: Dataset, what: str) -> None:
    if not data.normalized or data.split is None:
        raise ValueError(f"{what} dataset must be normalized and split first")


def pretrain(
    model: MLPModel,
    source: Dataset,
    target: Dataset,
    cfg: TrainConfig,
    test: Optional[Dataset] = None,
) -> Tuple[MLPModel, TrainTrace]:
    """Stage 1 on the source split with target batches for the MMD term.

    Stops when train and validation ACC both reach the threshold or at the
    iteration cap and returns the best-validation model.
    """

    _require_normalized(source, "source")
    if not target.normalized or not source.norm_stats.same_as(target.norm_stats):
        raise ValueError("target dataset must be normalized with the source statistics")
    counts = source.class_counts()
    if counts["attack"] == 0 or counts["normal"] == 0:
        raise ValueError(f"source dataset needs both classes, got {counts}")
    if np.any(target.labels == Label.ATTACK):
        raise ValueError("target dataset for pre-training must be normal-only")

    target_train = target.train_part() if target.split is not None else target
    target_held = target.validation_part() if target.split is not None else target
    source_val = source.validation_part()
    # target data is normal-only, so the gap compares it with source normals
    source_normal = source_val.subset(np.flatnonzero(source_val.labels == Label.NORMAL))
    if len(source_normal) == 0:
        source_normal = source_val
    gap_pair = (
        _held_out(source_normal, GAP_BATCH, cfg.seed + 1).features,
        _held_out(target_held, GAP_BATCH, cfg.seed + 2).features,
    )

    trained, trace = _run_stage(
        model,
        "stage1",
        source.train_part(),
        source_val,
        cfg,
        lr=cfg.lr_stage1,
        lam=cfg.lam,
        mu=cfg.mu,
        max_iters=cfg.stage1_max_iters,
        threshold=cfg.stage1_acc_threshold,
        target_pool=target_train.features,
        gap_pair=gap_pair,
        test=test,
    )
    trained.norm_stats = source.norm_stats
    trained.metrics["stage1_domain_gap_initial"] = trace.records[0].domain_gap
    trained.metrics["stage1_domain_gap"] = domain_gap(trained, *gap_pair)
    return trained, trace


def train_source_only(
    model: MLPModel,
    source: Dataset,
    cfg: TrainConfig,
    test: Optional[Dataset] = None,
) -> Tuple[MLPModel, TrainTrace]:
    """Plain supervised training on the source split (cross-entropy only)."""

    _require_normalized(source, "source")
    trained, trace = _run_stage(
        model,
        "source_only",
        source.train_part(),
        source.validation_part(),
        cfg,
        lr=cfg.lr_stage1,
        lam=0.0,
        mu=0.0,
        max_iters=cfg.stage1_max_iters,
        threshold=cfg.stage1_acc_threshold,
        test=test,
    )
    trained.norm_stats = source.norm_stats
    return trained, trace


def build_stage2_dataset(target: Dataset, source: Dataset, cfg: TrainConfig) -> Dataset:
    """Target-normal samples, plus replayed source attacks unless in strict mode.

    The returned set has its own 7:3 split.
    """

    if not target.normalized or not source.norm_stats.same_as(target.norm_stats):
        raise ValueError("stage-2 data must share the source normalization statistics")
    parts = [target]
    if cfg.stage2_mode is Stage2Mode.REPLAY and cfg.replay_ratio > 0:
        attacks = np.flatnonzero(source.labels == Label.ATTACK)
        wanted = min(len(attacks), int(round(cfg.replay_ratio * len(target))))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        picks = np.sort(rng.choice(attacks, size=wanted, replace=False))
        parts.append(source.subset(picks))
    stage2 = Dataset.concat(parts) if len(parts) > 1 else target.subset(np.arange(len(target)))
    return replace(stage2, split=split_indices(len(stage2), cfg.seed))


def finetune(
    model: MLPModel,
    stage2: Dataset,
    cfg: TrainConfig,
    test: Optional[Dataset] = None,
) -> Tuple[MLPModel, TrainTrace]:
    """Stage 2: cross-entropy steps at ``lr_stage2`` on the stage-2 split."""

    _require_normalized(stage2, "stage-2")
    if model.norm_stats is not None and not model.norm_stats.same_as(stage2.norm_stats):
        raise ValueError("stage-2 data is not normalized with the model's statistics")
    trained, trace = _run_stage(
        model,
        "stage2",
        stage2.train_part(),
        stage2.validation_part(),
        cfg,
        lr=cfg.lr_stage2,
        lam=0.0,
        mu=0.0,
        max_iters=cfg.stage2_max_iters,
        threshold=None,
        test=test,
    )
    trained.norm_stats = stage2.norm_stats
    return trained, trace

