"""Comparison detectors: residual BDD, source-only network, LR, KNN and GNB.

Every data-driven baseline sees the same normalized feature rows as the
transfer-trained network. Hyperparameters are picked by source-validation
accuracy over a candidate grid.
"""

from __future__ import annotations

import logging
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier

from detector.network import MLPConfig, init_model
from detector.transfer import TrainConfig, classify, train_source_only
from gridsim.dataset import Dataset, Label
from gridsim.errors import ConfigError, DatasetFormatError, LayoutError
from gridsim.grid_model import GridCase
from gridsim.power_flow import MeasurementLayout, MeasurementVector, measurement_layout
from gridsim.state_estimation import BddConfig, Verdict, bdd_detect, wls_estimate_ac

logger = logging.getLogger(__name__)


class BaselineKind(str, Enum):
    BDD = "bdd"
    DNN_B = "dnn_b"
    LR = "lr"
    KNN = "knn"
    GNB = "gnb"


@dataclass(frozen=True)
class BaselineGrid:
    lr_penalties: Tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
    knn_k: Tuple[int, ...] = (1, 2, 5, 10, 50)
    knn_max_reference: int = 10_000
    gnb_var_floor: float = 1e-9
    bdd_quantile: float = 0.999
    bdd_calibration_samples: int = 1000

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_penalties", tuple(float(p) for p in self.lr_penalties))
        object.__setattr__(self, "knn_k", tuple(int(k) for k in self.knn_k))
        if not self.lr_penalties or any(p <= 0 for p in self.lr_penalties):
            raise ValueError("lr_penalties must be a non-empty list of positive values")
        if not self.knn_k or any(k < 1 for k in self.knn_k):
            raise ValueError("knn_k must be a non-empty list of positive integers")
        if not 0 < self.bdd_quantile < 1:
            raise ValueError("bdd_quantile must lie in (0, 1)")


@dataclass
class BaselineModel:
    kind: BaselineKind
    estimator: Any
    layout: MeasurementLayout
    hyper: Dict[str, Any] = field(default_factory=dict)
    validation_acc: float = float("nan")
    case: Optional[GridCase] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


def _check_layout(model: BaselineModel, data: Dataset) -> None:
    if data.layout != model.layout:
        raise LayoutError(f"{model.kind.value} baseline was trained on another measurement layout")


def _attack_targets(data: Dataset) -> np.ndarray:
    return (data.labels == Label.ATTACK).astype(np.int64)


def _select(
    candidates: Sequence[Tuple[Dict[str, Any], Any]], validation: Dataset
) -> Tuple[Dict[str, Any], Any, float, List[Dict[str, Any]]]:
    best = None
    scores = []
    y_val = _attack_targets(validation)
    for hyper, estimator in candidates:
        score = float(np.mean(estimator.predict(validation.features) == y_val))
        scores.append({**hyper, "acc_val": score})
        if best is None or score > best[2]:
            best = (hyper, estimator, score)
    return best[0], best[1], best[2], scores


def residual_norms(case: GridCase, raw_features: np.ndarray) -> np.ndarray:
    """AC-WLS residual norm of the measurement part of each raw feature row."""

    layout_size = 2 * case.n_bus + 2 * case.n_branch
    z_rows = np.asarray(raw_features, dtype=np.float64)[:, 2 * case.n_bus :]
    if z_rows.shape[1] != layout_size:
        raise LayoutError(f"feature rows carry {z_rows.shape[1]} measurements, case {case.id} has {layout_size}")
    layout = measurement_layout(case)
    return np.array([wls_estimate_ac(case, MeasurementVector.from_values(z, layout)).residual_norm for z in z_rows])


def _residuals_parallel(case: GridCase, raw: np.ndarray, workers: int) -> np.ndarray:
    if workers <= 1 or len(raw) < 2 * workers:
        return residual_norms(case, raw)
    chunks = np.array_split(raw, workers)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return np.concatenate(list(executor.map(partial(residual_norms, case), chunks)))


def train_baseline(
    kind: BaselineKind,
    source: Dataset,
    grid: Optional[BaselineGrid] = None,
    *,
    case: Optional[GridCase] = None,
    train_cfg: Optional[TrainConfig] = None,
    model_cfg: Optional[MLPConfig] = None,
    seed: int = 0,
    workers: int = 1,
) -> BaselineModel:
    """Fit one baseline on the source split and keep the best grid candidate.

    ``bdd`` needs the nominal ``case`` and calibrates tau on the residuals of
    normal source samples; ``dnn_b`` trains the detector network on source
    data only.
    """

    kind = BaselineKind(kind)
    grid = grid or BaselineGrid()
    if not source.normalized or source.split is None:
        raise ValueError("source dataset must be normalized and split first")
    train, validation = source.train_part(), source.validation_part()
    y_train = _attack_targets(train)
    model = BaselineModel(kind=kind, estimator=None, layout=source.layout, metadata={"norm_stats": source.norm_stats})

    if kind is BaselineKind.LR:
        candidates = []
        for penalty in grid.lr_penalties:
            estimator = LogisticRegression(C=1.0 / penalty, max_iter=1000)
            candidates.append(({"penalty": penalty}, estimator.fit(train.features, y_train)))
        model.hyper, model.estimator, model.validation_acc, scores = _select(candidates, validation)
        model.metadata["grid"] = scores

    elif kind is BaselineKind.KNN:
        reference = np.arange(len(train))
        if len(reference) > grid.knn_max_reference:
            rng = np.random.default_rng(seed)
            reference = np.sort(rng.choice(len(train), size=grid.knn_max_reference, replace=False))
        candidates = []
        for k in grid.knn_k:
            if k > len(reference):
                continue
            estimator = KNeighborsClassifier(n_neighbors=k)
            candidates.append(({"k": k}, estimator.fit(train.features[reference], y_train[reference])))
        if not candidates:
            raise ConfigError(f"no KNN candidate fits a reference set of {len(reference)} samples")
        model.hyper, model.estimator, model.validation_acc, scores = _select(candidates, validation)
        model.metadata.update(grid=scores, reference_size=int(len(reference)))

    elif kind is BaselineKind.GNB:
        estimator = GaussianNB(var_smoothing=grid.gnb_var_floor).fit(train.features, y_train)
        model.hyper, model.estimator, model.validation_acc, _ = _select([({}, estimator)], validation)

    elif kind is BaselineKind.DNN_B:
        cfg = model_cfg or MLPConfig(input_dim=source.n_features)
        trained, trace = train_source_only(init_model(cfg, seed), source, train_cfg or TrainConfig(seed=seed))
        model.estimator = trained
        model.validation_acc = trained.metrics.get("source_only_acc_val", float("nan"))
        model.metadata["trace"] = trace

    else:
        if case is None:
            raise ValueError("the bdd baseline needs the nominal grid case")
        normal = np.flatnonzero(source.labels == Label.NORMAL)
        if len(normal) > grid.bdd_calibration_samples:
            normal = np.sort(np.random.default_rng(seed).choice(normal, size=grid.bdd_calibration_samples, replace=False))
        residuals = _residuals_parallel(case, source.subset(normal).raw_features(), workers)
        model.estimator = BddConfig.from_normal_residuals(residuals, grid.bdd_quantile)
        model.case = case
        model.hyper = {"tau": model.estimator.tau, "quantile": grid.bdd_quantile}
        model.metadata["calibration_samples"] = int(len(normal))

    logger.info("Trained %s baseline %s (validation ACC %.4f)", kind.value, model.hyper, model.validation_acc)
    return model


def evaluate_baseline(model: BaselineModel, test: Dataset, workers: int = 1) -> List[Verdict]:
    """One verdict per test sample."""

    _check_layout(model, test)
    if model.kind is BaselineKind.BDD:
        residuals = _residuals_parallel(model.case, test.raw_features(), workers)
        return [bdd_detect(r, model.estimator) for r in residuals]
    if model.kind is BaselineKind.DNN_B:
        return classify(model.estimator, test.features).verdicts
    predicted = model.estimator.predict(test.features)
    return [Verdict.ATTACK if p == 1 else Verdict.NORMAL for p in predicted]


def save_baseline(model: BaselineModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(model, path)
    return path


def load_baseline(path: Path) -> BaselineModel:
    try:
        model = joblib.load(path)
    except (EOFError, ValueError, KeyError, IndexError, pickle.UnpicklingError) as exc:
        raise DatasetFormatError(f"{path}: unreadable baseline file ({exc})") from exc
    if not isinstance(model, BaselineModel):
        raise DatasetFormatError(f"{path}: not a baseline model file")
    return model
