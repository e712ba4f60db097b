"""Detection accuracy (ACC) and missing-alarm rate (MAR), attack = positive."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix

from gridsim.state_estimation import Verdict


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, predicted_attack: Sequence[bool], actual_attack: Sequence[bool]) -> "ConfusionCounts":
        predicted = np.asarray(predicted_attack, dtype=bool)
        actual = np.asarray(actual_attack, dtype=bool)
        if predicted.shape != actual.shape:
            raise ValueError(f"{predicted.shape[0]} predictions for {actual.shape[0]} samples")
        tn, fp, fn, tp = confusion_matrix(actual, predicted, labels=[False, True]).ravel()
        return cls(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn))

    @classmethod
    def from_verdicts(cls, verdicts: Sequence[Verdict], actual_attack: Sequence[bool]) -> "ConfusionCounts":
        return cls.from_predictions([v is Verdict.ATTACK for v in verdicts], actual_attack)


class Metrics(NamedTuple):
    acc: float
    mar: Optional[float]


def compute_metrics(c: ConfusionCounts) -> Metrics:
    """ACC over all samples; MAR = FN / (TP + FN), ``None`` without positives."""

    if c.total == 0:
        raise ValueError("cannot compute metrics on zero samples")
    positives = c.tp + c.fn
    return Metrics(acc=(c.tp + c.tn) / c.total, mar=c.fn / positives if positives else None)
