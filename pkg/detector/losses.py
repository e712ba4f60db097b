"""Loss terms of the pre-training objective and their gradients.

Total loss = cross-entropy on source labels + lambda * MMD between layer-J
features of a source and a target batch + mu * exp(-||Theta_J||_F).
"""

from __future__ import annotations

from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist, pdist

from detector.network import MLPModel, backpropagate, forward

LOG_CLAMP = 1e-12


class MMDKernel(str, Enum):
    MEAN_DIFFERENCE = "mean_difference"
    GAUSSIAN = "gaussian"


class LossTerms(NamedTuple):
    ce: float
    mmd: float
    reg: float
    total: float


def one_hot(labels: np.ndarray) -> np.ndarray:
    """Rows (y_a, y_n): (1, 0) for attack, (0, 1) for normal."""

    labels = np.asarray(labels).astype(bool)
    return np.column_stack([labels, ~labels]).astype(np.float64)


def loss_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood; ``targets`` are one-hot rows or 0/1 labels."""

    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = one_hot(targets)
    if probs.shape != targets.shape:
        raise ValueError(f"probabilities {probs.shape} and targets {targets.shape} do not match")
    return float(-np.mean(np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP)), axis=1)))


def _median_pairs(pooled: np.ndarray) -> Tuple[float, List[Tuple[int, int, float]]]:
    """Median of the positive pairwise squared distances and the pairs it is made of.

    Each pair comes with its weight in the median (1 for an odd count,
    1/2 for each of the two middle pairs otherwise).
    """

    sq = pdist(pooled, "sqeuclidean")
    rows, cols = np.triu_indices(len(pooled), 1)
    keep = sq > 0
    sq, rows, cols = sq[keep], rows[keep], cols[keep]
    if not sq.size:
        return 1.0, []
    order = np.argsort(sq, kind="stable")
    k = sq.size
    picks = [order[k // 2]] if k % 2 else [order[k // 2 - 1], order[k // 2]]
    weight = 1.0 / len(picks)
    h = float(sum(weight * sq[p] for p in picks))
    return h, [(int(rows[p]), int(cols[p]), weight) for p in picks]


def median_bandwidth(source: np.ndarray, target: np.ndarray) -> float:
    return _median_pairs(np.vstack([source, target]))[0]


def mmd_with_gradients(
    source: np.ndarray,
    target: np.ndarray,
    kernel: MMDKernel = MMDKernel.MEAN_DIFFERENCE,
    bandwidth: Optional[float] = None,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """MMD value and its gradients w.r.t. each source and target feature row.

    ``mean_difference`` is the norm of the difference of batch means.
    ``gaussian`` is the unbiased MMD^2 with kernel exp(-d^2 / (2 h)), h the
    squared bandwidth (median heuristic unless given), clipped at 0. The
    gradients include the dependence of the median bandwidth on the features.
    """

    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValueError(f"feature batches {source.shape} and {target.shape} are not compatible")
    if len(source) == 0 or len(target) == 0:
        raise ValueError("MMD needs non-empty source and target batches")
    n, m = len(source), len(target)

    if MMDKernel(kernel) is MMDKernel.MEAN_DIFFERENCE:
        diff = source.mean(axis=0) - target.mean(axis=0)
        value = float(np.linalg.norm(diff))
        if value == 0.0:
            return 0.0, np.zeros_like(source), np.zeros_like(target)
        unit = diff / value
        return value, np.tile(unit / n, (n, 1)), np.tile(-unit / m, (m, 1))

    if n < 2 or m < 2:
        raise ValueError("the unbiased Gaussian MMD needs at least 2 samples per batch")
    pairs: List[Tuple[int, int, float]] = []
    if bandwidth is None:
        h, pairs = _median_pairs(np.vstack([source, target]))
    else:
        h = float(bandwidth)
    d_ss = cdist(source, source, "sqeuclidean")
    d_tt = cdist(target, target, "sqeuclidean")
    d_st = cdist(source, target, "sqeuclidean")
    k_ss = np.exp(-d_ss / (2.0 * h))
    k_tt = np.exp(-d_tt / (2.0 * h))
    k_st = np.exp(-d_st / (2.0 * h))
    np.fill_diagonal(k_ss, 0.0)
    np.fill_diagonal(k_tt, 0.0)

    c_ss, c_tt, c_st = 1.0 / (n * (n - 1)), 1.0 / (m * (m - 1)), 2.0 / (n * m)
    value = float(c_ss * k_ss.sum() + c_tt * k_tt.sum() - c_st * k_st.sum())
    if value <= 0.0:
        return 0.0, np.zeros_like(source), np.zeros_like(target)

    # d k(a, b) / d a = -k(a, b) (a - b) / h
    grad_s = (-2.0 * c_ss / h) * (k_ss.sum(axis=1)[:, None] * source - k_ss @ source)
    grad_s += (c_st / h) * (k_st.sum(axis=1)[:, None] * source - k_st @ target)
    grad_t = (-2.0 * c_tt / h) * (k_tt.sum(axis=1)[:, None] * target - k_tt @ target)
    grad_t += (c_st / h) * (k_st.sum(axis=0)[:, None] * target - k_st.T @ source)

    if pairs:
        # the median bandwidth moves with the two (or one) middle pairs
        # d k / d h = k d^2 / (2 h^2)
        d_value_d_h = (
            c_ss * np.sum(k_ss * d_ss) + c_tt * np.sum(k_tt * d_tt) - c_st * np.sum(k_st * d_st)
        ) / (2.0 * h * h)
        pooled = np.vstack([source, target])
        grad_pooled = np.vstack([grad_s, grad_t])
        for i, j, weight in pairs:
            step = d_value_d_h * weight * 2.0 * (pooled[i] - pooled[j])
            grad_pooled[i] += step
            grad_pooled[j] -= step
        grad_s, grad_t = grad_pooled[:n], grad_pooled[n:]
    return value, grad_s, grad_t


def loss_mmd(
    features_source: np.ndarray,
    features_target: np.ndarray,
    kernel: MMDKernel = MMDKernel.MEAN_DIFFERENCE,
    bandwidth: Optional[float] = None,
) -> float:
    return mmd_with_gradients(features_source, features_target, kernel, bandwidth)[0]


def _theta_j_norm(model: MLPModel) -> float:
    return float(np.sqrt(sum(np.sum(model.params[name] ** 2) for name in model.theta_j())))


def loss_weight_reg(model: MLPModel) -> float:
    """exp(-||Theta_J||_F) over the first J weight matrices (no biases, no BN)."""

    return float(np.exp(-_theta_j_norm(model)))


def weight_reg_gradients(model: MLPModel) -> Dict[str, np.ndarray]:
    norm = _theta_j_norm(model)
    if norm == 0.0:
        return {name: np.zeros_like(model.params[name]) for name in model.theta_j()}
    scale = -np.exp(-norm) / norm
    return {name: scale * model.params[name] for name in model.theta_j()}


def loss_combined(ce: float, mmd: float, reg: float, lam: float, mu: float) -> float:
    if lam < 0 or mu < 0:
        raise ValueError("lambda and mu must be non-negative")
    return ce + lam * mmd + mu * reg


def combined_loss(
    model: MLPModel,
    batch_source: np.ndarray,
    batch_target: Optional[np.ndarray],
    labels_source: np.ndarray,
    lam: float,
    mu: float,
    kernel: MMDKernel = MMDKernel.MEAN_DIFFERENCE,
    bandwidth: Optional[float] = None,
) -> LossTerms:
    """Evaluate the objective in train mode without touching running statistics."""

    src = forward(model, batch_source, train=True, update_running=False)
    ce = loss_cross_entropy(src.probs, labels_source)
    mmd = 0.0
    if lam > 0 and batch_target is not None:
        tgt = forward(model, batch_target, train=True, update_running=False)
        mmd = loss_mmd(src.features, tgt.features, kernel, bandwidth)
    reg = loss_weight_reg(model) if mu > 0 else 0.0
    return LossTerms(ce, mmd, reg, loss_combined(ce, mmd, reg, lam, mu))


def backward(
    model: MLPModel,
    batch_source: np.ndarray,
    batch_target: Optional[np.ndarray],
    labels_source: np.ndarray,
    lam: float,
    mu: float,
    kernel: MMDKernel = MMDKernel.MEAN_DIFFERENCE,
    bandwidth: Optional[float] = None,
    update_running: bool = False,
) -> Tuple[Dict[str, np.ndarray], LossTerms]:
    """Exact gradients of the combined loss for one source/target batch pair.

    Source and target go through separate train-mode passes, each normalized
    by its own batch statistics; only the source pass may update the running
    statistics. With ``lam == 0`` the target batch is not evaluated at all.
    """

    src = forward(model, batch_source, train=True, update_running=update_running)
    targets = one_hot(labels_source)
    ce = loss_cross_entropy(src.probs, targets)
    grad_logits = (src.probs - targets) / len(targets)

    mmd = 0.0
    grad_feat_s = None
    grads_target = None
    if lam > 0 and batch_target is not None:
        tgt = forward(model, batch_target, train=True, update_running=False)
        mmd, g_s, g_t = mmd_with_gradients(src.features, tgt.features, kernel, bandwidth)
        grad_feat_s = lam * g_s
        grads_target = backpropagate(model, tgt, grad_features=lam * g_t)

    grads = backpropagate(model, src, grad_logits=grad_logits, grad_features=grad_feat_s)
    if grads_target is not None:
        for name, value in grads_target.items():
            grads[name] += value

    reg = 0.0
    if mu > 0:
        reg = loss_weight_reg(model)
        for name, value in weight_reg_gradients(model).items():
            grads[name] += mu * value

    return grads, LossTerms(ce, mmd, reg, loss_combined(ce, mmd, reg, lam, mu))
