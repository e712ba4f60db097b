"""Dense detector network on numpy: BN -> affine -> LeakyReLU per hidden layer.

Parameters live in a flat dict keyed ``bn{l}.gamma``, ``bn{l}.beta``,
``W{l}``, ``b{l}`` for hidden layer ``l`` and ``W_out``/``b_out`` for the
two-way softmax head. Weights are stored ``(fan_in, fan_out)`` so a layer is
``x @ W + b``. Output column 0 is the attack probability, column 1 normal.

Checkpoint layout::

    b"FDIACK1\\n" | uint64 LE header length | JSON header
    float64 LE blocks in the order of ``header["manifest"]``
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from gridsim.dataset import NormStats
from gridsim.errors import DatasetFormatError, LayoutError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FDIACK1\n"
CHECKPOINT_VERSION = 1


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_layers: int = 3
    hidden_width: int = 200
    mmd_depth: int = 3
    leaky_slope: float = 0.01
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.hidden_width < 1 or self.hidden_layers < 1:
            raise ValueError("input_dim, hidden_layers and hidden_width must be at least 1")
        if not 1 <= self.mmd_depth <= self.hidden_layers:
            raise ValueError(f"mmd_depth must lie in [1, {self.hidden_layers}], got {self.mmd_depth}")
        if not 0.0 <= self.bn_momentum < 1.0 or self.bn_epsilon <= 0:
            raise ValueError("bn_momentum must lie in [0, 1) and bn_epsilon must be positive")

    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers
        return list(zip(dims[:-1], dims[1:])) + [(self.hidden_width, 2)]


@dataclass
class MLPModel:
    config: MLPConfig
    params: Dict[str, np.ndarray]
    running_mean: Dict[int, np.ndarray]
    running_var: Dict[int, np.ndarray]
    mode: Mode = Mode.TRAIN
    step: int = 0
    norm_stats: Optional[NormStats] = None
    metrics: Dict[str, Any] = field(default_factory=dict)

    def param_names(self) -> List[str]:
        return list(self.params)

    def theta_j(self) -> List[str]:
        """Names of the weight matrices feeding the layer-J features."""

        return [f"W{l}" for l in range(self.config.mmd_depth)]

    def eval(self) -> "MLPModel":
        self.mode = Mode.EVAL
        return self

    def train(self) -> "MLPModel":
        self.mode = Mode.TRAIN
        return self

    def copy(self) -> "MLPModel":
        return copy.deepcopy(self)

    def frobenius_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p * p) for p in self.params.values())))


def init_model(cfg: MLPConfig, seed: int = 0) -> MLPModel:
    """Xavier-normal weights, zero biases, unit BN scale and zero shift."""

    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    running_mean: Dict[int, np.ndarray] = {}
    running_var: Dict[int, np.ndarray] = {}
    dims = cfg.layer_dims()
    for l, (fan_in, fan_out) in enumerate(dims[:-1]):
        params[f"bn{l}.gamma"] = np.ones(fan_in)
        params[f"bn{l}.beta"] = np.zeros(fan_in)
        params[f"W{l}"] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
        params[f"b{l}"] = np.zeros(fan_out)
        running_mean[l] = np.zeros(fan_in)
        running_var[l] = np.ones(fan_in)
    fan_in, fan_out = dims[-1]
    params["W_out"] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
    params["b_out"] = np.zeros(fan_out)
    return MLPModel(config=cfg, params=params, running_mean=running_mean, running_var=running_var)


class LayerCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool
    bn_out: np.ndarray
    pre: np.ndarray


class ForwardResult(NamedTuple):
    logits: np.ndarray
    probs: np.ndarray
    features: np.ndarray
    hidden: np.ndarray
    cache: List[LayerCache]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    model: MLPModel,
    batch: np.ndarray,
    train: Optional[bool] = None,
    update_running: bool = True,
) -> ForwardResult:
    """Run the network on a batch.

    ``train`` defaults to the model mode. In train mode BN uses the batch
    statistics and, when ``update_running`` is set, folds them into the
    running statistics; eval mode uses the running statistics only.
    ``features`` is the activation of hidden layer ``mmd_depth``.
    """

    cfg = model.config
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise LayoutError(f"batch has shape {x.shape}, network expects width {cfg.input_dim}")
    train = model.mode is Mode.TRAIN if train is None else train
    if train and x.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of at least 2 samples for batch normalization")

    cache: List[LayerCache] = []
    features = x
    h = x
    for l in range(cfg.hidden_layers):
        if train:
            mean = h.mean(axis=0)
            var = h.var(axis=0)
            if update_running:
                m = cfg.bn_momentum
                model.running_mean[l] = m * model.running_mean[l] + (1.0 - m) * mean
                model.running_var[l] = m * model.running_var[l] + (1.0 - m) * var
        else:
            mean, var = model.running_mean[l], model.running_var[l]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
        xhat = (h - mean) * inv_std
        bn_out = model.params[f"bn{l}.gamma"] * xhat + model.params[f"bn{l}.beta"]
        pre = bn_out @ model.params[f"W{l}"] + model.params[f"b{l}"]
        h = np.where(pre > 0, pre, cfg.leaky_slope * pre)
        cache.append(LayerCache(xhat, inv_std, train, bn_out, pre))
        if l + 1 == cfg.mmd_depth:
            features = h

    logits = h @ model.params["W_out"] + model.params["b_out"]
    return ForwardResult(logits=logits, probs=softmax(logits), features=features, hidden=h, cache=cache)


def backpropagate(
    model: MLPModel,
    result: ForwardResult,
    grad_logits: Optional[np.ndarray] = None,
    grad_features: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Gradients of a loss given its derivative at the logits and/or layer-J features.

    BN gradients flow through the batch statistics when the forward pass used
    them. Parameters the loss does not reach get zero gradients.
    """

    cfg = model.config
    grads = {name: np.zeros_like(value) for name, value in model.params.items()}
    d_h: Optional[np.ndarray] = None
    if grad_logits is not None:
        grads["W_out"] = result.hidden.T @ grad_logits
        grads["b_out"] = grad_logits.sum(axis=0)
        d_h = grad_logits @ model.params["W_out"].T

    for l in reversed(range(cfg.hidden_layers)):
        if l + 1 == cfg.mmd_depth and grad_features is not None:
            d_h = grad_features if d_h is None else d_h + grad_features
        if d_h is None:
            continue
        layer = result.cache[l]
        d_pre = d_h * np.where(layer.pre > 0, 1.0, cfg.leaky_slope)
        grads[f"W{l}"] = layer.bn_out.T @ d_pre
        grads[f"b{l}"] = d_pre.sum(axis=0)
        d_bn = d_pre @ model.params[f"W{l}"].T
        grads[f"bn{l}.gamma"] = np.sum(d_bn * layer.xhat, axis=0)
        grads[f"bn{l}.beta"] = d_bn.sum(axis=0)
        d_xhat = d_bn * model.params[f"bn{l}.gamma"]
        if layer.batch_stats:
            n = d_xhat.shape[0]
            d_h = (layer.inv_std / n) * (
                n * d_xhat - d_xhat.sum(axis=0) - layer.xhat * np.sum(d_xhat * layer.xhat, axis=0)
            )
        else:
            d_h = d_xhat * layer.inv_std
    return grads


# -- checkpoints -------------------------------------------------------------------


def _blocks(model: MLPModel) -> List[Tuple[str, np.ndarray]]:
    blocks = list(model.params.items())
    for l in range(model.config.hidden_layers):
        blocks.append((f"bn{l}.running_mean", model.running_mean[l]))
        blocks.append((f"bn{l}.running_var", model.running_var[l]))
    return blocks


def save_checkpoint(model: MLPModel, path: Path) -> Path:
    blocks = _blocks(model)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "step": model.step,
        "mode": model.mode.value,
        "metrics": model.metrics,
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "manifest": [[name, list(block.shape)] for name, block in blocks],
    }
    encoded = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<Q", len(encoded)))
        handle.write(encoded)
        for _, block in blocks:
            handle.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    logger.info("Wrote checkpoint %s (step %d)", path, model.step)
    return path


def load_checkpoint(path: Path) -> MLPModel:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC) or len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise DatasetFormatError(f"{path}: not a model checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: corrupt checkpoint header ({exc})") from exc
    offset += header_len

    sizes = [int(np.prod(shape)) for _, shape in header["manifest"]]
    if len(blob) != offset + 8 * sum(sizes):
        raise DatasetFormatError(f"{path}: checkpoint payload is truncated or corrupt")

    model = init_model(MLPConfig(**header["config"]))
    for (name, shape), size in zip(header["manifest"], sizes):
        block = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        offset += 8 * size
        if name.endswith(".running_mean"):
            model.running_mean[int(name[2:].split(".")[0])] = block
        elif name.endswith(".running_var"):
            model.running_var[int(name[2:].split(".")[0])] = block
        elif name in model.params:
            model.params[name] = block
        else:
            raise DatasetFormatError(f"{path}: unknown parameter block {name}")
    model.step = int(header["step"])
    model.mode = Mode(header["mode"])
    model.metrics = dict(header.get("metrics") or {})
    stats = header.get("norm_stats")
    model.norm_stats = NormStats.from_dict(stats) if stats else None
    return model
