"""Source, target and target-test datasets for the detector.

Every sample is a feature row ``Pd || Qd || P || Q || p || q`` built from one
solved load profile. Randomness is derived per sample from
``(seed, base id, draw id, role, attempt)``, so the output does not depend on
generation order or on how many worker processes were used.

Binary file layout::

    b"FDIADS1\\n"  | uint64 LE header length | JSON header
    float32 LE feature rows (count x n_features)
    one byte per sample: (domain << 4) | label
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from gridsim.attacks import AttackMode, AttackSpec, apply_attack, construct_attack
from gridsim.errors import DatasetFormatError, LayoutError, PowerFlowError
from gridsim.grid_model import GridCase
from gridsim.power_flow import (
    MeasurementLayout,
    NoiseDistribution,
    NoiseSpec,
    measure,
    measurement_layout,
    solve_power_flow,
)

logger = logging.getLogger(__name__)

MAGIC = b"FDIADS1\n"
FORMAT_VERSION = 1
TRAIN_FRACTION = 0.7
MAX_ATTEMPTS = 20
RESAMPLE_WARN_FRACTION = 0.01


class Label(IntEnum):
    NORMAL = 0
    ATTACK = 1


class Domain(IntEnum):
    SOURCE = 0
    TARGET = 1
    TARGET_TEST = 2

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Domain":
        try:
            return cls[text.strip().upper().replace("-", "_")]
        except KeyError as exc:
            raise ValueError(f"unknown domain '{text}' (expected source, target or target-test)") from exc


# Separate random streams per role; target-test must not replay target draws.
ROLE_TAGS = {Domain.SOURCE: 1, Domain.TARGET: 2, Domain.TARGET_TEST: 3}


@dataclass(frozen=True)
class GenerationConfig:
    n_base: int = 10
    n_per_base: int = 1000
    load_range: Tuple[float, float] = (0.5, 1.5)
    base_range: Tuple[float, float] = (0.8, 1.2)
    sigma: float = 0.01
    noise_distribution: NoiseDistribution = NoiseDistribution.UNIFORM_BOUNDED
    attack_buses: Tuple[int, ...] = (2, 3, 9)
    attack_intensities: Tuple[float, ...] = (0.1, 0.2, 0.3)
    attack_mode: AttackMode = AttackMode.ANGLE
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "load_range", tuple(float(v) for v in self.load_range))
        object.__setattr__(self, "base_range", tuple(float(v) for v in self.base_range))
        object.__setattr__(self, "attack_buses", tuple(int(b) for b in self.attack_buses))
        object.__setattr__(self, "attack_intensities", tuple(float(g) for g in self.attack_intensities))
        object.__setattr__(self, "noise_distribution", NoiseDistribution(self.noise_distribution))
        object.__setattr__(self, "attack_mode", AttackMode(self.attack_mode))
        if self.n_base < 1 or self.n_per_base < 1:
            raise ValueError("n_base and n_per_base must be at least 1")
        for name in ("load_range", "base_range"):
            low, high = getattr(self, name)
            if not 0 <= low <= high:
                raise ValueError(f"{name} must satisfy 0 <= low <= high, got {(low, high)}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if not self.attack_buses or not self.attack_intensities:
            raise ValueError("attack_buses and attack_intensities must be non-empty")
        if any(g <= 0 for g in self.attack_intensities):
            raise ValueError("attack intensities must be positive")

    @property
    def n_profiles(self) -> int:
        return self.n_base * self.n_per_base

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["noise_distribution"] = self.noise_distribution.value
        out["attack_mode"] = self.attack_mode.value
        out["load_range"] = list(self.load_range)
        out["base_range"] = list(self.base_range)
        out["attack_buses"] = list(self.attack_buses)
        out["attack_intensities"] = list(self.attack_intensities)
        return out


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-feature min/max of a training split; maps [min, max] onto [-1, 1]."""

    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "NormStats":
        data = np.asarray(features, dtype=np.float64)
        return cls(minimum=data.min(axis=0), maximum=data.max(axis=0))

    @property
    def constant(self) -> np.ndarray:
        return self.maximum == self.minimum

    def _span(self) -> np.ndarray:
        return np.where(self.constant, 1.0, self.maximum - self.minimum)

    def transform(self, features: np.ndarray) -> np.ndarray:
        data = np.asarray(features, dtype=np.float64)
        scaled = 2.0 * (data - self.minimum) / self._span() - 1.0
        return np.where(self.constant, 0.0, scaled)

    def inverse(self, features: np.ndarray) -> np.ndarray:
        data = np.asarray(features, dtype=np.float64)
        return np.where(self.constant, self.minimum, (data + 1.0) * 0.5 * self._span() + self.minimum)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Sequence[float]]) -> "NormStats":
        return cls(minimum=np.asarray(payload["minimum"], dtype=float), maximum=np.asarray(payload["maximum"], dtype=float))

    def same_as(self, other: Optional["NormStats"]) -> bool:
        return (
            other is not None
            and np.array_equal(self.minimum, other.minimum)
            and np.array_equal(self.maximum, other.maximum)
        )


class Split(NamedTuple):
    train: np.ndarray
    validation: np.ndarray


class LoadProfiles(NamedTuple):
    p_load: np.ndarray
    q_load: np.ndarray
    base_id: np.ndarray
    draw_id: np.ndarray


PROVENANCE_COLUMNS = ("base_id", "draw_id", "attack_bus", "gamma")


def feature_dim(layout: MeasurementLayout) -> int:
    return 2 * layout.n_bus + layout.size


def feature_names(layout: MeasurementLayout) -> Tuple[str, ...]:
    loads = [f"Pd_{i}" for i in layout.bus_ids] + [f"Qd_{i}" for i in layout.bus_ids]
    return tuple(loads) + layout.labels()


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    provenance: pd.DataFrame
    layout: MeasurementLayout
    seed: int = 0
    norm_stats: Optional[NormStats] = None
    split: Optional[Split] = None
    normalized: bool = False
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float32))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.uint8))
        object.__setattr__(self, "domains", np.asarray(self.domains, dtype=np.uint8))
        n = len(self.labels)
        if self.features.shape != (n, feature_dim(self.layout)):
            raise LayoutError(
                f"feature matrix has shape {self.features.shape}, layout expects ({n}, {feature_dim(self.layout)})"
            )
        if len(self.domains) != n or len(self.provenance) != n:
            raise ValueError("labels, domains and provenance must have one entry per sample")
        if np.any((self.labels == Label.ATTACK) & (self.domains == Domain.TARGET)):
            raise ValueError("attack samples cannot belong to the target domain")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> Dict[str, int]:
        attacks = int(np.count_nonzero(self.labels == Label.ATTACK))
        return {"normal": len(self) - attacks, "attack": attacks}

    def raw_features(self) -> np.ndarray:
        """Features in physical units (undoes normalization)."""

        if not self.normalized:
            return self.features.astype(np.float64)
        return self.norm_stats.inverse(self.features)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            domains=self.domains[idx],
            provenance=self.provenance.iloc[idx].reset_index(drop=True),
            split=None,
        )

    def train_part(self) -> "Dataset":
        if self.split is None:
            raise ValueError("dataset has no train/validation split")
        return self.subset(self.split.train)

    def validation_part(self) -> "Dataset":
        if self.split is None:
            raise ValueError("dataset has no train/validation split")
        return self.subset(self.split.validation)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        for part in parts[1:]:
            if part.layout != first.layout:
                raise LayoutError("cannot concatenate datasets with different layouts")
            if part.normalized != first.normalized or (
                first.normalized and not first.norm_stats.same_as(part.norm_stats)
            ):
                raise ValueError("cannot concatenate datasets normalized with different statistics")
        return cls(
            features=np.concatenate([p.features for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            domains=np.concatenate([p.domains for p in parts]),
            provenance=pd.concat([p.provenance for p in parts], ignore_index=True),
            layout=first.layout,
            seed=first.seed,
            norm_stats=first.norm_stats,
            normalized=first.normalized,
            metadata={**first.metadata, "parts": len(parts)},
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=[f"feature_{k}" for k in range(self.n_features)])
        frame["label"] = np.where(self.labels == Label.ATTACK, "attack", "normal")
        frame["domain"] = [Domain(int(d)).slug for d in self.domains]
        frame["base_id"] = self.provenance["base_id"].to_numpy()
        frame["draw_id"] = self.provenance["draw_id"].to_numpy()
        frame["attack_bus"] = self.provenance["attack_bus"].replace(-1, pd.NA).astype("Int64").to_numpy()
        frame["gamma"] = self.provenance["gamma"].to_numpy()
        return frame


# -- generation ------------------------------------------------------------------


def _sample_rng(seed: int, base_id: int, draw_id: int, role: Domain, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, base_id, draw_id, ROLE_TAGS[role], attempt]))


def _base_loads(case: GridCase, cfg: GenerationConfig, base_id: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, base_id]))
    factors = rng.uniform(*cfg.base_range, size=case.n_bus)
    return case.p_load * factors, case.q_load * factors


def _draw_loads(
    rng: np.random.Generator, base: Tuple[np.ndarray, np.ndarray], cfg: GenerationConfig
) -> Tuple[np.ndarray, np.ndarray]:
    u = rng.uniform(*cfg.load_range, size=len(base[0]))
    return base[0] * u, base[1] * u


def generate_load_profiles(case: GridCase, cfg: GenerationConfig, role: Domain = Domain.SOURCE) -> LoadProfiles:
    """``n_base * n_per_base`` per-bus load profiles; P and Q share the factor per bus."""

    p_rows, q_rows, base_ids, draw_ids = [], [], [], []
    for base_id in range(cfg.n_base):
        base = _base_loads(case, cfg, base_id)
        for draw_id in range(cfg.n_per_base):
            p, q = _draw_loads(_sample_rng(cfg.seed, base_id, draw_id, role, 0), base, cfg)
            p_rows.append(p)
            q_rows.append(q)
            base_ids.append(base_id)
            draw_ids.append(draw_id)
    return LoadProfiles(
        p_load=np.array(p_rows),
        q_load=np.array(q_rows),
        base_id=np.array(base_ids, dtype=np.int64),
        draw_id=np.array(draw_ids, dtype=np.int64),
    )


class _BaseBatch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    provenance: List[Tuple[int, int, int, float]]
    resampled: int


def _generate_base(case: GridCase, cfg: GenerationConfig, role: Domain, with_attacks: bool, base_id: int) -> _BaseBatch:
    base = _base_loads(case, cfg, base_id)
    rows: List[np.ndarray] = []
    labels: List[int] = []
    provenance: List[Tuple[int, int, int, float]] = []
    resampled = 0

    for draw_id in range(cfg.n_per_base):
        for attempt in range(MAX_ATTEMPTS):
            rng = _sample_rng(cfg.seed, base_id, draw_id, role, attempt)
            p_load, q_load = _draw_loads(rng, base, cfg)
            try:
                state = solve_power_flow(case, (p_load, q_load))
                break
            except PowerFlowError:
                resampled += 1
        else:
            raise PowerFlowError(
                f"case {case.id}: base {base_id} draw {draw_id} failed to converge after {MAX_ATTEMPTS} attempts"
            )

        noise = NoiseSpec(cfg.sigma, int(rng.integers(2**32)), cfg.noise_distribution)
        z = measure(case, state, noise)
        rows.append(np.concatenate([p_load, q_load, z.values]))
        labels.append(Label.NORMAL)
        provenance.append((base_id, draw_id, -1, float("nan")))

        if with_attacks:
            spec = AttackSpec.sample(
                cfg.attack_buses, cfg.attack_intensities, int(rng.integers(2**32)), cfg.attack_mode
            )
            bus, gamma = spec.target_buses[0], spec.intensity
            attack = construct_attack(case, state, spec)
            fresh = NoiseSpec(cfg.sigma, int(rng.integers(2**32)), cfg.noise_distribution)
            z_attacked = apply_attack(measure(case, state, fresh), attack)
            rows.append(np.concatenate([p_load, q_load, z_attacked.values]))
            labels.append(Label.ATTACK)
            provenance.append((base_id, draw_id, bus, gamma))

    return _BaseBatch(np.array(rows), np.array(labels, dtype=np.uint8), provenance, resampled)


def _generate(case: GridCase, cfg: GenerationConfig, role: Domain, with_attacks: bool, workers: int) -> Dataset:
    if with_attacks:
        for bus in cfg.attack_buses:
            case.position(bus)

    task = partial(_generate_base, case, cfg, role, with_attacks)
    base_ids = range(cfg.n_base)
    if workers > 1 and cfg.n_base > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            batches = list(executor.map(task, base_ids))
    else:
        batches = [task(base_id) for base_id in base_ids]

    resampled = sum(batch.resampled for batch in batches)
    if resampled > RESAMPLE_WARN_FRACTION * cfg.n_profiles:
        logger.warning(
            "Resampled %d of %d load profiles on %s after power-flow failures (above %.0f%%)",
            resampled,
            cfg.n_profiles,
            case.id,
            100 * RESAMPLE_WARN_FRACTION,
        )

    features = np.concatenate([batch.features for batch in batches])
    labels = np.concatenate([batch.labels for batch in batches])
    provenance = pd.DataFrame(
        [row for batch in batches for row in batch.provenance], columns=list(PROVENANCE_COLUMNS)
    ).astype({"base_id": "int64", "draw_id": "int64", "attack_bus": "int64", "gamma": "float64"})

    dataset = Dataset(
        features=features,
        labels=labels,
        domains=np.full(len(labels), role, dtype=np.uint8),
        provenance=provenance,
        layout=measurement_layout(case),
        seed=cfg.seed,
        metadata={
            "case_id": case.id,
            "role": role.slug,
            "resampled": resampled,
            "generation": cfg.to_dict(),
        },
    )
    logger.info(
        "Generated %s dataset on %s: %d samples (%s), %d resampled profiles",
        role.slug,
        case.id,
        len(dataset),
        dataset.class_counts(),
        resampled,
    )
    return dataset


def generate_source_dataset(case: GridCase, cfg: GenerationConfig, workers: int = 1) -> Dataset:
    """Balanced normal/attack samples under the nominal line parameters."""

    return _generate(case, cfg, Domain.SOURCE, with_attacks=True, workers=workers)


def generate_target_dataset(case: GridCase, cfg: GenerationConfig, workers: int = 1) -> Dataset:
    """Normal-only samples of the running system (perturbed parameters)."""

    return _generate(case, cfg, Domain.TARGET, with_attacks=False, workers=workers)


def generate_target_test_dataset(case: GridCase, cfg: GenerationConfig, workers: int = 1) -> Dataset:
    return _generate(case, cfg, Domain.TARGET_TEST, with_attacks=True, workers=workers)


# -- normalization -------------------------------------------------------------------


def split_indices(n: int, seed: int, train_fraction: float = TRAIN_FRACTION) -> Split:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return Split(train=np.sort(order[:n_train]), validation=np.sort(order[n_train:]))


def normalize_and_split(d: Dataset, seed: int, stats: Optional[NormStats] = None) -> Dataset:
    """7:3 train/validation split and min-max scaling to [-1, 1].

    Statistics come from the train split unless ``stats`` is given, which is
    how target and test data reuse the source map. Values outside the
    training range are not clipped.
    """

    if len(d) == 0:
        raise ValueError("cannot normalize an empty dataset")
    if d.normalized:
        raise ValueError("dataset is already normalized")
    split = split_indices(len(d), seed)
    if stats is None:
        stats = NormStats.fit(d.features[split.train])
    elif len(stats.minimum) != d.n_features:
        raise LayoutError(f"normalization stats cover {len(stats.minimum)} features, dataset has {d.n_features}")

    constant = int(np.count_nonzero(stats.constant))
    if constant:
        logger.warning("%d constant features map to 0 after normalization", constant)
    return replace(
        d,
        features=stats.transform(d.features),
        norm_stats=stats,
        split=split,
        normalized=True,
        metadata={**d.metadata, "constant_features": np.flatnonzero(stats.constant).tolist()},
    )


# -- persistence ---------------------------------------------------------------------


def _layout_to_dict(layout: MeasurementLayout) -> Dict[str, Any]:
    return {
        "bus_ids": list(layout.bus_ids),
        "branch_ends": [list(ends) for ends in layout.branch_ends],
        "fingerprint": layout.fingerprint,
    }


def _layout_from_dict(payload: Mapping[str, Any]) -> MeasurementLayout:
    return MeasurementLayout(
        bus_ids=tuple(int(b) for b in payload["bus_ids"]),
        branch_ends=tuple((int(f), int(t)) for f, t in payload["branch_ends"]),
        fingerprint=str(payload["fingerprint"]),
    )


def save_dataset(d: Dataset, path: Path) -> Path:
    header = {
        "version": FORMAT_VERSION,
        "count": len(d),
        "n_features": d.n_features,
        "layout": _layout_to_dict(d.layout),
        "seed": d.seed,
        "normalized": d.normalized,
        "norm_stats": d.norm_stats.to_dict() if d.norm_stats is not None else None,
        "split": {"train": d.split.train.tolist(), "validation": d.split.validation.tolist()} if d.split else None,
        "provenance": {column: d.provenance[column].tolist() for column in PROVENANCE_COLUMNS},
        "metadata": dict(d.metadata),
    }
    encoded = json.dumps(header).encode("utf-8")
    packed = ((d.domains.astype(np.uint8) << 4) | d.labels.astype(np.uint8)).astype(np.uint8)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(encoded)))
        handle.write(encoded)
        handle.write(d.features.astype("<f4").tobytes())
        handle.write(packed.tobytes())
    logger.info("Wrote dataset %s (%d samples)", path, len(d))
    return path


def load_dataset(path: Path, expected_layout: Optional[MeasurementLayout] = None) -> Dataset:
    """Read a dataset; ``expected_layout`` rejects files of another case."""

    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise DatasetFormatError(f"{path}: not a dataset file")
    offset = len(MAGIC)
    if len(blob) < offset + 8:
        raise DatasetFormatError(f"{path}: truncated header")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: corrupt header ({exc})") from exc
    offset += header_len

    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {header.get('version')}")
    count, n_features = int(header["count"]), int(header["n_features"])
    expected_size = offset + 4 * count * n_features + count
    if len(blob) != expected_size:
        raise DatasetFormatError(f"{path}: expected {expected_size} bytes, found {len(blob)} (truncated or corrupt)")

    layout = _layout_from_dict(header["layout"])
    if expected_layout is not None and (
        layout.fingerprint != expected_layout.fingerprint or layout.size != expected_layout.size
    ):
        raise LayoutError(
            f"{path}: dataset layout {layout.fingerprint} ({layout.n_bus} buses) does not match "
            f"expected {expected_layout.fingerprint} ({expected_layout.n_bus} buses)"
        )

    features = np.frombuffer(blob, dtype="<f4", count=count * n_features, offset=offset).reshape(count, n_features)
    packed = np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset + 4 * count * n_features)
    split = header.get("split")
    stats = header.get("norm_stats")
    provenance = pd.DataFrame({column: header["provenance"][column] for column in PROVENANCE_COLUMNS}).astype(
        {"base_id": "int64", "draw_id": "int64", "attack_bus": "int64", "gamma": "float64"}
    )
    return Dataset(
        features=features.astype(np.float32),
        labels=packed & 0x0F,
        domains=packed >> 4,
        provenance=provenance,
        layout=layout,
        seed=int(header["seed"]),
        norm_stats=NormStats.from_dict(stats) if stats else None,
        split=Split(np.asarray(split["train"], dtype=np.int64), np.asarray(split["validation"], dtype=np.int64))
        if split
        else None,
        normalized=bool(header["normalized"]),
        metadata=header.get("metadata", {}),
    )


def export_csv(d: Dataset, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d.to_frame().to_csv(path, index=False)
    return path
