"""Grid cases: bus/branch records, case documents, and modeling-error variants.

A case document is JSON with top-level keys ``base_mva``, ``buses`` and
``branches`` (see ``gridsim/cases/case14.json``). Bus ids in documents are
external ids; every ``GridCase`` also carries a contiguous 0-based position
for each bus, which is what matrix assembly uses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from gridsim.errors import CaseError

logger = logging.getLogger(__name__)

CASE_DIR = Path(__file__).parent / "cases"
EMBEDDED_CASES = {path.stem: path for path in sorted(CASE_DIR.glob("*.json"))}

BUS_KEYS = ("index", "kind", "p_load", "q_load", "p_gen", "v_setpoint")
BRANCH_KEYS = ("from", "to", "r", "x", "b_shunt")

CaseSource = Union[str, Path, Mapping[str, Any]]


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class PerturbScope(str, Enum):
    R_AND_X = "r_and_x"
    X_ONLY = "x_only"


def _finite(value: Any, what: str) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError) as exc:
        raise CaseError(f"{what}: expected a number, got {value!r}") from exc
    if not math.isfinite(number):
        raise CaseError(f"{what}: value must be finite, got {number}")
    return number


@dataclass(frozen=True)
class BusRecord:
    index: int
    kind: BusKind
    p_load: float = 0.0
    q_load: float = 0.0
    p_gen: float = 0.0
    v_setpoint: float = 1.0
    b_shunt: float = 0.0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", BusKind(self.kind))
        except ValueError as exc:
            raise CaseError(f"bus {self.index}: unknown kind {self.kind!r}") from exc
        for name in ("p_load", "q_load", "p_gen", "v_setpoint", "b_shunt"):
            object.__setattr__(self, name, _finite(getattr(self, name), f"bus {self.index} {name}"))
        if self.kind is not BusKind.PQ and self.v_setpoint <= 0:
            raise CaseError(f"bus {self.index}: v_setpoint must be positive, got {self.v_setpoint}")


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0

    def __post_init__(self) -> None:
        label = f"branch {self.from_bus}->{self.to_bus}"
        if self.from_bus == self.to_bus:
            raise CaseError(f"{label}: from and to bus are the same")
        for name in ("r", "x", "b_shunt"):
            object.__setattr__(self, name, _finite(getattr(self, name), f"{label} {name}"))
        if self.x == 0.0:
            raise CaseError(f"{label}: zero reactance")
        if self.r < 0.0:
            raise CaseError(f"{label}: negative resistance {self.r}")

    def admittance(self) -> Tuple[float, float]:
        """Series admittance (g, b) of the branch."""

        denom = self.r * self.r + self.x * self.x
        return self.r / denom, -self.x / denom


@dataclass(frozen=True)
class PerturbSpec:
    delta: float
    seed: int = 0
    scope: PerturbScope = PerturbScope.R_AND_X

    def __post_init__(self) -> None:
        object.__setattr__(self, "scope", PerturbScope(self.scope))
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class GridCase:
    id: str
    base_mva: float
    buses: Tuple[BusRecord, ...]
    branches: Tuple[BranchRecord, ...]
    slack_bus: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.buses:
            raise CaseError(f"case {self.id}: no buses")
        if self.base_mva <= 0:
            raise CaseError(f"case {self.id}: base_mva must be positive")

        seen: Dict[int, int] = {}
        for pos, bus in enumerate(self.buses):
            if bus.index in seen:
                raise CaseError(f"case {self.id}: duplicate bus {bus.index}")
            seen[bus.index] = pos

        slacks = [bus.index for bus in self.buses if bus.kind is BusKind.SLACK]
        if not slacks:
            raise CaseError(f"case {self.id}: missing slack bus")
        if len(slacks) > 1:
            raise CaseError(f"case {self.id}: more than one slack bus {slacks}")
        object.__setattr__(self, "slack_bus", slacks[0])

        for k, branch in enumerate(self.branches):
            for end in (branch.from_bus, branch.to_bus):
                if end not in seen:
                    raise CaseError(
                        f"case {self.id}: branch {k} ({branch.from_bus}->{branch.to_bus}) references unknown bus {end}"
                    )

        n = len(self.buses)
        if n > 1:
            rows = [seen[b.from_bus] for b in self.branches]
            cols = [seen[b.to_bus] for b in self.branches]
            graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            n_components, labels = connected_components(graph, directed=False)
            if n_components > 1:
                island = [self.buses[i].index for i in np.flatnonzero(labels != labels[seen[self.slack_bus]])]
                raise CaseError(f"case {self.id}: disconnected graph, buses {island} not reachable from slack")

    # -- renumbering -------------------------------------------------------

    @cached_property
    def positions(self) -> Dict[int, int]:
        return {bus.index: pos for pos, bus in enumerate(self.buses)}

    @property
    def external_ids(self) -> Tuple[int, ...]:
        return tuple(bus.index for bus in self.buses)

    def position(self, bus_id: int) -> int:
        try:
            return self.positions[bus_id]
        except KeyError as exc:
            raise CaseError(f"case {self.id}: unknown bus {bus_id}") from exc

    @property
    def slack_position(self) -> int:
        return self.positions[self.slack_bus]

    # -- array views ---------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def from_idx(self) -> np.ndarray:
        return np.array([self.positions[b.from_bus] for b in self.branches], dtype=np.int64)

    @cached_property
    def to_idx(self) -> np.ndarray:
        return np.array([self.positions[b.to_bus] for b in self.branches], dtype=np.int64)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([b.r for b in self.branches], dtype=float)

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([b.x for b in self.branches], dtype=float)

    @cached_property
    def b_shunt(self) -> np.ndarray:
        return np.array([b.b_shunt for b in self.branches], dtype=float)

    @cached_property
    def bus_shunt(self) -> np.ndarray:
        return np.array([b.b_shunt for b in self.buses], dtype=float)

    @cached_property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses], dtype=float)

    @cached_property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses], dtype=float)

    @cached_property
    def p_gen(self) -> np.ndarray:
        return np.array([b.p_gen for b in self.buses], dtype=float)

    @cached_property
    def v_setpoint(self) -> np.ndarray:
        return np.array([b.v_setpoint for b in self.buses], dtype=float)

    @cached_property
    def pv_idx(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind is BusKind.PV], dtype=np.int64)

    @cached_property
    def pq_idx(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind is BusKind.PQ], dtype=np.int64)

    @cached_property
    def fingerprint(self) -> str:
        """Hash of the topology only, shared by a case and its perturbed variants."""

        topology = {
            "buses": list(self.external_ids),
            "branches": [[b.from_bus, b.to_bus] for b in self.branches],
        }
        digest = hashlib.sha256(json.dumps(topology, sort_keys=True).encode("utf-8"))
        return digest.hexdigest()[:16]

    def neighbors(self, bus_id: int) -> List[int]:
        out = []
        for b in self.branches:
            if b.from_bus == bus_id:
                out.append(b.to_bus)
            elif b.to_bus == bus_id:
                out.append(b.from_bus)
        return sorted(set(out))

    def with_branch_parameters(self, r: Iterable[float], x: Iterable[float], case_id: str | None = None) -> "GridCase":
        branches = tuple(
            replace(branch, r=float(rv), x=float(xv)) for branch, rv, xv in zip(self.branches, r, x)
        )
        return GridCase(id=case_id or self.id, base_mva=self.base_mva, buses=self.buses, branches=branches)


# -- documents -----------------------------------------------------------------


def _require(record: Mapping[str, Any], keys: Iterable[str], what: str) -> None:
    missing = [key for key in keys if key not in record]
    if missing:
        raise CaseError(f"schema violation: {what} missing {', '.join(missing)}")


def case_from_dict(document: Mapping[str, Any], case_id: str | None = None) -> GridCase:
    if not isinstance(document, Mapping):
        raise CaseError("schema violation: case document must be a JSON object")
    _require(document, ("base_mva", "buses", "branches"), "case document")

    buses = []
    for pos, raw in enumerate(document["buses"]):
        if not isinstance(raw, Mapping):
            raise CaseError(f"schema violation: bus entry {pos} is not an object")
        _require(raw, BUS_KEYS, f"bus entry {pos}")
        buses.append(
            BusRecord(
                index=int(raw["index"]),
                kind=raw["kind"],
                p_load=raw["p_load"],
                q_load=raw["q_load"],
                p_gen=raw["p_gen"],
                v_setpoint=raw["v_setpoint"],
                b_shunt=raw.get("b_shunt", 0.0),
            )
        )

    branches = []
    for pos, raw in enumerate(document["branches"]):
        if not isinstance(raw, Mapping):
            raise CaseError(f"schema violation: branch entry {pos} is not an object")
        _require(raw, BRANCH_KEYS, f"branch entry {pos}")
        branches.append(
            BranchRecord(
                from_bus=int(raw["from"]),
                to_bus=int(raw["to"]),
                r=raw["r"],
                x=raw["x"],
                b_shunt=raw["b_shunt"],
            )
        )

    return GridCase(
        id=str(document.get("id", case_id or "case")),
        base_mva=_finite(document["base_mva"], "base_mva"),
        buses=tuple(buses),
        branches=tuple(branches),
    )


def case_to_dict(case: GridCase) -> Dict[str, Any]:
    return {
        "id": case.id,
        "base_mva": case.base_mva,
        "buses": [
            {
                "index": bus.index,
                "kind": bus.kind.value,
                "p_load": bus.p_load,
                "q_load": bus.q_load,
                "p_gen": bus.p_gen,
                "v_setpoint": bus.v_setpoint,
                "b_shunt": bus.b_shunt,
            }
            for bus in case.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b_shunt": br.b_shunt}
            for br in case.branches
        ],
    }


def load_case(source: CaseSource) -> GridCase:
    """Load and validate a case from an embedded name, a JSON path, or a mapping.

    Embedded names are the stems of ``gridsim/cases/*.json`` (``case3``,
    ``case14``). Larger cases such as the 118-bus system are loaded from a
    file path in the same schema.
    """

    if isinstance(source, Mapping):
        return case_from_dict(source)

    path = EMBEDDED_CASES.get(str(source)) if isinstance(source, str) else None
    path = path or Path(source)
    if not path.exists():
        raise CaseError(f"case document '{source}' not found (embedded cases: {', '.join(EMBEDDED_CASES)})")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CaseError(f"schema violation: {path} is not valid JSON ({exc})") from exc
    case = case_from_dict(document, case_id=path.stem)
    logger.debug("Loaded case %s: %d buses, %d branches", case.id, case.n_bus, case.n_branch)
    return case


def save_case(case: GridCase, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(case_to_dict(case), indent=2), encoding="utf-8")
    return path


# -- parameters ------------------------------------------------------------------


def branch_admittances(case: GridCase) -> np.ndarray:
    """Per-branch series admittance as an ``(n_branch, 2)`` array of (g, b)."""

    denom = case.r ** 2 + case.x ** 2
    return np.column_stack([case.r / denom, -case.x / denom])


def perturb_case(case: GridCase, spec: PerturbSpec, max_resample: int = 100) -> GridCase:
    """Return the "real-world" variant of ``case`` with line-parameter errors.

    Each in-scope value v becomes v * (1 + delta * w) with w ~ U[-1, 1) drawn
    from ``spec.seed``. The unit draws do not depend on delta, so two deltas
    with the same seed move every parameter along the same direction.
    """

    if spec.delta == 0.0:
        return case

    rng = np.random.default_rng(spec.seed)
    draws = rng.uniform(-1.0, 1.0, size=(case.n_branch, 2))
    x_new = case.x * (1.0 + spec.delta * draws[:, 1])
    for _ in range(max_resample):
        zero = x_new == 0.0
        if not zero.any():
            break
        draws[zero, 1] = rng.uniform(-1.0, 1.0, size=int(zero.sum()))
        x_new = case.x * (1.0 + spec.delta * draws[:, 1])
    else:
        raise CaseError(f"case {case.id}: perturbation with delta={spec.delta} keeps producing zero reactance")

    if spec.scope is PerturbScope.R_AND_X:
        r_new = case.r * (1.0 + spec.delta * draws[:, 0])
    else:
        r_new = case.r.copy()

    perturbed = case.with_branch_parameters(r_new, x_new, case_id=f"{case.id}-d{spec.delta:g}-s{spec.seed}")
    logger.debug("Perturbed %s with delta=%s (%s)", case.id, spec.delta, spec.scope.value)
    return perturbed
