"""Orienteering instances, partial paths and instance files.

An instance is the tuple (nodes, cost matrix, prizes, budget, start, end) with
an arbitrary nonnegative cost matrix.  Paths are immutable values; every
operation returns a new :class:`PathState`.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

# Budgets used for the standard generated benchmark sizes.
DEFAULT_T_MAX = {20: 2.0, 50: 3.0, 100: 4.0}

FORMAT_FIELDS = ("n", "t_max", "start", "end", "prize", "cost")


class InstanceError(ValueError):
    """Raised when instance data violates the model invariants."""


class InstanceFormatError(InstanceError):
    """Raised when an instance file cannot be parsed."""


class PathError(ValueError):
    """Raised on an illegal path operation (revisit, closed path, over budget)."""


class PrizeKind(str, enum.Enum):
    CONSTANT = "constant"
    UNIFORM = "uniform"
    DISTANCE = "distance"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Instance:
    cost: np.ndarray
    prize: np.ndarray
    t_max: float
    start: int
    end: int
    coords: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.prize.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        same_coords = (self.coords is None and other.coords is None) or (
            self.coords is not None
            and other.coords is not None
            and np.array_equal(self.coords, other.coords)
        )
        return (
            self.n == other.n
            and self.t_max == other.t_max
            and self.start == other.start
            and self.end == other.end
            and np.array_equal(self.cost, other.cost)
            and np.array_equal(self.prize, other.prize)
            and same_coords
        )

    __hash__ = None  # type: ignore[assignment]

    def empty_path(self) -> "PathState":
        return PathState((self.start,), 1 << self.start, 0.0, float(self.prize[self.start]))


def new_instance(cost, prize, t_max: float, start: int, end: int, coords=None) -> Instance:
    """Validate raw arrays and build an :class:`Instance`.

    Prizes of ``start`` and ``end`` are forced to zero.
    """
    cost = np.array(cost, dtype=np.float64)
    prize = np.array(prize, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InstanceError(f"cost matrix must be square, got shape {cost.shape}")
    n = cost.shape[0]
    if prize.shape != (n,):
        raise InstanceError(f"prize vector has shape {prize.shape}, expected ({n},)")
    if n < 1:
        raise InstanceError("instance needs at least one node")
    if not np.all(np.isfinite(cost)):
        raise InstanceError("cost matrix contains non-finite entries")
    if np.any(cost < 0):
        i, j = np.argwhere(cost < 0)[0]
        raise InstanceError(f"negative cost entry cost[{i}][{j}]={cost[i, j]}")
    diag = np.diag(cost)
    if np.any(diag != 0):
        i = int(np.flatnonzero(diag)[0])
        raise InstanceError(f"nonzero diagonal cost[{i}][{i}]={diag[i]}")
    if not np.all(np.isfinite(prize)) or np.any(prize < 0):
        raise InstanceError("prizes must be finite and nonnegative")
    t_max = float(t_max)
    if not math.isfinite(t_max) or t_max < 0:
        raise InstanceError(f"t_max must be a nonnegative real, got {t_max}")
    for name, idx in (("start", start), ("end", end)):
        if isinstance(idx, bool) or int(idx) != idx or not 0 <= idx < n:
            raise InstanceError(f"{name} index {idx} out of range [0, {n})")
    start, end = int(start), int(end)
    prize[start] = 0.0
    prize[end] = 0.0
    if coords is not None:
        coords = np.array(coords, dtype=np.float64)
        if coords.shape != (n, 2):
            raise InstanceError(f"coords has shape {coords.shape}, expected ({n}, 2)")
        coords = _frozen(coords)
    return Instance(_frozen(cost), _frozen(prize), t_max, start, end, coords)


@dataclass(frozen=True)
class PathState:
    """A partial (or closed) path.

    ``mask`` is the visited set as a bit mask over node indices.
    """

    nodes: tuple
    mask: int
    cost: float
    prize: float
    closed: bool = False

    @property
    def last(self) -> int:
        return self.nodes[-1]

    def is_visited(self, v: int) -> bool:
        return bool(self.mask >> v & 1)

    def visited(self, n: int) -> np.ndarray:
        return np.array([bool(self.mask >> v & 1) for v in range(n)])

    def __len__(self):
        return len(self.nodes)


def extend(p: PathState, v: int, inst: Instance) -> PathState:
    if p.closed:
        raise PathError("path is already closed")
    if p.mask >> v & 1:
        raise PathError(f"node {v} already visited")
    return PathState(
        p.nodes + (v,),
        p.mask | (1 << v),
        p.cost + float(inst.cost[p.nodes[-1], v]),
        p.prize + float(inst.prize[v]),
    )


def unvisited(p: PathState, n: int) -> np.ndarray:
    return np.array([not (p.mask >> v & 1) for v in range(n)])


def feasible_extensions(p: PathState, inst: Instance) -> list:
    """Unvisited nodes (other than the end) from which the end is still reachable."""
    if p.closed:
        return []
    # same association as the cost of close(extend(p, v)), so the guard is exact
    total = (p.cost + inst.cost[p.nodes[-1]]) + inst.cost[:, inst.end]
    ok = total <= inst.t_max
    ok[inst.end] = False
    mask = p.mask
    return [int(v) for v in np.flatnonzero(ok) if not (mask >> int(v) & 1)]


def close(p: PathState, inst: Instance) -> PathState:
    if p.closed:
        raise PathError("path is already closed")
    end = inst.end
    if end == p.nodes[-1] and len(p.nodes) > 1:
        # end was appended explicitly; nothing left to travel
        return PathState(p.nodes, p.mask, p.cost, p.prize, True)
    cost = p.cost + float(inst.cost[p.nodes[-1], end])
    if cost > inst.t_max:
        raise PathError(f"closing costs {cost} which exceeds the budget {inst.t_max}")
    return PathState(p.nodes + (end,), p.mask | (1 << end), cost, p.prize + float(inst.prize[end]), True)


def path_from_nodes(nodes: Sequence[int], inst: Instance) -> PathState:
    """Rebuild a path by extending from the start; closes it if it ends at ``end``."""
    nodes = [int(v) for v in nodes]
    if not nodes or nodes[0] != inst.start:
        raise PathError("path must begin at the start node")
    p = inst.empty_path()
    body = nodes[1:]
    closing = len(nodes) > 1 and nodes[-1] == inst.end
    if closing:
        body = body[:-1]
    for v in body:
        p = extend(p, v, inst)
    return close(p, inst) if closing else p


def path_cost(nodes: Sequence[int], inst: Instance) -> float:
    total = 0.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        total += float(inst.cost[a, b])
    return total


def path_prize(nodes: Sequence[int], inst: Instance) -> float:
    total = 0.0
    for v in dict.fromkeys(nodes):
        total += float(inst.prize[v])
    return total


def default_t_max(n: int) -> float:
    try:
        return DEFAULT_T_MAX[n]
    except KeyError:
        raise InstanceError(f"no default budget for n={n}; pass t_max explicitly") from None


def generate_euclidean_instance(
    n: int, kind: Union[PrizeKind, str], t_max: float, seed: Union[int, tuple]
) -> Instance:
    """Sample ``n`` points in the unit square; node 0 is both start and end."""
    if n < 2:
        raise InstanceError(f"need at least 2 nodes, got {n}")
    kind = PrizeKind(kind)
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    diff = coords[:, None, :] - coords[None, :, :]
    cost = np.sqrt((diff**2).sum(-1))
    start = end = 0
    if kind is PrizeKind.CONSTANT:
        prize = np.ones(n)
    elif kind is PrizeKind.UNIFORM:
        prize = rng.integers(1, 101, size=n) / 100.0
    else:
        d = cost[start]
        dmax = d.max()
        ratio = d / dmax if dmax > 0 else np.zeros(n)
        prize = (1.0 + np.floor(99.0 * ratio)) / 100.0
    return new_instance(cost, prize, t_max, start, end, coords=coords)


def instance_to_dict(inst: Instance) -> dict:
    d = {
        "n": inst.n,
        "t_max": inst.t_max,
        "start": inst.start,
        "end": inst.end,
        "prize": [float(x) for x in inst.prize],
        "cost": [[float(x) for x in row] for row in inst.cost],
    }
    if inst.coords is not None:
        d["coords"] = [[float(x), float(y)] for x, y in inst.coords]
    return d


def instance_from_dict(d: dict, source: str = "<dict>") -> Instance:
    if not isinstance(d, dict):
        raise InstanceFormatError(f"{source}: top-level value must be an object")
    for key in FORMAT_FIELDS:
        if key not in d:
            raise InstanceFormatError(f"{source}: missing field '{key}'")
    n = d["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise InstanceFormatError(f"{source}: field 'n' must be a positive integer")
    cost = d["cost"]
    if not isinstance(cost, list) or len(cost) != n:
        raise InstanceFormatError(f"{source}: field 'cost' must have {n} rows")
    for i, row in enumerate(cost):
        if not isinstance(row, list) or len(row) != n:
            raise InstanceFormatError(f"{source}: field 'cost' row {i} must have {n} entries")
    if not isinstance(d["prize"], list) or len(d["prize"]) != n:
        raise InstanceFormatError(f"{source}: field 'prize' must have {n} entries")
    for key in ("start", "end"):
        if not isinstance(d[key], int) or isinstance(d[key], bool):
            raise InstanceFormatError(f"{source}: field '{key}' must be an integer")
    try:
        t_max = float(d["t_max"])
        cost_arr = np.array(cost, dtype=np.float64)
        prize_arr = np.array(d["prize"], dtype=np.float64)
        coords = d.get("coords")
        if coords is not None:
            coords = np.array(coords, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InstanceFormatError(f"{source}: non-numeric value ({exc})") from None
    return new_instance(cost_arr, prize_arr, t_max, d["start"], d["end"], coords=coords)


def write_instance(inst: Instance, path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst)) + "\n", encoding="utf-8")


def read_instance(path) -> Instance:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return instance_from_dict(d, str(path))
