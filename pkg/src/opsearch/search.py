"""Search procedures over partial paths.

Scorers passed to the beam searches only need a ``batch(paths, inst)`` method
returning one float per path (higher is better); see :mod:`opsearch.heuristics`.
Policies passed to the rollouts are plain callables ``(path, inst) -> array``
with one entry per node index.
"""
from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .instance import Instance, PathState, close, extend, feasible_extensions

DEFAULT_EXACT_LIMIT = 16


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchResult:
    best_path: PathState
    expanded: int
    elapsed: float

    @property
    def prize(self) -> float:
        return self.best_path.prize

    @property
    def cost(self) -> float:
        return self.best_path.cost

    @property
    def nodes(self) -> list:
        return list(self.best_path.nodes)


def _score(scorer, paths, inst) -> np.ndarray:
    if not paths:
        return np.empty(0)
    scores = np.asarray(scorer.batch(paths, inst), dtype=np.float64)
    if scores.shape != (len(paths),):
        raise SearchError(f"scorer returned shape {scores.shape} for {len(paths)} paths")
    return scores


class CostLevelQueues:
    """One bounded priority queue per cost interval of width ``tau``.

    Each queue holds at most ``capacity`` paths.  Rank is (score desc,
    insertion order asc); on overflow the lowest-ranked path is dropped.
    """

    def __init__(self, t_max: float, tau: float, capacity: int):
        self.tau = tau
        self.capacity = capacity
        self.last_index = math.ceil(t_max / tau)
        self.queues = [[] for _ in range(self.last_index + 1)]
        self._seq = itertools.count()

    def index(self, cost: float) -> int:
        return min(math.ceil(cost / self.tau), self.last_index)

    def push(self, t: int, score: float, path: PathState) -> None:
        heap = self.queues[t]
        # heap top is the eviction candidate: lowest score, latest insertion
        heapq.heappush(heap, (score, -next(self._seq), path))
        if len(heap) > self.capacity:
            heapq.heappop(heap)

    def drain(self, t: int) -> list:
        """Remove and return every path in queue ``t`` in rank order."""
        items = self.queues[t]
        self.queues[t] = []
        items.sort(key=lambda it: (-it[0], -it[1]))
        return [it[2] for it in items]

    def __len__(self):
        return sum(len(q) for q in self.queues)


def cost_level_beam_search(inst: Instance, scorer, K: int, tau: float) -> SearchResult:
    """Beam search whose beams are bucketed by accumulated travel cost.

    Children of every path drained from interval ``t`` are scored in one
    batch, then pushed (parent rank order, then node index) into the queue of
    interval ``ceil(cost / tau)``.  Children that land back in ``t`` are
    drained in a further pass before moving on.  The best path by prize seen
    at insertion time is closed and returned.
    """
    if K < 1:
        raise ValueError(f"beam size K must be >= 1, got {K}")
    if not (tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    if inst.t_max > 0 and tau > inst.t_max:
        raise ValueError(f"tau={tau} exceeds the budget {inst.t_max}")
    t0 = time.perf_counter()
    root = inst.empty_path()
    queues = CostLevelQueues(inst.t_max, tau, K)
    queues.push(0, 0.0, root)
    best = root
    expanded = 0
    for t in range(queues.last_index + 1):
        while queues.queues[t]:
            parents = queues.drain(t)
            expanded += len(parents)
            children = [extend(p, v, inst) for p in parents for v in feasible_extensions(p, inst)]
            scores = _score(scorer, children, inst)
            for child, score in zip(children, scores):
                queues.push(max(t, queues.index(child.cost)), float(score), child)
                if child.prize > best.prize:
                    best = child
    return SearchResult(close(best, inst), expanded, time.perf_counter() - t0)


def step_beam_search(inst: Instance, scorer, beam: int) -> SearchResult:
    """Classic beam search synchronised on path length."""
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    t0 = time.perf_counter()
    root = inst.empty_path()
    best = close(root, inst)
    frontier = [root]
    expanded = 0
    while frontier:
        expanded += len(frontier)
        children = [extend(p, v, inst) for p in frontier for v in feasible_extensions(p, inst)]
        for child in children:
            if child.prize > best.prize:
                best = close(child, inst)
        if len(children) > beam:
            scores = _score(scorer, children, inst)
            # stable sort keeps insertion order among equal scores
            order = sorted(range(len(children)), key=lambda i: -scores[i])[:beam]
            children = [children[i] for i in order]
        frontier = children
    return SearchResult(best, expanded, time.perf_counter() - t0)


def greedy_rollout(inst: Instance, policy: Callable, start: Optional[PathState] = None) -> SearchResult:
    """Follow the argmax of ``policy`` over feasible nodes until none is left.

    Ties go to the lowest node index.
    """
    t0 = time.perf_counter()
    p = inst.empty_path() if start is None else start
    steps = 0
    while True:
        feas = feasible_extensions(p, inst)
        if not feas:
            break
        scores = np.asarray(policy(p, inst), dtype=np.float64)
        v = feas[int(np.argmax(scores[feas]))]
        p = extend(p, v, inst)
        steps += 1
    return SearchResult(close(p, inst), steps, time.perf_counter() - t0)


def sampled_rollout(
    inst: Instance, probs: Callable, seed: int, max_steps: Optional[int] = None
) -> SearchResult:
    """Sample one node per state from ``probs(path, inst)`` until none is feasible.

    ``max_steps`` stops early and closes the path (every sampled node keeps the
    end reachable, so closing is always legal).
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    p = inst.empty_path()
    steps = 0
    while max_steps is None or steps < max_steps:
        feas = feasible_extensions(p, inst)
        if not feas:
            break
        pv = np.asarray(probs(p, inst), dtype=np.float64)[feas]
        total = pv.sum()
        if not total > 0:
            raise SearchError(f"empty distribution support at path {p.nodes}")
        if abs(total - 1.0) > 1e-6:
            raise SearchError(f"distribution sums to {total}, expected 1")
        cdf = np.cumsum(pv)
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        # guard against landing on a zero-mass tail through rounding
        i = min(i, int(np.flatnonzero(pv)[-1]))
        p = extend(p, feas[i], inst)
        steps += 1
    return SearchResult(close(p, inst), steps, time.perf_counter() - t0)


def shortest_path_costs(inst: Instance) -> np.ndarray:
    """All-pairs shortest travel costs (Floyd-Warshall)."""
    d = np.array(inst.cost, dtype=np.float64)
    for k in range(inst.n):
        np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :], out=d)
    return d


class _Exact:
    def __init__(self, inst: Instance, prune: bool):
        self.inst = inst
        self.prune = prune
        self.cost = inst.cost
        self.prize = inst.prize
        # valid on non-metric matrices too, unlike direct edge costs
        self.sp = shortest_path_costs(inst)
        self.expanded = 0

    def best_from(self, p: PathState) -> PathState:
        """Optimal open path extending ``p`` (ties: first in index order)."""
        self.best = p
        self._dfs(p)
        return self.best

    def _dfs(self, p: PathState) -> None:
        self.expanded += 1
        inst = self.inst
        feas = feasible_extensions(p, inst)
        if self.prune and feas:
            slack = inst.t_max - p.cost
            reach = self.sp[p.nodes[-1]] + self.sp[:, inst.end]
            bound = p.prize
            for v in range(inst.n):
                if not p.mask >> v & 1 and v != inst.end and reach[v] <= slack + 1e-12:
                    bound += self.prize[v]
            if bound <= self.best.prize:
                return
        for v in feas:
            child = extend(p, v, inst)
            if child.prize > self.best.prize:
                self.best = child
            self._dfs(child)


def exhaustive_exact(
    inst: Instance, limit: int = DEFAULT_EXACT_LIMIT, prune: bool = True
) -> SearchResult:
    """Provably optimal path by depth-first enumeration with branch and bound."""
    return exact_from(inst, inst.empty_path(), limit=limit, prune=prune)


def exact_from(
    inst: Instance, p: PathState, limit: int = DEFAULT_EXACT_LIMIT, prune: bool = True
) -> SearchResult:
    """Optimal completion of the open path ``p``."""
    if inst.n > limit:
        raise SearchError(f"instance has {inst.n} nodes, above the enumeration limit {limit}")
    t0 = time.perf_counter()
    solver = _Exact(inst, prune)
    best = solver.best_from(p)
    return SearchResult(close(best, inst), solver.expanded, time.perf_counter() - t0)
