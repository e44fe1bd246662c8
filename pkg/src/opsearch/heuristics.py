"""Path scores and per-state node policies.

A *score* maps a partial path to a real number (higher is better) and is used
to rank beams.  A *policy* maps a state to one value per node index; only the
entries of currently feasible nodes are meaningful.
"""
from __future__ import annotations

import math

import numpy as np

from .instance import Instance, PathState, extend, feasible_extensions
from .search import exact_from

TSILI_EXPONENT = 4
TSILI_CANDIDATES = 4


class HeuristicScore:
    name = "score"

    def __call__(self, p: PathState, inst: Instance) -> float:
        raise NotImplementedError

    def batch(self, paths, inst: Instance) -> np.ndarray:
        return np.array([self(p, inst) for p in paths], dtype=np.float64)


def prize_only_score(p: PathState) -> float:
    return p.prize


class PrizeScore(HeuristicScore):
    name = "prize"

    def __call__(self, p, inst):
        return p.prize

    def batch(self, paths, inst):
        return np.fromiter((p.prize for p in paths), dtype=np.float64, count=len(paths))


def tsili_node_score(v: int, p: PathState, inst: Instance) -> float:
    """``(prize / travel cost) ** 4`` from the last node of ``p`` to ``v``.

    A free move to a prized node scores ``inf``; a free move to an unprized
    node scores 0.
    """
    c = float(inst.cost[p.nodes[-1], v])
    r = float(inst.prize[v])
    if c == 0.0:
        return math.inf if r > 0 else 0.0
    return (r / c) ** TSILI_EXPONENT


def tsili_scores(p: PathState, inst: Instance) -> np.ndarray:
    """Tsili node scores for feasible nodes, ``-inf`` elsewhere (greedy policy)."""
    out = np.full(inst.n, -np.inf)
    for v in feasible_extensions(p, inst):
        out[v] = tsili_node_score(v, p, inst)
    return out


def tsili_probabilities(p: PathState, inst: Instance) -> np.ndarray:
    """Selection probabilities restricted to the four best-scoring feasible nodes."""
    feas = feasible_extensions(p, inst)
    if not feas:
        raise ValueError(f"no feasible node after path {p.nodes}")
    scores = [tsili_node_score(v, p, inst) for v in feas]
    # stable sort: equal scores keep index order
    order = sorted(range(len(feas)), key=lambda i: -scores[i])[: min(TSILI_CANDIDATES, len(feas))]
    top = np.array([scores[i] for i in order])
    if np.isinf(top).any():
        weights = np.isinf(top).astype(np.float64)
    elif top.sum() == 0:
        weights = np.ones(len(top))
    else:
        weights = top
    probs = np.zeros(inst.n)
    probs[[feas[i] for i in order]] = weights / weights.sum()
    return probs


class RandomPolicy:
    """Uniform choice among feasible nodes.

    Calling the policy returns i.i.d. uniform scores seeded by ``(seed, path)``,
    so a greedy rollout over them is a seeded random walk while the policy
    itself stays a pure function of the state.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def __call__(self, p: PathState, inst: Instance) -> np.ndarray:
        return np.random.default_rng([self.seed, *p.nodes]).random(inst.n)

    def probabilities(self, p: PathState, inst: Instance) -> np.ndarray:
        feas = feasible_extensions(p, inst)
        out = np.zeros(inst.n)
        if feas:
            out[feas] = 1.0 / len(feas)
        return out


def random_policy(seed: int = 0) -> RandomPolicy:
    return RandomPolicy(seed)


class LogProbScore(HeuristicScore):
    """Sum of ``log p(v_i | s_i)`` over the selection steps of a path.

    Prefix scores and per-state distributions are memoised per instance;
    the memo never changes a result.
    """

    name = "logprob"

    def __init__(self, policy):
        self.policy = policy
        self._inst = None
        self._scores: dict = {}
        self._probs: dict = {}

    def _reset(self, inst):
        if inst is not self._inst:
            self._inst = inst
            self._scores = {}
            self._probs = {}

    def _score(self, nodes: tuple, inst: Instance) -> float:
        cached = self._scores.get(nodes)
        if cached is not None:
            return cached
        if len(nodes) <= 1:
            s = 0.0
        else:
            prefix = nodes[:-1]
            probs = self._probs.get(prefix)
            if probs is None:
                probs = self.policy(_rebuild(prefix, inst), inst)
                self._probs[prefix] = probs
            pv = float(probs[nodes[-1]])
            s = self._score(prefix, inst) + (math.log(pv) if pv > 0 else -math.inf)
        self._scores[nodes] = s
        return s

    def __call__(self, p, inst):
        self._reset(inst)
        nodes = p.nodes[:-1] if p.closed else p.nodes
        return self._score(tuple(nodes), inst)


def _rebuild(nodes: tuple, inst: Instance) -> PathState:
    p = inst.empty_path()
    for v in nodes[1:]:
        p = extend(p, v, inst)
    return p


def logprob_accumulation_scorer(policy) -> LogProbScore:
    return LogProbScore(policy)


def best_q(q: np.ndarray, feas) -> float:
    if not feas:
        return 0.0
    return float(np.max(q[feas]))


def learned_q_heuristic(p: PathState, inst: Instance, net) -> float:
    """``prize(P)`` plus the best action value of the subproblem left after ``P``."""
    feas = feasible_extensions(p, inst)
    if not feas:
        return p.prize
    return p.prize + best_q(net.q_values(inst, p), feas)


class LearnedQScore(HeuristicScore):
    """Batched :func:`learned_q_heuristic`; ``net`` needs ``q_batch``."""

    name = "dqn"

    def __init__(self, net):
        self.net = net

    def __call__(self, p, inst):
        return learned_q_heuristic(p, inst, self.net)

    def batch(self, paths, inst):
        out = np.fromiter((p.prize for p in paths), dtype=np.float64, count=len(paths))
        feas = [feasible_extensions(p, inst) for p in paths]
        live = [i for i, f in enumerate(feas) if f]
        if live:
            qs = self.net.q_batch([(inst, paths[i]) for i in live])
            for i, q in zip(live, qs):
                out[i] += best_q(q, feas[i])
        return out


class ExactQTable:
    """Oracle action values: prize of ``v`` plus the optimal remaining prize after it.

    Same ``q_values`` / ``q_batch`` interface as the neural network; only
    usable where exhaustive enumeration is (small ``n``).
    """

    def __init__(self, limit: int = 12):
        self.limit = limit
        self._inst = None
        self._memo: dict = {}

    def value(self, inst: Instance, p: PathState) -> float:
        """Best additional prize collectable from state ``p``."""
        if inst is not self._inst:
            self._inst = inst
            self._memo = {}
        key = p.nodes
        if key not in self._memo:
            best = exact_from(inst, p, limit=self.limit).best_path
            self._memo[key] = best.prize - p.prize
        return self._memo[key]

    def q_values(self, inst: Instance, p: PathState) -> np.ndarray:
        out = np.full(inst.n, -np.inf)
        for v in feasible_extensions(p, inst):
            out[v] = float(inst.prize[v]) + self.value(inst, extend(p, v, inst))
        return out

    def q_batch(self, pairs) -> list:
        return [self.q_values(inst, p) for inst, p in pairs]


SCORER_NAMES = ("prize", "tsili", "logprob-tsili", "dqn")


class TsiliScore(HeuristicScore):
    """Tsili score of the last step of a path (0 for the empty path)."""

    name = "tsili"

    def __call__(self, p, inst):
        nodes = p.nodes[:-1] if p.closed else p.nodes
        if len(nodes) < 2:
            return 0.0
        prev = _rebuild(tuple(nodes[:-1]), inst)
        return tsili_node_score(nodes[-1], prev, inst)


def make_scorer(name: str, net=None) -> HeuristicScore:
    if name == "prize":
        return PrizeScore()
    if name == "tsili":
        return TsiliScore()
    if name == "logprob-tsili":
        return LogProbScore(tsili_probabilities)
    if name == "dqn":
        if net is None:
            raise ValueError("the dqn scorer needs a trained network")
        return LearnedQScore(net)
    raise ValueError(f"unknown scorer {name!r}; choose from {', '.join(SCORER_NAMES)}")
