"""Fitted double Q-learning over orienteering subproblems.

Every state is the subproblem left after a partial path; the action is the
next node and the reward is that node's prize.  Episodes end when no node can
be added without breaking the budget, after which the path closes to the end
node at zero reward.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .instance import (
    Instance,
    PathState,
    PrizeKind,
    PathError,
    close,
    extend,
    feasible_extensions,
    generate_euclidean_instance,
)
from .neural import NonFiniteError, QNetwork, QNetworkConfig, encode_state, save_checkpoint
from .search import SearchResult, greedy_rollout, sampled_rollout

log = logging.getLogger(__name__)

VALIDATION_SEED_BASE = 1_000_000


@dataclass(frozen=True)
class TrainConfig:
    n: int = 20
    kind: str = "uniform"
    t_max: float = 2.0
    batch_size: int = 64
    lr: float = 1e-3
    replay_capacity: int = 10_000
    target_sync: int = 100
    n_envs: int = 16
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: Optional[int] = None  # default: half of max_steps
    max_steps: int = 20_000
    val_size: int = 200
    eval_every: int = 1000
    log_every: int = 100
    grad_clip: Optional[float] = 10.0
    seed: int = 0
    network: QNetworkConfig = field(default_factory=QNetworkConfig)

    def __post_init__(self):
        PrizeKind(self.kind)
        for name in ("n", "batch_size", "replay_capacity", "target_sync", "n_envs", "val_size", "eval_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not (self.lr > 0 and self.t_max > 0):
            raise ValueError("lr and t_max must be positive")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eps_decay_steps is not None and self.eps_decay_steps < 1:
            raise ValueError("eps_decay_steps must be positive")

    def epsilon(self, step: int) -> float:
        span = self.eps_decay_steps or max(1, self.max_steps // 2)
        frac = min(1.0, step / span)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "network" in d:
            net = d["network"]
            d["network"] = net if isinstance(net, QNetworkConfig) else QNetworkConfig(**net)
        return cls(**d)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def validation_instances(cfg: TrainConfig) -> list:
    return [
        generate_euclidean_instance(cfg.n, cfg.kind, cfg.t_max, VALIDATION_SEED_BASE + i)
        for i in range(cfg.val_size)
    ]


# ---------------------------------------------------------------------------
# environment


def env_step(inst: Instance, p: PathState, v: int):
    """Take action ``v``; returns ``(reward, next_path, done)``."""
    if v not in feasible_extensions(p, inst):
        raise PathError(f"node {v} is not a feasible move after {p.nodes}")
    nxt = extend(p, v, inst)
    return float(inst.prize[v]), nxt, not feasible_extensions(nxt, inst)


class Transition:
    __slots__ = ("inst", "path", "action", "reward", "next_path", "done", "_enc", "_next_enc")

    def __init__(self, inst, path, action, reward, next_path, done):
        self.inst = inst
        self.path = path
        self.action = action
        self.reward = reward
        self.next_path = next_path
        self.done = done
        self._enc = None
        self._next_enc = None

    def encoding(self):
        if self._enc is None:
            self._enc = encode_state(self.inst, self.path)
        return self._enc

    def next_encoding(self):
        if self._next_enc is None:
            self._next_enc = encode_state(self.inst, self.next_path)
        return self._next_enc


class ReplayMemory:
    """FIFO ring buffer with seeded uniform sampling (no repeats within a batch)."""

    def __init__(self, capacity: int, seed: int = 0):
        self.buffer = deque(maxlen=capacity)
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)

    def push(self, t: Transition) -> None:
        self.buffer.append(t)

    def sample(self, size: int) -> list:
        idx = self.rng.choice(len(self.buffer), size=min(size, len(self.buffer)), replace=False)
        return [self.buffer[i] for i in idx]

    def __len__(self):
        return len(self.buffer)


def epsilon_greedy(q: np.ndarray, feas: list, eps: float, rng: np.random.Generator) -> int:
    """Greedy node (ties: lowest index) with probability ``1 - eps``, else uniform."""
    if len(feas) == 1:
        return feas[0]
    if rng.random() < eps:
        return feas[int(rng.integers(len(feas)))]
    return feas[int(np.argmax(q[feas]))]


def double_q_target(batch, online, target) -> np.ndarray:
    """``r + q_target(s', argmax_v q_online(s', v))``; just ``r`` at terminal states."""
    y = np.array([t.reward for t in batch], dtype=np.float64)
    live = [i for i, t in enumerate(batch) if not t.done]
    if not live:
        return y
    if hasattr(online, "q_encoded") and hasattr(target, "q_encoded"):
        encs = [batch[i].next_encoding() for i in live]
        sizes = [batch[i].inst.n for i in live]
        q_on, q_tg = online.q_encoded(encs, sizes), target.q_encoded(encs, sizes)
    else:
        pairs = [(batch[i].inst, batch[i].next_path) for i in live]
        q_on, q_tg = online.q_batch(pairs), target.q_batch(pairs)
    for i, qo, qt in zip(live, q_on, q_tg):
        y[i] += qt[int(np.argmax(qo))]
    return y


# ---------------------------------------------------------------------------
# evaluation


def batched_greedy(instances, net) -> list:
    """Greedy rollouts of ``net`` on all instances in lockstep (one forward per step)."""
    paths = [inst.empty_path() for inst in instances]
    feas = [feasible_extensions(p, inst) for p, inst in zip(paths, instances)]
    while True:
        live = [i for i, f in enumerate(feas) if f]
        if not live:
            break
        qs = net.q_batch([(instances[i], paths[i]) for i in live])
        for i, q in zip(live, qs):
            v = feas[i][int(np.argmax(q[feas[i]]))]
            paths[i] = extend(paths[i], v, instances[i])
            feas[i] = feasible_extensions(paths[i], instances[i])
    return [close(p, inst) for p, inst in zip(paths, instances)]


def evaluate(policy, instances, seed: Optional[int] = None):
    """Mean and per-instance prize of a policy.

    Networks (anything with ``q_batch``) roll out greedily in lockstep; plain
    callables use :func:`greedy_rollout`; with ``seed`` the callable is a
    distribution sampled by :func:`sampled_rollout` (seed + instance index).
    """
    if not instances:
        raise ValueError("empty instance set")
    if hasattr(policy, "q_batch"):
        prizes = [p.prize for p in batched_greedy(instances, policy)]
    elif seed is not None:
        prizes = [sampled_rollout(inst, policy, seed + i).prize for i, inst in enumerate(instances)]
    else:
        prizes = [greedy_rollout(inst, policy).prize for inst in instances]
    return float(np.mean(prizes)), prizes


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best: QNetwork
    final: QNetwork
    best_val: float
    best_step: int
    log: list


def _q_taken(net: QNetwork, batch) -> torch.Tensor:
    encs = [t.encoding() for t in batch]
    q = net.forward(net.collate(encs))
    rows = [int(np.searchsorted(e.node_ids, t.action)) for e, t in zip(encs, batch)]
    return q[torch.arange(len(batch)), torch.as_tensor(rows)]


def train(cfg: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0])
    online = QNetwork(cfg.network)
    target = online.clone()
    best = online.clone()
    opt = torch.optim.Adam(online.params.values(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    memory = ReplayMemory(cfg.replay_capacity, seed=cfg.seed)
    val = validation_instances(cfg)
    records = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        records.append(rec)
        if sink:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()

    counter = 0

    def fresh():
        # skip instances where no node fits the budget: they have no transitions
        nonlocal counter
        while True:
            inst = generate_euclidean_instance(cfg.n, cfg.kind, cfg.t_max, (cfg.seed, counter))
            counter += 1
            if feasible_extensions(inst.empty_path(), inst):
                return inst, inst.empty_path()

    envs = [fresh() for _ in range(cfg.n_envs)]
    best_val, _ = evaluate(online, val)
    best_step = 0
    emit({"step": 0, "loss": None, "epsilon": cfg.epsilon(0), "val_mean": best_val})
    losses = []
    try:
        for step in range(1, cfg.max_steps + 1):
            eps = cfg.epsilon(step - 1)
            qs = online.q_batch(envs)
            for i, ((inst, p), q) in enumerate(zip(envs, qs)):
                v = epsilon_greedy(q, feasible_extensions(p, inst), eps, rng)
                r, nxt, done = env_step(inst, p, v)
                memory.push(Transition(inst, p, v, r, nxt, done))
                envs[i] = fresh() if done else (inst, nxt)

            batch = memory.sample(cfg.batch_size)
            y = torch.as_tensor(double_q_target(batch, online, target), dtype=cfg.network.torch_dtype)
            opt.zero_grad()
            loss = ((y - _q_taken(online, batch)) ** 2).mean()
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss {loss.item()} at step {step}")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(list(online.params.values()), cfg.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))

            if step % cfg.target_sync == 0:
                target.load_from(online)
            val_mean = None
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                val_mean, _ = evaluate(online, val)
                if val_mean > best_val:
                    best_val, best_step = val_mean, step
                    best.load_from(online)
                    if checkpoint_path:
                        save_checkpoint(best, checkpoint_path, _meta(cfg, best_step, best_val))
                log.info("step %d val %.4f best %.4f@%d", step, val_mean, best_val, best_step)
            if step % cfg.log_every == 0 or val_mean is not None:
                emit({"step": step, "loss": float(np.mean(losses)), "epsilon": eps, "val_mean": val_mean})
                losses = []
    finally:
        if sink:
            sink.close()
    if checkpoint_path:
        save_checkpoint(best, checkpoint_path, _meta(cfg, best_step, best_val))
    return TrainResult(best, online, best_val, best_step, records)


def _meta(cfg: TrainConfig, step: int, val: float) -> dict:
    return {"train_config": cfg.to_dict(), "best_step": step, "val_mean": val}
