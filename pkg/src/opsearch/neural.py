"""Edge-aware graph attention + Transformer encoder action-value network.

The network reads one state (a subproblem: remaining nodes, the current node
and the end node, the cost matrix restricted to them and the remaining
budget) and returns one action value per remaining node.

States are batched by padding to the largest subproblem in the batch; padded
rows never take part in any attention and are dropped from the output.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .instance import Instance, PathState, feasible_extensions

NODE_FEATURES = 3  # prize, is_current, is_end
GAT_INPUT = 2 * NODE_FEATURES + 2  # [x_v | x_k | u_vk | g]
CHECKPOINT_FORMAT = "opsearch-qnet"
CHECKPOINT_VERSION = 1
_MASKED = -1e9


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class QNetworkConfig:
    hidden: int = 64
    gat_heads: int = 20
    tel_heads: int = 8
    tel_layers: int = 4
    leaky_slope: float = 0.2
    seed: int = 0
    activation: str = "elu"
    ff_mult: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("hidden", "gat_heads", "tel_heads", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tel_layers < 0:
            raise ValueError("tel_layers must be >= 0")
        if self.hidden % self.tel_heads:
            raise ValueError(f"hidden={self.hidden} not divisible by tel_heads={self.tel_heads}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


ACTIVATIONS = {"elu": F.elu, "sigmoid": torch.sigmoid, "relu": F.relu, "identity": lambda x: x}


@dataclass
class StateEncoding:
    node_feat: np.ndarray  # (m, 3)
    edge_feat: np.ndarray  # (m, m) travel cost between kept rows
    global_feat: np.ndarray  # (1,) remaining budget
    node_ids: np.ndarray  # (m,) original node index of each row
    mask: np.ndarray  # (m,) True where the node is a feasible next move

    @property
    def m(self) -> int:
        return len(self.node_ids)


def encode_state(inst: Instance, p: PathState) -> StateEncoding:
    """Subproblem left after ``p``: unvisited nodes plus the current and end node."""
    if p.closed:
        raise ValueError("cannot encode a closed path")
    n = inst.n
    cur, end = p.nodes[-1], inst.end
    keep = [v for v in range(n) if not (p.mask >> v & 1) or v == cur or v == end]
    ids = np.array(keep, dtype=np.int64)
    x = np.zeros((len(keep), NODE_FEATURES))
    x[:, 0] = inst.prize[ids]
    x[ids == cur, 0] = 0.0  # already collected
    x[ids == cur, 1] = 1.0
    x[ids == end, 2] = 1.0
    mask = np.zeros(len(keep), dtype=bool)
    feas = feasible_extensions(p, inst)
    if feas:
        mask[np.searchsorted(ids, feas)] = True
    return StateEncoding(
        node_feat=x,
        edge_feat=inst.cost[np.ix_(ids, ids)].copy(),
        global_feat=np.array([inst.t_max - p.cost]),
        node_ids=ids,
        mask=mask,
    )


@dataclass
class Batch:
    x: torch.Tensor  # (B, M, 3)
    edge: torch.Tensor  # (B, M, M)
    g: torch.Tensor  # (B,)
    valid: torch.Tensor  # (B, M) bool, real (non-padding) rows
    mask: torch.Tensor  # (B, M) bool, feasible rows
    node_ids: list = field(default_factory=list)


def collate(encodings, dtype=torch.float64) -> Batch:
    B = len(encodings)
    M = max(e.m for e in encodings)
    x = np.zeros((B, M, NODE_FEATURES))
    edge = np.zeros((B, M, M))
    g = np.zeros(B)
    valid = np.zeros((B, M), dtype=bool)
    mask = np.zeros((B, M), dtype=bool)
    for b, e in enumerate(encodings):
        m = e.m
        x[b, :m] = e.node_feat
        edge[b, :m, :m] = e.edge_feat
        g[b] = e.global_feat[0]
        valid[b, :m] = True
        mask[b, :m] = e.mask
    return Batch(
        torch.as_tensor(x, dtype=dtype),
        torch.as_tensor(edge, dtype=dtype),
        torch.as_tensor(g, dtype=dtype),
        torch.as_tensor(valid),
        torch.as_tensor(mask),
        [e.node_ids for e in encodings],
    )


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: QNetworkConfig) -> dict:
    H, F_ = cfg.hidden, cfg.ff_mult * cfg.hidden
    shapes = {
        "gat.W": (cfg.gat_heads, H, GAT_INPUT),
        "gat.a": (cfg.gat_heads, H),
    }
    for layer in range(cfg.tel_layers):
        pre = f"tel.{layer}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[pre + "attn." + w] = (H, H)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[pre + "attn." + b] = (H,)
        shapes[pre + "ln1.gain"] = (H,)
        shapes[pre + "ln1.bias"] = (H,)
        shapes[pre + "ff.w1"] = (F_, H)
        shapes[pre + "ff.b1"] = (F_,)
        shapes[pre + "ff.w2"] = (H, F_)
        shapes[pre + "ff.b2"] = (H,)
        shapes[pre + "ln2.gain"] = (H,)
        shapes[pre + "ln2.bias"] = (H,)
    shapes["proj.U"] = (H,)
    return shapes


def param_kind(name: str) -> str:
    """Layer type of a parameter: gat, tel_attention, tel_feedforward, layer_norm or projection."""
    if name.startswith("gat."):
        return "gat"
    if name.startswith("proj."):
        return "projection"
    if ".ln" in name:
        return "layer_norm"
    if ".attn." in name:
        return "tel_attention"
    return "tel_feedforward"


def _fan_in(name: str, shape: tuple, cfg: QNetworkConfig) -> int:
    if name == "gat.W":
        return GAT_INPUT
    if name in ("gat.a", "proj.U"):
        return cfg.hidden
    return shape[-1]


def init_params(cfg: QNetworkConfig) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf == "bias" or (leaf.startswith("b") and len(shape) == 1):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape, cfg))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = torch.tensor(arr, dtype=cfg.torch_dtype, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# layers


def gat_attention(batch: Batch, params: dict, cfg: QNetworkConfig) -> torch.Tensor:
    """Attention weights ``alpha[b, head, v, k]`` over the other real rows ``k != v``."""
    W, a = params["gat.W"], params["gat.a"]
    d = NODE_FEATURES
    # a^T W [x_v|x_k|u|g] split into its four linear pieces
    aw = torch.einsum("hj,hjd->hd", a, W)
    a_self, a_nbr, a_edge, a_glob = aw[:, :d], aw[:, d : 2 * d], aw[:, 2 * d], aw[:, 2 * d + 1]
    logits = (
        torch.einsum("bvd,hd->bhv", batch.x, a_self)[..., :, None]
        + torch.einsum("bkd,hd->bhk", batch.x, a_nbr)[..., None, :]
        + a_edge[None, :, None, None] * batch.edge[:, None]
        + (a_glob[None, :] * batch.g[:, None])[..., None, None]
    )
    logits = F.leaky_relu(logits, cfg.leaky_slope)
    M = batch.x.shape[1]
    eye = torch.eye(M, dtype=torch.bool)
    nbr = (batch.valid[:, None, :] & ~eye)[:, None]  # (B, 1, M, M)
    logits = logits.masked_fill(~nbr, _MASKED)
    w = torch.exp(logits - logits.amax(-1, keepdim=True)) * nbr
    den = w.sum(-1, keepdim=True)
    # a row without neighbours aggregates nothing
    return w / torch.where(den > 0, den, torch.ones_like(den))


def gat_forward(batch: Batch, params: dict, cfg: QNetworkConfig) -> torch.Tensor:
    """Multi-head-average edge-aware graph attention; returns (B, M, H)."""
    W = params["gat.W"]
    d = NODE_FEATURES
    alpha = gat_attention(batch, params, cfg)
    W_self, W_nbr, w_edge, w_glob = W[..., :d], W[..., d : 2 * d], W[..., 2 * d], W[..., 2 * d + 1]
    mass = alpha.sum(-1)  # 1 per real row, 0 without neighbours
    x_bar = torch.einsum("bhvk,bkd->bhvd", alpha, batch.x)
    u_bar = (alpha * batch.edge[:, None]).sum(-1)
    self_part = torch.einsum("hjd,bvd->bhvj", W_self, batch.x) + (
        w_glob[None, :, None, :] * batch.g[:, None, None, None]
    )
    out = (
        mass[..., None] * self_part
        + torch.einsum("hjd,bhvd->bhvj", W_nbr, x_bar)
        + w_edge[None, :, None, :] * u_bar[..., None]
    )
    return ACTIVATIONS[cfg.activation](out.mean(1))


def layer_norm(h, gain, bias, eps=1e-5):
    mu = h.mean(-1, keepdim=True)
    var = ((h - mu) ** 2).mean(-1, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps) * gain + bias


def tel_attention(h: torch.Tensor, valid: torch.Tensor, params: dict, pre: str, heads: int):
    """Self-attention sublayer; returns (output, weights)."""
    B, M, H = h.shape
    dh = H // heads

    def proj(w, b):
        return (h @ params[pre + w].T + params[pre + b]).view(B, M, heads, dh).transpose(1, 2)

    q, k, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    scores = scores.masked_fill(~valid[:, None, None, :], -math.inf)
    att = torch.softmax(scores, -1)
    ctx = (att @ v).transpose(1, 2).reshape(B, M, H)
    return ctx @ params[pre + "wo"].T + params[pre + "bo"], att


def tel_forward(h: torch.Tensor, valid: torch.Tensor, params: dict, cfg: QNetworkConfig) -> torch.Tensor:
    """Stacked post-norm Transformer encoder layers without positional encoding."""
    for layer in range(cfg.tel_layers):
        pre = f"tel.{layer}."
        att, _ = tel_attention(h, valid, params, pre + "attn.", cfg.tel_heads)
        h = layer_norm(h + att, params[pre + "ln1.gain"], params[pre + "ln1.bias"])
        ff = F.relu(h @ params[pre + "ff.w1"].T + params[pre + "ff.b1"])
        ff = ff @ params[pre + "ff.w2"].T + params[pre + "ff.b2"]
        h = layer_norm(h + ff, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
    return h


def project_q(h: torch.Tensor, params: dict) -> torch.Tensor:
    return h @ params["proj.U"]


def forward(batch: Batch, params: dict, cfg: QNetworkConfig) -> torch.Tensor:
    """Raw action values (B, M) for every row, padding included."""
    h = gat_forward(batch, params, cfg)
    h = tel_forward(h, batch.valid, params, cfg)
    return project_q(h, params)


# ---------------------------------------------------------------------------


class QNetwork:
    """Parameters plus configuration; the object passed to scorers and trainers."""

    def __init__(self, cfg: QNetworkConfig, params: Optional[dict] = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ValueError(f"{name} has shape {tuple(self.params[name].shape)}, expected {shape}")

    def clone(self) -> "QNetwork":
        return QNetwork(
            self.cfg, {k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()}
        )

    def load_from(self, other: "QNetwork") -> None:
        with torch.no_grad():
            for k, v in other.params.items():
                self.params[k].copy_(v)

    def collate(self, encodings) -> Batch:
        return collate(encodings, self.cfg.torch_dtype)

    def forward(self, batch: Batch) -> torch.Tensor:
        return forward(batch, self.params, self.cfg)

    def q_encoded(self, encodings, n_nodes) -> list:
        """Per-state q maps over original node ids; non-feasible nodes get ``-inf``."""
        if not encodings:
            return []
        with torch.no_grad():
            q = self.forward(self.collate(encodings)).numpy()
        out = []
        for b, (e, n) in enumerate(zip(encodings, n_nodes)):
            full = np.full(n, -np.inf)
            rows = np.flatnonzero(e.mask)
            full[e.node_ids[rows]] = q[b, rows]
            out.append(full)
        return out

    def q_batch(self, pairs) -> list:
        return self.q_encoded([encode_state(inst, p) for inst, p in pairs], [inst.n for inst, _ in pairs])

    def q_values(self, inst: Instance, p: PathState) -> np.ndarray:
        return self.q_batch([(inst, p)])[0]

    def __call__(self, p: PathState, inst: Instance) -> np.ndarray:
        return self.q_values(inst, p)

    def numpy_params(self) -> dict:
        return {k: v.detach().numpy().copy() for k, v in self.params.items()}


def forward_q(inst: Instance, p: PathState, net: QNetwork) -> np.ndarray:
    return net.q_values(inst, p)


def grad(net: QNetwork, loss_fn) -> tuple:
    """Reverse-mode gradients of ``loss_fn(net)`` (a scalar tensor).

    Returns ``(loss, {name: gradient array})``; raises :class:`NonFiniteError`
    naming the offending tensor when the loss or a gradient is not finite.
    """
    loss = loss_fn(net)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is {loss.item()}")
    names = list(net.params)
    grads = torch.autograd.grad(loss, [net.params[k] for k in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        g = torch.zeros_like(net.params[name]) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name} is not finite")
        out[name] = g.detach().numpy().copy()
    return float(loss.detach()), out


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(net: QNetwork, extra: Optional[dict] = None) -> dict:
    tensors = {}
    for name, t in net.params.items():
        arr = t.detach().numpy()
        tensors[name] = {"shape": list(arr.shape), "data": [float(x) for x in arr.reshape(-1)]}
    d = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": asdict(net.cfg), "tensors": tensors}
    if extra:
        d["meta"] = extra
    return d


def net_from_dict(d: dict) -> QNetwork:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a Q-network checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    cfg = QNetworkConfig(**d["config"])
    params = {}
    for name, t in d["tensors"].items():
        arr = np.array(t["data"], dtype=np.float64).reshape(t["shape"])
        params[name] = torch.tensor(arr, dtype=cfg.torch_dtype, requires_grad=True)
    return QNetwork(cfg, params)


def save_checkpoint(net: QNetwork, path, extra: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(net, extra)) + "\n", encoding="utf-8")


def load_checkpoint(path) -> QNetwork:
    return net_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
