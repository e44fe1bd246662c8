import itertools

import numpy as np
import pytest

from opsearch.instance import generate_euclidean_instance, new_instance, path_cost


def hand_instance():
    """start (0,0), a=(0.3,0) prize 0.5, b=(0,0.3) prize 0.6, end (0,0), T=0.7."""
    coords = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.3], [0.0, 0.0]])
    cost = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    return new_instance(cost, [0.0, 0.5, 0.6, 0.0], 0.7, 0, 3, coords=coords)


def brute_force_optimum(inst):
    """Best prize over every ordered subset of prized nodes (no pruning, no search code)."""
    others = [v for v in range(inst.n) if v not in (inst.start, inst.end)]
    best = 0.0
    for k in range(1, len(others) + 1):
        for perm in itertools.permutations(others, k):
            nodes = [inst.start, *perm, inst.end]
            if path_cost(nodes, inst) <= inst.t_max:
                best = max(best, float(sum(inst.prize[list(perm)])))
    return best


def small_instances(count, n, kind="distance", seed0=0):
    return [generate_euclidean_instance(n, kind, n / 20 * 2, seed0 + i) for i in range(count)]


@pytest.fixture
def hand():
    return hand_instance()


def gradient_errors(net, loss_fn, analytic, per_kind=64, eps=1e-4, seed=0):
    """Relative error of central differences against ``analytic`` on random coordinates, by layer type."""
    import torch

    from opsearch.neural import param_kind

    rng = np.random.default_rng(seed)
    by_kind = {}
    for name in net.params:
        by_kind.setdefault(param_kind(name), []).append(name)
    out = {}
    for kind, names in by_kind.items():
        coords = [(name, i) for name in names for i in range(net.params[name].numel())]
        errs = []
        for j in rng.choice(len(coords), min(per_kind, len(coords)), replace=False):
            name, i = coords[j]
            flat = net.params[name].data.view(-1)
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = loss_fn(net).item()
                flat[i] = old - eps
                down = loss_fn(net).item()
                flat[i] = old
            numeric = (up - down) / (2 * eps)
            exact = float(analytic[name].reshape(-1)[i])
            errs.append(abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-6))
        out[kind] = errs
    return out


def gradient_check_setup():
    """A float64 network and a squared-error loss over a small batch of states."""
    import torch

    from opsearch.instance import extend, feasible_extensions
    from opsearch.neural import QNetwork, QNetworkConfig, collate, encode_state

    cfg = QNetworkConfig(hidden=64, gat_heads=4, tel_heads=8, tel_layers=2, seed=7)
    net = QNetwork(cfg)
    inst = generate_euclidean_instance(8, "uniform", 3.0, 13)
    paths = []
    for k in range(3):
        rng = np.random.default_rng(k)
        p = inst.empty_path()
        for _ in range(k):
            p = extend(p, int(rng.choice(feasible_extensions(p, inst))), inst)
        paths.append(p)
    b = collate([encode_state(inst, p) for p in paths], torch.float64)
    target = torch.tensor([1.0, -0.5, 0.25], dtype=torch.float64)
    rows = torch.tensor([int(np.flatnonzero(m)[0]) for m in b.mask.numpy()])

    def loss_fn(n):
        return ((n.forward(b)[torch.arange(3), rows] - target) ** 2).mean()

    return net, loss_fn
