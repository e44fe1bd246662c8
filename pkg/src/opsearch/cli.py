"""Command-line front end: ``opsearch {gen,solve,train,bench,render}``.

Exit status is 0 on success, 1 on a usage error and 2 when the run fails.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .heuristics import SCORER_NAMES, LearnedQScore, LogProbScore, RandomPolicy, make_scorer, tsili_probabilities, tsili_scores
from .instance import PrizeKind, default_t_max, generate_euclidean_instance, path_from_nodes, read_instance, write_instance
from .neural import load_checkpoint
from .search import cost_level_beam_search, exhaustive_exact, greedy_rollout, sampled_rollout, step_beam_search

METHODS = ("exact", "random", "tsili-greedy", "tsili-beam", "dqn-greedy", "dqn-beam", "cs")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(text: str, out) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# solving


class Solver:
    """One configured method; ``solve(inst, seed)`` returns a SearchResult."""

    def __init__(self, method, beam_size=100, k=20, tau=0.05, scorer="dqn", checkpoint=None):
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        self.method = method
        self.beam_size, self.k, self.tau, self.scorer = beam_size, k, tau, scorer
        self.checkpoint = checkpoint
        self.net = None
        needs_net = method.startswith("dqn") or (method == "cs" and scorer == "dqn")
        if needs_net:
            if checkpoint is None:
                raise UsageError(f"method {method} needs --checkpoint")
            self.net = load_checkpoint(checkpoint)
        if method == "cs" and scorer not in SCORER_NAMES:
            raise UsageError(f"unknown scorer {scorer!r}")
        if beam_size < 1 or k < 1 or not tau > 0:
            raise UsageError("--beam-size and --k must be >= 1 and --tau > 0")

    def params(self, seed) -> dict:
        m = self.method
        if m == "random":
            return {"seed": seed}
        if m.endswith("-beam"):
            out = {"beam_size": self.beam_size}
        elif m == "cs":
            out = {"k": self.k, "tau": self.tau, "scorer": self.scorer}
        else:
            out = {}
        if self.net is not None:
            out["checkpoint"] = Path(self.checkpoint).name
        return out

    def solve(self, inst, seed=0):
        m = self.method
        if m == "exact":
            return exhaustive_exact(inst)
        if m == "random":
            return sampled_rollout(inst, RandomPolicy(seed).probabilities, seed)
        if m == "tsili-greedy":
            return greedy_rollout(inst, tsili_scores)
        if m == "tsili-beam":
            return step_beam_search(inst, LogProbScore(tsili_probabilities), self.beam_size)
        if m == "dqn-greedy":
            return greedy_rollout(inst, self.net)
        if m == "dqn-beam":
            return step_beam_search(inst, LearnedQScore(self.net), self.beam_size)
        return cost_level_beam_search(inst, make_scorer(self.scorer, self.net), self.k, self.tau)


def _solver(args) -> Solver:
    return Solver(args.method, args.beam_size, args.k, args.tau, args.scorer, args.checkpoint)


def solution_record(inst_name, method, params, res, seconds) -> dict:
    p = res.best_path
    return {
        "instance": inst_name,
        "method": method,
        "params": params,
        "path": list(p.nodes),
        "prize": p.prize,
        "cost": p.cost,
        "time_s": seconds,
    }


def _timed(solver, inst, seed):
    t0 = time.perf_counter()
    res = solver.solve(inst, seed)
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    t_max = args.t_max if args.t_max is not None else default_t_max(args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    width = len(str(args.seed + args.count - 1))
    for seed in range(args.seed, args.seed + args.count):
        name = f"op{args.n}_{args.kind}_{seed:0{width}d}.json"
        write_instance(generate_euclidean_instance(args.n, args.kind, t_max, seed), out / name)
        files.append(name)
    manifest = {"n": args.n, "kind": args.kind, "t_max": t_max, "seed": args.seed, "count": args.count, "files": files}
    (out / MANIFEST).write_text(_dump(manifest), encoding="utf-8")
    print(f"wrote {len(files)} instances to {out}", file=sys.stderr)


def cmd_solve(args) -> None:
    solver = _solver(args)
    inst = read_instance(args.instance)
    res, secs = _timed(solver, inst, args.seed)
    rec = solution_record(Path(args.instance).name, args.method, solver.params(args.seed), res,
                          None if args.no_time else secs)
    _write_text(_dump(rec), args.out)


def cmd_train(args) -> None:
    from .training import TrainConfig, load_config, train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    res = train(cfg, log_path=log_path, checkpoint_path=args.out)
    print(f"best validation mean {res.best_val:.4f} at step {res.best_step}", file=sys.stderr)


def instance_files(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    files = sorted(p for p in d.glob("*.json") if p.name != MANIFEST)
    if not files:
        raise FileNotFoundError(f"no instance files in {d}")
    return files


def bench_rows(objs: dict, times: dict) -> list:
    """``(method, mean obj, gap %, time)`` rows; gaps are against the best mean."""
    best = max(objs.values())
    rows = []
    for m, obj in objs.items():
        gap = (best - obj) / best * 100 if best > 0 else 0.0
        rows.append((m, obj, gap, times.get(m)))
    return rows


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["method", "obj", "gap_pct", "time_s"])
    for m, obj, gap, secs in rows:
        w.writerow([m, f"{obj:.6f}", f"{gap:.4f}", "" if secs is None else f"{secs:.3f}"])
    return buf.getvalue()


def format_table(rows) -> str:
    lines = [f"{'method':<14}{'Obj.':>10}{'Gap':>10}{'Time':>10}"]
    for m, obj, gap, secs in rows:
        t = "-" if secs is None else f"{secs:.1f}s"
        lines.append(f"{m:<14}{obj:>10.2f}{gap:>9.2f}%{t:>10}")
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> None:
    methods = args.method or ["tsili-greedy"]
    solvers = [Solver(m, args.beam_size, args.k, args.tau, args.scorer, args.checkpoint) for m in methods]
    files = instance_files(args.instances)
    instances = [read_instance(f) for f in files]
    objs, times, records = {}, {}, []
    for solver in solvers:
        t0 = time.perf_counter()
        prizes = []
        for i, (f, inst) in enumerate(zip(files, instances)):
            seed = args.seed + i
            res, secs = _timed(solver, inst, seed)
            prizes.append(res.best_path.prize)
            records.append(solution_record(f.name, solver.method, solver.params(seed), res,
                                           None if args.no_time else secs))
        objs[solver.method] = float(np.mean(prizes))
        times[solver.method] = None if args.no_time else time.perf_counter() - t0
    rows = bench_rows(objs, times)
    _write_text(format_csv(rows), args.out)
    if args.records:
        Path(args.records).write_text(_dump(records), encoding="utf-8")
    sys.stderr.write(format_table(rows))


def render_svg(inst, nodes, size=500, margin=30) -> str:
    """Nodes as circles with area proportional to prize, endpoints as stars, the path as a polyline."""
    if inst.coords is None:
        raise ValueError("instance has no coordinates to draw")
    xy = np.asarray(inst.coords, dtype=float)
    lo, span = xy.min(0), np.ptp(xy, 0).max() or 1.0
    scale = size - 2 * margin

    def pt(v):
        x, y = (xy[v] - lo) / span * scale + margin
        return x, size - y  # y axis points up

    top = float(inst.prize.max()) or 1.0
    r_max = 12.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    pts = " ".join("%.3f,%.3f" % pt(v) for v in nodes)
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for v in range(inst.n):
        if v in (inst.start, inst.end):
            continue
        r = r_max * math.sqrt(inst.prize[v] / top)
        x, y = pt(v)
        parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{r:.4f}" fill="#ff7f0e" fill-opacity="0.7"/>')
    drawn = set()
    for v in (inst.start, inst.end):
        key = tuple(xy[v])
        if key in drawn:
            continue
        drawn.add(key)
        parts.append(_star(*pt(v), 10.0))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _star(cx, cy, r) -> str:
    pts = []
    for i in range(10):
        rad = r if i % 2 == 0 else r * 0.4
        a = math.pi / 2 + i * math.pi / 5
        pts.append("%.3f,%.3f" % (cx + rad * math.cos(a), cy - rad * math.sin(a)))
    return f'<polygon class="star" points="{" ".join(pts)}" fill="#d62728"/>'


def cmd_render(args) -> None:
    inst = read_instance(args.instance)
    rec = json.loads(Path(args.solution).read_text(encoding="utf-8"))
    nodes = rec["path"] if isinstance(rec, dict) else rec
    path_from_nodes(nodes, inst)  # rejects paths that do not fit the instance
    _write_text(render_svg(inst, nodes), args.out)


# ---------------------------------------------------------------------------
# argument parsing


def _add_method_flags(p, many=False):
    if many:
        p.add_argument("--method", action="append", choices=METHODS, help="repeat to compare several methods")
    else:
        p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--beam-size", type=int, default=100)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--scorer", default="dqn", choices=SCORER_NAMES, help="score used by cs")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-time", action="store_true", help="leave timings out so reruns are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opsearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate Euclidean instances")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--kind", default="uniform", choices=[k.value for k in PrizeKind])
    p.add_argument("--t-max", type=float)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="solve one instance file")
    p.add_argument("instance")
    _add_method_flags(p)
    p.add_argument("--out", help="record file (default: stdout)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train a Q-network from a config file")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--log", help="JSON-lines log (default: next to the checkpoint)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="compare methods on a directory of instances")
    p.add_argument("instances")
    _add_method_flags(p, many=True)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.add_argument("--records", help="also write every solution record to this JSON file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="draw a solution as SVG")
    p.add_argument("instance")
    p.add_argument("solution", help="record from `solve` or a JSON list of nodes")
    p.add_argument("--out", help="SVG file (default: stdout)")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"opsearch: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, RuntimeError) as e:
        print(f"opsearch: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
