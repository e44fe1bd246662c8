import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_optimum, hand_instance, small_instances
from opsearch.heuristics import PrizeScore, RandomPolicy, TsiliScore, tsili_probabilities
from opsearch.instance import (
    close,
    extend,
    feasible_extensions,
    generate_euclidean_instance,
    new_instance,
    path_cost,
    path_prize,
)
from opsearch.search import (
    CostLevelQueues,
    SearchError,
    cost_level_beam_search,
    exact_from,
    exhaustive_exact,
    greedy_rollout,
    sampled_rollout,
    shortest_path_costs,
    step_beam_search,
)


def min_positive_cost(inst):
    return float(inst.cost[inst.cost > 0].min())


def check_solution(res, inst):
    p = res.best_path
    assert p.closed
    assert p.nodes[0] == inst.start and p.nodes[-1] == inst.end
    body = p.nodes[:-1] if inst.start == inst.end else p.nodes
    assert len(set(body)) == len(body)
    assert p.cost <= inst.t_max
    assert abs(path_cost(p.nodes, inst) - p.cost) <= 1e-9
    assert abs(path_prize(p.nodes, inst) - p.prize) <= 1e-9


def test_queue_index():
    q = CostLevelQueues(1.0, 0.05, 3)
    assert q.index(0.37) == 8
    assert q.index(0.0) == 0
    assert q.last_index == 20


def test_queue_eviction_keeps_best_and_earliest():
    q = CostLevelQueues(1.0, 0.5, 2)
    q.push(1, 1.0, "a")
    q.push(1, 2.0, "b")
    q.push(1, 1.0, "c")  # ties with a; the later insertion goes
    assert q.drain(1) == ["b", "a"]
    q.push(1, 1.0, "a")
    q.push(1, 1.0, "b")
    q.push(1, 0.5, "c")
    assert q.drain(1) == ["a", "b"]


def test_hand_instance_exact():
    inst = hand_instance()
    res = exhaustive_exact(inst)
    assert res.prize == pytest.approx(0.6)
    assert res.nodes == [0, 2, 3]
    assert brute_force_optimum(inst) == pytest.approx(0.6)


def test_cost_level_exact_on_hand():
    inst = hand_instance()
    res = cost_level_beam_search(inst, PrizeScore(), 10**6, min_positive_cost(inst) / 2)
    assert res.nodes == [0, 2, 3] and res.prize == pytest.approx(0.6)


def test_cost_level_k1_feasible():
    for inst in small_instances(10, 12):
        check_solution(cost_level_beam_search(inst, PrizeScore(), 1, 0.05), inst)


def test_cost_level_preconditions():
    inst = hand_instance()
    with pytest.raises(ValueError):
        cost_level_beam_search(inst, PrizeScore(), 0, 0.1)
    with pytest.raises(ValueError):
        cost_level_beam_search(inst, PrizeScore(), 1, 0.0)
    with pytest.raises(ValueError):
        cost_level_beam_search(inst, PrizeScore(), 1, 1.0)


def test_no_feasible_node_returns_direct_path():
    cost = np.full((4, 4), 5.0)
    np.fill_diagonal(cost, 0)
    cost[0, 3] = cost[3, 0] = 0.1
    inst = new_instance(cost, [0, 1, 1, 0], 1.0, 0, 3)
    for res in (
        cost_level_beam_search(inst, PrizeScore(), 5, 0.1),
        step_beam_search(inst, PrizeScore(), 5),
        exhaustive_exact(inst),
    ):
        assert res.nodes == [0, 3] and res.prize == 0


def test_within_interval_insertion_with_zero_costs():
    # several zero-cost hops must be drained inside interval 0
    cost = np.array(
        [
            [0, 0, 0, 0.5, 0],
            [0, 0, 0, 0.5, 0],
            [0, 0, 0, 0.5, 0],
            [0.5, 0.5, 0.5, 0, 0.5],
            [0, 0, 0, 0.5, 0],
        ],
        dtype=float,
    )
    inst = new_instance(cost, [0, 0.2, 0.3, 0.9, 0], 1.0, 0, 4)
    res = cost_level_beam_search(inst, PrizeScore(), 10**6, 0.25)
    assert res.prize == pytest.approx(1.4)
    assert res.prize == pytest.approx(exhaustive_exact(inst).prize)


@pytest.mark.parametrize("n", [5, 6, 7, 8])
def test_exact_matches_brute_force(n):
    for inst in small_instances(6, n, seed0=100 * n):
        assert exhaustive_exact(inst).prize == pytest.approx(brute_force_optimum(inst), abs=1e-9)


def test_exact_zero_budget():
    inst = generate_euclidean_instance(6, "uniform", 0.0, 3)
    res = exhaustive_exact(inst)
    assert res.nodes == [0, 0] and res.prize == 0


def test_exact_pruning_consistent():
    for inst in small_instances(50, 9, seed0=500):
        a = exhaustive_exact(inst, prune=True)
        b = exhaustive_exact(inst, prune=False)
        assert a.prize == b.prize and a.nodes == b.nodes
        assert a.expanded <= b.expanded


def test_exact_bound_valid_on_non_metric_costs():
    # going 0 -> 1 -> 2 is cheaper than 0 -> 2 directly
    cost = np.array(
        [
            [0, 0.1, 5.0, 0.1],
            [0.1, 0, 0.1, 0.1],
            [5.0, 0.1, 0, 0.1],
            [0.1, 0.1, 0.1, 0],
        ]
    )
    inst = new_instance(cost, [0, 0.1, 1.0, 0], 0.5, 0, 3)
    for prune in (True, False):
        assert exhaustive_exact(inst, prune=prune).prize == pytest.approx(1.1)
    assert brute_force_optimum(inst) == pytest.approx(1.1)
    assert shortest_path_costs(inst)[0, 2] == pytest.approx(0.2)


def test_exact_guard():
    inst = generate_euclidean_instance(17, "uniform", 1.0, 0)
    with pytest.raises(SearchError, match="limit"):
        exhaustive_exact(inst)


def test_exact_from_partial_path():
    inst = hand_instance()
    p = extend(inst.empty_path(), 1, inst)
    res = exact_from(inst, p)
    assert res.nodes == [0, 1, 3]


@pytest.mark.parametrize("n", [6, 8])
def test_step_beam_unbounded_is_exact(n):
    for inst in small_instances(8, n, seed0=7 * n):
        res = step_beam_search(inst, PrizeScore(), 10**6)
        assert res.prize == pytest.approx(brute_force_optimum(inst), abs=1e-9)


def test_step_beam_width_one_prize_greedy():
    inst = hand_instance()
    res = step_beam_search(inst, PrizeScore(), 1)
    assert res.nodes == [0, 2, 3] and res.prize == pytest.approx(0.6)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10_000), st.integers(1, 8), st.sampled_from([0.03, 0.1, 0.3]))
def test_search_feasibility_and_single_node_floor(n, seed, width, tau):
    inst = generate_euclidean_instance(n, "uniform", n / 10, seed)
    root = inst.empty_path()
    singles = [extend(root, v, inst).prize for v in feasible_extensions(root, inst)]
    floor = max(singles, default=0.0)
    for res in (
        cost_level_beam_search(inst, PrizeScore(), width, tau),
        step_beam_search(inst, PrizeScore(), width),
    ):
        check_solution(res, inst)
        assert res.prize >= floor - 1e-12


def test_search_determinism():
    inst = generate_euclidean_instance(15, "distance", 1.5, 9)
    runs = [cost_level_beam_search(inst, TsiliScore(), 5, 0.05).nodes for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]
    runs = [step_beam_search(inst, TsiliScore(), 3).nodes for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]


def test_greedy_rollout_random_policy_deterministic():
    inst = generate_euclidean_instance(12, "uniform", 1.2, 4)
    a = greedy_rollout(inst, RandomPolicy(3)).nodes
    b = greedy_rollout(inst, RandomPolicy(3)).nodes
    assert a == b


def test_greedy_rollout_dominant_node_first():
    inst = generate_euclidean_instance(10, "uniform", 2.0, 4)

    def policy(p, inst):
        s = np.zeros(inst.n)
        s[5] = 10.0
        return s

    res = greedy_rollout(inst, policy)
    assert res.nodes[1] == 5


def test_greedy_rollout_ties_lowest_index():
    inst = generate_euclidean_instance(10, "uniform", 2.0, 4)
    res = greedy_rollout(inst, lambda p, i: np.zeros(i.n))
    assert res.nodes[1] == feasible_extensions(inst.empty_path(), inst)[0]


def test_rollouts_never_beat_exact():
    for inst in small_instances(10, 10, seed0=30):
        opt = exhaustive_exact(inst).prize
        assert greedy_rollout(inst, RandomPolicy(0)).prize <= opt + 1e-12
        assert sampled_rollout(inst, tsili_probabilities, 5).prize <= opt + 1e-12


def test_sampled_rollout_one_point_matches_greedy():
    inst = generate_euclidean_instance(10, "uniform", 2.0, 8)

    def scores(p, inst):
        feas = feasible_extensions(p, inst)
        s = np.full(inst.n, -np.inf)
        s[feas] = inst.prize[feas] - 0.001 * np.arange(len(feas))
        return s

    def one_point(p, inst):
        s = scores(p, inst)
        out = np.zeros(inst.n)
        out[int(np.argmax(s))] = 1.0
        return out

    assert sampled_rollout(inst, one_point, 1).nodes == greedy_rollout(inst, scores).nodes


def test_sampled_rollout_seeded():
    inst = generate_euclidean_instance(14, "distance", 1.4, 8)
    a = sampled_rollout(inst, tsili_probabilities, 42).nodes
    b = sampled_rollout(inst, tsili_probabilities, 42).nodes
    assert a == b


def test_sampled_rollout_empty_support_errors():
    inst = hand_instance()
    with pytest.raises(SearchError, match="support"):
        sampled_rollout(inst, lambda p, i: np.zeros(i.n), 0)


def test_sampled_rollout_frequencies_hand():
    inst = hand_instance()
    # analytic: f_a = (0.5/0.3)^4, f_b = (0.6/0.3)^4 = 16
    fa, fb = (0.5 / 0.3) ** 4, 16.0
    p_b = fb / (fa + fb)
    trials = 10_000
    hits = sum(
        sampled_rollout(inst, tsili_probabilities, s, max_steps=1).nodes[1] == 2 for s in range(trials)
    )
    sigma = math.sqrt(trials * p_b * (1 - p_b))
    assert abs(hits - trials * p_b) <= 3 * sigma
