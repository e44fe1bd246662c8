"""Orienteering solvers: cost-level beam search with learned heuristics."""

from .instance import (
    Instance,
    PathState,
    PrizeKind,
    close,
    extend,
    feasible_extensions,
    generate_euclidean_instance,
    new_instance,
    read_instance,
    write_instance,
)
from .search import (
    SearchResult,
    cost_level_beam_search,
    exhaustive_exact,
    greedy_rollout,
    sampled_rollout,
    step_beam_search,
)

__version__ = "0.1.0"
