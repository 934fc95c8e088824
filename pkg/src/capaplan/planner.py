"""Team planning: split targets among agents, keep the tanks small.

The pipeline turns a consumption MDP and a target set into a cost graph
(edge = minimal capacity for one leg), then finds the cheapest subgraph
whose strongly connected components can be distributed over the team.
Every agent ends up patrolling one component along a closed walk whose
legs are all individually achievable at the reported capacity, so a
single tank size serves the whole team.

Two problem flavors share the machinery. Allocation ignores where agents
start and only bounds how many there are. Routing adds one graph vertex
per agent start and demands a perfect matching between components and
agents, so an agent must also afford the trip to its patrol.

Cost overrides ("these targets share one agent", "visit this one first")
rewrite the graph up front and are recorded as edge annotations so the
later stages can expand them back into routes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import isinf
from time import perf_counter
from typing import Mapping, Sequence

import numpy as np

from .cmdp import ConsumptionMDP, CounterStrategy, SimulationStats, level_after
from .costgraph import (
    CostGraph,
    Edge,
    Matching,
    SccComponent,
    SccDecomposition,
    build_bipartite,
    max_matching,
    scc_decompose,
    tarjan_cells,
    to_dot,
)
from .errors import (
    InfeasibleError,
    InternalError,
    ModelFormatError,
    PreconditionError,
)
from .synthesis import (
    PhasedCounterStrategy,
    counter_strategy,
    feasible,
    min_cap_matrix,
    min_cap_sequence_value,
    min_cap_value,
    sequence_strategy,
)

LINEAR = "linear"
BINARY_SEARCH = "binary"
_MODES = (LINEAR, BINARY_SEARCH)
_INF = float("inf")

# Edge annotation vocabulary. "via:<t>" marks a sequencing override and is
# parsed back when cycles are expanded; the others are audit-only.
_NOTE_UNREACHABLE = "no safe route"
_NOTE_GROUPED = "grouped"
_NOTE_RESET = "reset"
_VIA_PREFIX = "via:"


@dataclass(frozen=True)
class Allocation:
    """Disjoint target cells, one per agent actually used."""

    cells: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for cell in self.cells:
            if not cell:
                raise PreconditionError("allocation cells must be nonempty")
            for v in cell:
                if v in seen:
                    raise PreconditionError(f"target {v!r} appears in two cells")
                seen.add(v)

    def targets(self) -> frozenset[str]:
        return frozenset(v for cell in self.cells for v in cell)

    def cell_of(self, target: str) -> int:
        for i, cell in enumerate(self.cells):
            if target in cell:
                return i
        raise PreconditionError(f"{target!r} is not an allocated target")


@dataclass(frozen=True)
class Assignment:
    """Agent name to allocation cell index; None leaves the agent idle."""

    by_agent: Mapping[str, int | None]

    def cell_index(self, agent: str) -> int | None:
        try:
            return self.by_agent[agent]
        except KeyError:
            raise PreconditionError(f"unknown agent {agent!r}") from None


@dataclass(frozen=True)
class VariantConstraints:
    """Optional cost-graph rewrites applied before solving.

    ``same_agent_groups`` lists target groups whose internal connections
    become free, forcing each group into a single component. ``sequences``
    lists (first, second) pairs: every arrival at `second` must route
    through `first` along the way.
    """

    same_agent_groups: tuple[tuple[str, ...], ...] = ()
    sequences: tuple[tuple[str, str], ...] = ()

    @staticmethod
    def from_json(text: str) -> "VariantConstraints":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"invalid JSON: {e}") from None
        if not isinstance(doc, dict) or not set(doc) <= {"same_agent_groups", "sequences"}:
            raise ModelFormatError(
                "constraints document allows only 'same_agent_groups' and 'sequences'"
            )
        groups = []
        for g in doc.get("same_agent_groups", []):
            if not isinstance(g, list) or not all(isinstance(v, str) for v in g):
                raise ModelFormatError("each group must be a list of target names")
            groups.append(tuple(g))
        seqs = []
        for pair in doc.get("sequences", []):
            if not isinstance(pair, list) or len(pair) != 2 or not all(isinstance(v, str) for v in pair):
                raise ModelFormatError("each sequence must be a [first, second] pair")
            seqs.append((pair[0], pair[1]))
        return VariantConstraints(tuple(groups), tuple(seqs))


@dataclass
class PhaseTimings:
    """Wall-clock accumulator for the solver phases, in seconds."""

    matrix_seconds: float = 0.0
    scc_seconds: float = 0.0
    matching_seconds: float = 0.0
    total_seconds: float = 0.0


@dataclass(frozen=True, eq=False)
class PlanResult:
    """Everything the solvers decide, plus the graphs they decided on.

    ``graph`` is the full input cost graph (annotations included) and
    ``subgraph`` the retained part whose components form the allocation.
    ``capacity`` already includes the self-loop correction for singleton
    cells whose loop edge was dropped.
    """

    problem: str
    mode: str
    graph: CostGraph
    subgraph: CostGraph
    capacity: float
    allocation: Allocation
    agent_count: int
    agents: tuple[str, ...] = ()
    assignment: Assignment | None = None
    matching: Matching | None = None


@dataclass(frozen=True, eq=False)
class Leg:
    """One edge of a patrol: get from ``source`` to ``target``, safely.

    ``via`` carries a sequencing override (visit it before the target).
    The witness, when present, is extracted at the plan capacity: a plain
    counter strategy, or a phased one when ``via`` is set.
    """

    source: str
    target: str
    via: str | None = None
    witness: CounterStrategy | PhasedCounterStrategy | None = None


@dataclass(frozen=True, eq=False)
class CellPlan:
    """Closed patrol walk for one allocation cell."""

    cell: tuple[str, ...]
    capacity: int
    visit_order: tuple[str, ...]
    legs: tuple[Leg, ...]


# ---------------------------------------------------------------------------
# cost graph construction


def _checked_targets(model: ConsumptionMDP, targets: Sequence[str]) -> tuple[str, ...]:
    t = tuple(targets)
    if not t:
        raise PreconditionError("need at least one target")
    if len(set(t)) != len(t):
        raise PreconditionError("duplicate target names")
    for name in t:
        try:
            idx = model.state_index(name)
        except KeyError:
            raise PreconditionError(f"unknown state {name!r}") from None
        if not model.reload_mask[idx]:
            raise PreconditionError(f"target {name!r} is not a reload state")
    return t


def build_target_graph(
    model: ConsumptionMDP,
    targets: Sequence[str],
    workers: int | None = None,
    timings: PhaseTimings | None = None,
) -> CostGraph:
    """Complete digraph over the targets, costed by minimal capacities.

    Pairs no finite capacity can serve get cost +inf and an annotation;
    the solvers treat such edges as "keep only if nothing else works" and
    report infeasibility if one survives into the optimum.
    """
    t = _checked_targets(model, targets)
    t0 = perf_counter()
    matrix = min_cap_matrix(model, t, t, workers=workers)
    costs: dict[Edge, float] = {}
    notes: dict[Edge, str] = {}
    for u in t:
        for v in t:
            val = matrix.value_at(u, v)
            if val is None:
                costs[(u, v)] = _INF
                notes[(u, v)] = _NOTE_UNREACHABLE
            else:
                costs[(u, v)] = val
    if timings is not None:
        timings.matrix_seconds += perf_counter() - t0
    return CostGraph(t, costs, notes)


def build_routing_graph(
    model: ConsumptionMDP,
    targets: Sequence[str],
    initials: Sequence[str],
    workers: int | None = None,
    timings: PhaseTimings | None = None,
) -> CostGraph:
    """Target graph extended with agent start vertices.

    Starts connect to and from every target but never to each other;
    agents meet only through the targets they serve.
    """
    t = _checked_targets(model, targets)
    ini = tuple(initials)
    if not ini:
        raise PreconditionError("need at least one agent start state")
    if len(set(ini)) != len(ini):
        raise PreconditionError("duplicate start states")
    overlap = set(ini) & set(t)
    if overlap:
        raise PreconditionError(f"start states also listed as targets: {sorted(overlap)}")
    for name in ini:
        try:
            model.state_index(name)
        except KeyError:
            raise PreconditionError(f"unknown state {name!r}") from None

    vertices = t + ini
    t0 = perf_counter()
    into_targets = min_cap_matrix(model, vertices, t, workers=workers)
    out_of_targets = min_cap_matrix(model, t, ini, workers=workers)
    costs: dict[Edge, float] = {}
    notes: dict[Edge, str] = {}

    def put(u: str, v: str, val: int | None) -> None:
        if val is None:
            costs[(u, v)] = _INF
            notes[(u, v)] = _NOTE_UNREACHABLE
        else:
            costs[(u, v)] = val

    for u in vertices:
        for v in t:
            put(u, v, into_targets.value_at(u, v))
    for u in t:
        for v in ini:
            put(u, v, out_of_targets.value_at(u, v))
    if timings is not None:
        timings.matrix_seconds += perf_counter() - t0
    return CostGraph(vertices, costs, notes)


def apply_variants(
    graph: CostGraph,
    constraints: VariantConstraints,
    model: ConsumptionMDP,
) -> CostGraph:
    """Rewrite edge costs for grouping and sequencing constraints.

    Groups go first: edges inside a group (self-loops included) become
    free, so the group can never be split across components. Then each
    (first, second) sequence replaces every edge into `second` with the
    two-leg cost "reach `first`, then `second`", and resets the edges out
    of `second` to the plain minimal capacity. Overridden edges keep an
    annotation; "via:" notes are honored later when cycles are expanded.
    """
    costs = dict(graph.costs)
    notes = dict(graph.annotations)
    known = set(graph.vertices)

    for group in constraints.same_agent_groups:
        if len(group) < 2:
            raise PreconditionError("a group needs at least two targets")
        for v in group:
            if v not in known:
                raise PreconditionError(f"group member {v!r} is not a graph vertex")
        for u in group:
            for v in group:
                if (u, v) in costs:
                    costs[(u, v)] = 0
                    notes[(u, v)] = _NOTE_GROUPED

    for first, second in constraints.sequences:
        for v in (first, second):
            if v not in known:
                raise PreconditionError(f"sequence target {v!r} is not a graph vertex")
        # departures first: plain minimal capacity again (undoes grouping)
        for (u, v) in list(costs):
            if u == second and v != second:
                val = min_cap_value(model, u, v)
                costs[(u, v)] = _INF if val is None else val
                notes[(u, v)] = _NOTE_RESET
        # arrivals must pick up `first` on the way, self-loop included
        for (u, v) in list(costs):
            if v == second:
                val = min_cap_sequence_value(model, u, first, second)
                costs[(u, v)] = _INF if val is None else val
                notes[(u, v)] = f"{_VIA_PREFIX}{first}"

    return CostGraph(graph.vertices, costs, notes)


# ---------------------------------------------------------------------------
# subgraph search


class _SccTracker:
    """SCC partition maintained under edge deletions.

    Deleting an edge can only split the component holding both endpoints,
    so only that component is re-examined. Everything else is untouched,
    which keeps long deletion sweeps cheap.
    """

    def __init__(self, vertices: Sequence[str], edges: Mapping[Edge, float]):
        self._vertices = tuple(vertices)
        self._adj: dict[str, set[str]] = {v: set() for v in self._vertices}
        for (u, v) in edges:
            self._adj[u].add(v)
        self._cells: list[tuple[str, ...]] = tarjan_cells(self._vertices, self._adj)
        self._cell_of: dict[str, int] = {}
        for i, cell in enumerate(self._cells):
            for v in cell:
                self._cell_of[v] = i

    def __len__(self) -> int:
        return len(self._cells)

    def cells(self) -> list[tuple[str, ...]]:
        return list(self._cells)

    def remove_edge(self, u: str, v: str) -> bool:
        """Drop (u, v); True iff a component split into pieces."""
        self._adj[u].discard(v)
        if u == v or self._cell_of[u] != self._cell_of[v]:
            return False
        i = self._cell_of[u]
        members = self._cells[i]
        inside = {
            w: [x for x in self._adj[w] if self._cell_of[x] == i] for w in members
        }
        parts = tarjan_cells(members, inside)
        if len(parts) == 1:
            return False
        self._cells[i : i + 1] = parts
        for j, cell in enumerate(self._cells[i:], start=i):
            for w in cell:
                self._cell_of[w] = j
        return True


def _costliest_edge(costs: Mapping[Edge, float], order: Mapping[str, int]) -> Edge:
    """Highest cost wins; ties break toward the smallest index pair."""
    best: Edge | None = None
    best_key = None
    for e, c in costs.items():
        key = (-c, order[e[0]], order[e[1]])
        if best is None or key < best_key:
            best, best_key = e, key
    assert best is not None
    return best


def _retained(graph: CostGraph, costs: Mapping[Edge, float]) -> CostGraph:
    notes = {e: n for e, n in graph.annotations.items() if e in costs}
    return CostGraph(graph.vertices, dict(costs), notes)


def _capacity_with_loops(
    graph: CostGraph, subgraph: CostGraph, cells: Sequence[tuple[str, ...]]
) -> float:
    """Largest retained cost, bumped by self-loops of singleton cells.

    A one-target cell without a retained loop edge still has to be left
    and re-entered by its agent, which costs the original loop price even
    though the search dropped that edge.
    """
    capacity = subgraph.cmax()
    for cell in cells:
        if len(cell) == 1:
            v = cell[0]
            loop = graph.costs.get((v, v), _INF)
            if loop > capacity:
                capacity = loop
    return capacity


def _reject_infinite(capacity: float, subgraph: CostGraph, graph: CostGraph,
                     cells: Sequence[tuple[str, ...]]) -> None:
    if not isinf(capacity):
        return
    order = {v: i for i, v in enumerate(graph.vertices)}
    infinite = [e for e, c in subgraph.costs.items() if isinf(c)]
    if not infinite:
        infinite = [
            (c[0], c[0])
            for c in cells
            if len(c) == 1 and isinf(graph.costs.get((c[0], c[0]), _INF))
        ]
    pair = min(infinite, key=lambda e: (order[e[0]], order[e[1]]))
    raise InfeasibleError(
        f"no finite capacity connects {pair[0]!r} to {pair[1]!r}, "
        "and every qualifying plan needs that leg",
        pair=pair,
    )


def min_cost_scc_decomposition(
    graph: CostGraph,
    n: int,
    mode: str = LINEAR,
    timings: PhaseTimings | None = None,
) -> PlanResult:
    """Cheapest subgraph with at most ``n`` strongly connected components.

    The component vertex sets become the allocation; the capacity is the
    costliest retained edge, corrected for singleton cells. ``linear``
    peels the costliest edge while the component count stays within
    budget; ``binary`` bisects over the distinct cost thresholds. Both
    land on the same capacity.
    """
    if mode not in _MODES:
        raise PreconditionError(f"unknown search mode {mode!r}")
    if n < 1:
        raise PreconditionError("need at least one agent")
    if not graph.vertices:
        raise PreconditionError("cost graph has no vertices")
    if not graph.is_complete():
        raise PreconditionError("allocation needs the complete cost graph")

    t0 = perf_counter()
    if len(graph.vertices) <= n:
        # one agent per target; no edge needs to be kept at all
        subgraph = CostGraph(graph.vertices, {})
    elif mode == LINEAR:
        costs = dict(graph.costs)
        order = {v: i for i, v in enumerate(graph.vertices)}
        tracker = _SccTracker(graph.vertices, costs)
        snapshot: dict[Edge, float] | None = None
        while len(tracker) <= n:
            snapshot = dict(costs)
            if not costs:
                break
            e = _costliest_edge(costs, order)
            del costs[e]
            tracker.remove_edge(*e)
        if snapshot is None:
            raise InternalError("complete graph failed the initial component check")
        subgraph = _retained(graph, snapshot)
    else:
        thresholds = sorted(set(graph.costs.values()))
        lo, hi = 0, len(thresholds) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            kept = {e: c for e, c in graph.costs.items() if c <= thresholds[mid]}
            cells = tarjan_cells(graph.vertices, _adjacency(kept, graph.vertices))
            if len(cells) <= n:
                hi = mid
            else:
                lo = mid + 1
        kept = {e: c for e, c in graph.costs.items() if c <= thresholds[lo]}
        subgraph = _retained(graph, kept)

    decomp = scc_decompose(subgraph)
    cells = decomp.cells
    capacity = _capacity_with_loops(graph, subgraph, cells)
    _reject_infinite(capacity, subgraph, graph, cells)
    if timings is not None:
        timings.scc_seconds += perf_counter() - t0
    return PlanResult(
        problem="allocation",
        mode=mode,
        graph=graph,
        subgraph=subgraph,
        capacity=capacity,
        allocation=Allocation(cells),
        agent_count=n,
    )


def _adjacency(costs: Mapping[Edge, float], vertices: Sequence[str]) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {v: [] for v in vertices}
    for (u, v) in costs:
        adj[u].append(v)
    return adj


def min_cost_scc_matching(
    graph: CostGraph,
    agents: Sequence[str],
    mode: str = LINEAR,
    timings: PhaseTimings | None = None,
) -> PlanResult:
    """Cheapest subgraph whose components all get their own agent.

    Components are taken over the non-agent vertices only. A subgraph
    qualifies when the bipartite graph "component can host agent" has a
    matching covering every component; the search then proceeds exactly
    like the allocation one. Unmatched agents stay idle.
    """
    if mode not in _MODES:
        raise PreconditionError(f"unknown search mode {mode!r}")
    agent_t = tuple(agents)
    if not agent_t:
        raise PreconditionError("need at least one agent")
    if len(set(agent_t)) != len(agent_t):
        raise PreconditionError("duplicate agent names")
    agent_set = set(agent_t)
    unknown = agent_set - set(graph.vertices)
    if unknown:
        raise PreconditionError(f"agents missing from the graph: {sorted(unknown)}")
    if len(agent_set) == len(graph.vertices):
        raise PreconditionError("graph has no target vertices")
    for (u, v) in graph.costs:
        if u in agent_set and v in agent_set:
            raise PreconditionError(f"agents must not connect directly: {(u, v)!r}")

    scc_spent = 0.0
    match_spent = 0.0

    def qualify(costs: Mapping[Edge, float]):
        nonlocal scc_spent, match_spent
        g = _retained(graph, costs)
        t0 = perf_counter()
        bip = build_bipartite(g, agent_t, cells_side)
        t1 = perf_counter()
        m = max_matching(bip)
        t2 = perf_counter()
        scc_spent += t1 - t0
        match_spent += t2 - t1
        return len(m) == len(bip.left), bip, m

    cells_side = tuple(v for v in graph.vertices if v not in agent_set)
    order = {v: i for i, v in enumerate(graph.vertices)}

    if mode == LINEAR:
        costs = dict(graph.costs)
        tracker = _SccTracker(
            cells_side,
            {e: c for e, c in costs.items() if e[0] not in agent_set and e[1] not in agent_set},
        )
        ok, bip, m = qualify(costs)
        snapshot = None
        while ok:
            snapshot = (dict(costs), bip, m)
            if not costs:
                break
            e = _costliest_edge(costs, order)
            del costs[e]
            touches_agent = e[0] in agent_set or e[1] in agent_set
            split = False
            if not touches_agent:
                split = tracker.remove_edge(*e)
            if touches_agent or split:
                ok, bip, m = qualify(costs)
            # otherwise the components and their agent hooks are unchanged
        if snapshot is None:
            raise InfeasibleError(
                "not enough reachable agents: even the full graph leaves a "
                "component unmatched"
            )
        kept, bip, m = snapshot
        subgraph = _retained(graph, kept)
    else:
        thresholds = sorted(set(graph.costs.values()))
        full_ok, _, _ = qualify(graph.costs)
        if not full_ok:
            raise InfeasibleError(
                "not enough reachable agents: even the full graph leaves a "
                "component unmatched"
            )
        lo, hi = 0, len(thresholds) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            kept = {e: c for e, c in graph.costs.items() if c <= thresholds[mid]}
            ok, _, _ = qualify(kept)
            if ok:
                hi = mid
            else:
                lo = mid + 1
        kept = {e: c for e, c in graph.costs.items() if c <= thresholds[lo]}
        ok, bip, m = qualify(kept)
        if not ok:
            raise InternalError("threshold bisection landed on a failing subgraph")
        subgraph = _retained(graph, kept)

    cells = bip.left
    capacity = _capacity_with_loops(graph, subgraph, cells)
    _reject_infinite(capacity, subgraph, graph, cells)

    cell_index = {cell: i for i, cell in enumerate(cells)}
    by_agent: dict[str, int | None] = {a: None for a in agent_t}
    for cell, agent in m.edges:
        by_agent[agent] = cell_index[cell]

    if timings is not None:
        timings.scc_seconds += scc_spent
        timings.matching_seconds += match_spent
    return PlanResult(
        problem="routing",
        mode=mode,
        graph=graph,
        subgraph=subgraph,
        capacity=capacity,
        allocation=Allocation(cells),
        agent_count=len(agent_t),
        agents=agent_t,
        assignment=Assignment(by_agent),
        matching=m,
    )


def extract_allocation(result: PlanResult) -> Allocation:
    """The target cells of a result, re-checked to partition the targets."""
    agent_set = set(result.agents)
    expected = sorted(v for v in result.graph.vertices if v not in agent_set)
    got = sorted(v for cell in result.allocation.cells for v in cell)
    if got != expected:
        raise InternalError("allocation does not partition the target set")
    return result.allocation


def extract_assignment(result: PlanResult) -> Assignment:
    """The agent assignment, re-checked to cover every cell exactly once."""
    if result.assignment is None:
        raise PreconditionError("allocation-only result carries no assignment")
    used = [i for i in result.assignment.by_agent.values() if i is not None]
    if sorted(used) != list(range(len(result.allocation.cells))):
        raise InternalError("assignment does not cover each cell exactly once")
    return result.assignment


# ---------------------------------------------------------------------------
# cycles and simulation


def _leg_via(graph: CostGraph, edge: Edge) -> str | None:
    note = graph.annotations.get(edge, "")
    if note.startswith(_VIA_PREFIX):
        return note[len(_VIA_PREFIX):]
    return None


def _bfs_path(
    adj: Mapping[str, list[str]], start: str, goals: set[str]
) -> list[str] | None:
    """Shortest path from start to the nearest goal; ties pick the goal
    discovered first under index-ordered expansion."""
    if start in goals:
        return [start]
    parent: dict[str, str] = {start: start}
    frontier = [start]
    while frontier:
        nxt: list[str] = []
        for u in frontier:
            for v in adj[u]:
                if v in parent:
                    continue
                parent[v] = u
                if v in goals:
                    path = [v]
                    while path[-1] != start:
                        path.append(parent[path[-1]])
                    path.reverse()
                    return path
                nxt.append(v)
        frontier = nxt
    return None


def plan_cycle(
    result: PlanResult,
    cell: Sequence[str],
    model: ConsumptionMDP,
    with_witnesses: bool = True,
) -> CellPlan:
    """Closed walk through one cell, legs paired with their strategies.

    The walk uses retained edges only, visits every member, and returns
    to its start, so an agent can loop it forever. Sequencing overrides
    expand in place: the waypoint shows up in the visit order and the leg
    gets a phased witness. Witnesses are extracted at the plan capacity.
    """
    cell_t = tuple(cell)
    wanted = set(cell_t)
    for candidate in result.allocation.cells:
        if set(candidate) == wanted:
            cell_t = candidate
            break
    else:
        raise PreconditionError(f"{cell!r} is not a cell of this plan")

    capacity = result.capacity
    cap = int(capacity)
    if cap != capacity:
        raise PreconditionError("cycles need an integer plan capacity")

    if len(cell_t) == 1:
        walk_edges: list[Edge] = [(cell_t[0], cell_t[0])]
    else:
        members = set(cell_t)
        adj = {
            u: [v for v in result.subgraph.successors(u) if v in members]
            for u in cell_t
        }
        if len(tarjan_cells(cell_t, adj)) != 1:
            raise InternalError("allocated cell is not strongly connected in the kept subgraph")
        walk = [cell_t[0]]
        missing = set(cell_t[1:])
        while missing:
            path = _bfs_path(adj, walk[-1], missing)
            if path is None:
                raise InternalError("strongly connected cell has no covering walk")
            walk.extend(path[1:])
            for v in path:
                missing.discard(v)
        back = _bfs_path(adj, walk[-1], {cell_t[0]})
        if back is None:
            raise InternalError("strongly connected cell has no covering walk")
        walk.extend(back[1:])
        walk_edges = [(walk[i], walk[i + 1]) for i in range(len(walk) - 1)]

    legs: list[Leg] = []
    visit: list[str] = [walk_edges[0][0]]
    plain_cache: dict[str, CounterStrategy] = {}
    phased_cache: dict[tuple[str, str], PhasedCounterStrategy] = {}
    for (u, v) in walk_edges:
        via = _leg_via(result.graph, (u, v))
        witness = None
        if with_witnesses:
            if via is None:
                if not feasible(model, cap, u, v):
                    raise InfeasibleError(
                        f"leg {u!r} -> {v!r} is not achievable at capacity {cap}",
                        pair=(u, v),
                    )
                witness = plain_cache.get(v)
                if witness is None:
                    witness = plain_cache[v] = counter_strategy(model, cap, v)
            else:
                need = min_cap_sequence_value(model, u, via, v)
                if need is None or need > cap:
                    raise InfeasibleError(
                        f"leg {u!r} -> {via!r} -> {v!r} is not achievable at capacity {cap}",
                        pair=(u, v),
                    )
                witness = phased_cache.get((via, v))
                if witness is None:
                    witness = phased_cache[(via, v)] = sequence_strategy(model, cap, via, v)
        legs.append(Leg(source=u, target=v, via=via, witness=witness))
        if via is not None and via not in (u, v):
            visit.append(via)
        visit.append(v)

    return CellPlan(cell=cell_t, capacity=cap, visit_order=tuple(visit), legs=tuple(legs))


def _entry_target(result: PlanResult, agent: str, cell: tuple[str, ...]) -> str:
    members = set(cell)
    for v in result.subgraph.successors(agent):
        if v in members:
            return v
    raise InternalError(f"matched agent {agent!r} has no kept edge into its cell")


def _rotate_legs(legs: tuple[Leg, ...], start: str) -> tuple[Leg, ...]:
    for i, leg in enumerate(legs):
        if leg.source == start:
            return legs[i:] + legs[:i]
    raise InternalError(f"no leg starts at {start!r}")


class _LegRunner:
    """Compiled view of one leg for the simulation loop."""

    def __init__(self, model: ConsumptionMDP, leg: Leg):
        self.target = model.state_index(leg.target)
        self.via = None if leg.via is None else model.state_index(leg.via)
        w = leg.witness
        if w is None:
            raise PreconditionError("simulation needs witnesses; build cycles with them")
        if isinstance(w, PhasedCounterStrategy):
            self.phased = True
            self.choice = {
                (model.state_index(s), lv, p): model.action_index(a)
                for (s, lv, p), a in w.choice.items()
            }
        else:
            self.phased = False
            self.choice = w.compile(model)

    def action(self, state: int, level: int, phase: int) -> int | None:
        key = (state, level, phase) if self.phased else (state, level)
        return self.choice.get(key)

    def done(self, state: int, phase: int) -> bool:
        return state == self.target and (not self.phased or phase == 1)


def simulate_plan(
    model: ConsumptionMDP,
    result: PlanResult,
    runs: int = 1000,
    seed: int = 0,
    horizon: int | None = None,
) -> dict[str, SimulationStats]:
    """Replay every agent's patrol and count what could go wrong.

    Allocation plans get synthetic agent names (cell order); routing
    plans use the real ones and prepend the trip from the start state.
    Each run samples transitions under the per-leg witnesses, switching
    legs on arrival. The default horizon is 10 * capacity * cell size.
    Coverage means every cell member was seen at least once.
    """
    capacity = int(result.capacity)
    if capacity != result.capacity:
        raise PreconditionError("simulation needs an integer plan capacity")

    cycles = {
        i: plan_cycle(result, cell, model)
        for i, cell in enumerate(result.allocation.cells)
    }

    jobs: list[tuple[str, int, tuple[Leg, ...], int, str]] = []
    if result.assignment is None:
        for i, cell in enumerate(result.allocation.cells):
            legs = cycles[i].legs
            jobs.append((f"agent-{i}", i, legs, 0, legs[0].source))
    else:
        for agent in result.agents:
            ci = result.assignment.by_agent[agent]
            if ci is None:
                continue
            cell = result.allocation.cells[ci]
            entry = _entry_target(result, agent, cell)
            rotated = _rotate_legs(cycles[ci].legs, entry)
            via = _leg_via(result.graph, (agent, entry))
            if via is None:
                if not feasible(model, capacity, agent, entry):
                    raise InfeasibleError(
                        f"entry leg {agent!r} -> {entry!r} is not achievable "
                        f"at capacity {capacity}",
                        pair=(agent, entry),
                    )
                entry_witness: CounterStrategy | PhasedCounterStrategy = counter_strategy(
                    model, capacity, entry
                )
            else:
                need = min_cap_sequence_value(model, agent, via, entry)
                if need is None or need > capacity:
                    raise InfeasibleError(
                        f"entry leg {agent!r} -> {via!r} -> {entry!r} is not "
                        f"achievable at capacity {capacity}",
                        pair=(agent, entry),
                    )
                entry_witness = sequence_strategy(model, capacity, via, entry)
            entry_leg = Leg(source=agent, target=entry, via=via, witness=entry_witness)
            jobs.append((agent, ci, (entry_leg,) + rotated, 1, agent))

    out: dict[str, SimulationStats] = {}
    for ordinal, (label, ci, legs, cycle_start, start_name) in enumerate(jobs):
        cell = result.allocation.cells[ci]
        members = {model.state_index(v) for v in cell}
        h = horizon if horizon is not None else 10 * capacity * len(cell)
        runners = [_LegRunner(model, leg) for leg in legs]
        rng = np.random.default_rng([seed, ordinal])
        start = model.state_index(start_name)

        cumulative: dict[tuple[int, int], tuple[tuple[int, ...], tuple[float, ...]]] = {}
        depletions = 0
        covered = 0
        cover_total = 0
        min_level = capacity
        for _ in range(runs):
            state, level = start, capacity
            pos = 0
            runner = runners[pos]
            phase = 1 if (runner.phased and state == runner.via) else 0
            missing = set(members)
            missing.discard(state)
            cover_step = 0 if not missing else None
            for step in range(1, h + 1):
                action = runner.action(state, level, phase)
                if action is None:
                    raise InternalError(
                        f"witness undefined at {model.state_names[state]!r} level {level}"
                    )
                nxt_level = level_after(model, capacity, state, level, action)
                if nxt_level is None:
                    depletions += 1
                    break
                key = (state, action)
                if key not in cumulative:
                    acc = 0.0
                    cum = []
                    for p in model.probs[state][action]:
                        acc += p
                        cum.append(acc)
                    cumulative[key] = (model.support[state][action], tuple(cum))
                succs, cum = cumulative[key]
                if len(succs) == 1:
                    state = succs[0]
                else:
                    u = rng.random()
                    lo, hi_ix = 0, len(cum) - 1
                    while lo < hi_ix:
                        mid = (lo + hi_ix) // 2
                        if cum[mid] > u:
                            hi_ix = mid
                        else:
                            lo = mid + 1
                    state = succs[lo]
                level = nxt_level
                if level < min_level:
                    min_level = level
                if runner.phased and state == runner.via:
                    phase = 1
                if cover_step is None:
                    missing.discard(state)
                    if not missing:
                        cover_step = step
                if runner.done(state, phase):
                    pos += 1
                    if pos >= len(runners):
                        pos = cycle_start
                    runner = runners[pos]
                    phase = 1 if (runner.phased and state == runner.via) else 0
            if cover_step is not None:
                covered += 1
                cover_total += cover_step
        out[label] = SimulationStats(
            runs=runs,
            depletion_count=depletions,
            covered_count=covered,
            mean_steps_to_cover=(cover_total / covered) if covered else None,
            min_level_observed=min_level,
        )
    return out


# ---------------------------------------------------------------------------
# conveniences and serialization


def solve_allocation(
    model: ConsumptionMDP,
    targets: Sequence[str],
    n: int,
    mode: str = LINEAR,
    constraints: VariantConstraints | None = None,
    workers: int | None = None,
    timings: PhaseTimings | None = None,
) -> PlanResult:
    """Build the target graph, apply constraints, decompose."""
    t0 = perf_counter()
    graph = build_target_graph(model, targets, workers=workers, timings=timings)
    if constraints is not None:
        t1 = perf_counter()
        graph = apply_variants(graph, constraints, model)
        if timings is not None:
            timings.matrix_seconds += perf_counter() - t1
    result = min_cost_scc_decomposition(graph, n, mode, timings=timings)
    if timings is not None:
        timings.total_seconds += perf_counter() - t0
    return result


def solve_routing(
    model: ConsumptionMDP,
    targets: Sequence[str],
    initials: Sequence[str],
    mode: str = LINEAR,
    constraints: VariantConstraints | None = None,
    workers: int | None = None,
    timings: PhaseTimings | None = None,
) -> PlanResult:
    """Build the routing graph, apply constraints, match."""
    t0 = perf_counter()
    graph = build_routing_graph(model, targets, initials, workers=workers, timings=timings)
    if constraints is not None:
        t1 = perf_counter()
        graph = apply_variants(graph, constraints, model)
        if timings is not None:
            timings.matrix_seconds += perf_counter() - t1
    result = min_cost_scc_matching(graph, initials, mode, timings=timings)
    if timings is not None:
        timings.total_seconds += perf_counter() - t0
    return result


def plan_to_json(result: PlanResult, cycles: Sequence[CellPlan] | None = None) -> str:
    """Serialize a result (and optionally its cycles) for the CLI."""
    doc: dict = {
        "schema": "plan-v1",
        "problem": result.problem,
        "mode": result.mode,
        "agent_count": result.agent_count,
        "agents": list(result.agents),
        "capacity": result.capacity,
        "allocation": [list(cell) for cell in result.allocation.cells],
        "assignment": (
            None
            if result.assignment is None
            else {a: result.assignment.by_agent[a] for a in result.agents}
        ),
        "cycles": None if cycles is None else [list(cp.visit_order) for cp in cycles],
        "retained_edges": [
            [u, v, result.subgraph.costs[(u, v)]] for (u, v) in result.subgraph.edges
        ],
        "overrides": [
            {"from": u, "to": v, "note": result.graph.annotations[(u, v)]}
            for (u, v) in result.graph.edges
            if (u, v) in result.graph.annotations
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def plan_to_dot(result: PlanResult) -> str:
    """DOT rendering: colored cells, dashed dropped edges, boxed agents."""
    comps = []
    for cell in result.allocation.cells:
        members = set(cell)
        edges = tuple(
            e for e in result.subgraph.edges if e[0] in members and e[1] in members
        )
        comps.append(SccComponent(vertices=cell, edges=edges))
    decomp = SccDecomposition(tuple(comps))
    return to_dot(result.graph, decomposition=decomp, retained=result.subgraph, boxed=result.agents)
