"""Directed graphs with edge costs and the matching machinery on top.

Everything here is deterministic under the input vertex order: SCCs are
reported sorted by their smallest member index, component members are
sorted, and the matcher scans vertices in index order. Costs are plain
floats (integers in the exact pipeline) and are compared exactly; +inf is
a legal cost meaning "connection impossible".
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ModelFormatError, PreconditionError

Edge = tuple[str, str]


@dataclass(frozen=True, eq=False)
class CostGraph:
    """Finite directed graph with real edge costs.

    ``costs`` maps ``(u, v)`` to the edge cost; its key set is the edge
    set. ``annotations`` optionally records audit notes per edge (used by
    the planner when a cost was overridden).
    """

    vertices: tuple[str, ...]
    costs: Mapping[Edge, float]
    annotations: Mapping[Edge, str] = field(default_factory=dict)

    def __post_init__(self):
        idx = {v: i for i, v in enumerate(self.vertices)}
        if len(idx) != len(self.vertices):
            raise PreconditionError("duplicate vertex names")
        for (u, v) in self.costs:
            if u not in idx or v not in idx:
                raise PreconditionError(f"edge ({u!r}, {v!r}) uses unknown vertex")
        object.__setattr__(self, "_index", idx)

    def index(self, v: str) -> int:
        return self._index[v]

    @property
    def edges(self) -> list[Edge]:
        """Edges sorted by (source index, target index)."""
        return sorted(self.costs, key=lambda e: (self._index[e[0]], self._index[e[1]]))

    def cost(self, u: str, v: str) -> float:
        return self.costs[(u, v)]

    def cmax(self) -> float:
        """Largest edge cost; -inf for an edgeless graph."""
        return max(self.costs.values(), default=float("-inf"))

    def successors(self, u: str) -> list[str]:
        out = [v for (a, v) in self.costs if a == u]
        out.sort(key=self._index.__getitem__)
        return out

    def without_edge(self, edge: Edge) -> "CostGraph":
        if edge not in self.costs:
            raise PreconditionError(f"edge {edge!r} not in graph")
        costs = dict(self.costs)
        del costs[edge]
        return CostGraph(self.vertices, costs, dict(self.annotations))

    def is_complete(self) -> bool:
        return len(self.costs) == len(self.vertices) ** 2


@dataclass(frozen=True)
class SccComponent:
    vertices: tuple[str, ...]
    edges: tuple[Edge, ...]

    @property
    def trivial(self) -> bool:
        """Single vertex with no self-loop: carries no cycle."""
        return len(self.vertices) == 1 and not self.edges


@dataclass(frozen=True, eq=False)
class SccDecomposition:
    components: tuple[SccComponent, ...]

    def __post_init__(self):
        owner = {}
        for i, comp in enumerate(self.components):
            for v in comp.vertices:
                owner[v] = i
        object.__setattr__(self, "_owner", owner)

    def __len__(self) -> int:
        return len(self.components)

    def component_of(self, v: str) -> int:
        return self._owner[v]

    @property
    def cells(self) -> tuple[tuple[str, ...], ...]:
        return tuple(c.vertices for c in self.components)


@dataclass(frozen=True)
class BipartiteGraph:
    """Left side: SCC cells (vertex tuples); right side: plain vertices."""

    left: tuple[tuple[str, ...], ...]
    right: tuple[str, ...]
    adjacency: Mapping[tuple[str, ...], tuple[str, ...]]


@dataclass(frozen=True)
class Matching:
    edges: tuple[tuple[tuple[str, ...], str], ...]

    def __len__(self) -> int:
        return len(self.edges)

    def right_of(self, cell: tuple[str, ...]) -> str | None:
        for left, right in self.edges:
            if left == cell:
                return right
        return None


# Opcodes for the explicit-stack Tarjan walk.
_VISIT, _EDGE, _POST = 0, 1, 2


def tarjan_cells(vertices: Sequence[str], adjacency: Mapping[str, Iterable[str]]) -> list[tuple[str, ...]]:
    """Maximal strongly connected vertex sets via iterative Tarjan.

    Uses an explicit work stack instead of recursion so deep graphs do
    not hit the interpreter limit. Cells come out sorted by their
    smallest member index (relative to `vertices`), members sorted too.
    """
    order = {v: i for i, v in enumerate(vertices)}
    adj: dict[str, list[str]] = {v: [] for v in vertices}
    for u, targets in adjacency.items():
        adj[u] = sorted(targets, key=order.__getitem__)

    index: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = 0
    raw: list[list[str]] = []

    for root in vertices:
        if root in index:
            continue
        work: list[tuple[int, str, str | None]] = [(_VISIT, root, None)]
        while work:
            op, v, parent = work.pop()
            if op == _VISIT:
                index[v] = lowlink[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
                work.append((_POST, v, parent))
                for w in reversed(adj[v]):
                    work.append((_EDGE, w, v))
            elif op == _EDGE:
                w, v = v, parent
                if w not in index:
                    work.append((_VISIT, w, v))
                elif w in on_stack:
                    lowlink[v] = min(lowlink[v], index[w])
            else:
                if parent is not None:
                    lowlink[parent] = min(lowlink[parent], lowlink[v])
                if lowlink[v] == index[v]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack.discard(w)
                        comp.append(w)
                        if w == v:
                            break
                    raw.append(comp)

    cells = [tuple(sorted(comp, key=order.__getitem__)) for comp in raw]
    cells.sort(key=lambda c: order[c[0]])
    return cells


def scc_decompose(graph: CostGraph) -> SccDecomposition:
    """Maximal strongly connected components with their internal edges."""
    adjacency: dict[str, list[str]] = {v: [] for v in graph.vertices}
    for (u, v) in graph.costs:
        adjacency[u].append(v)
    components = []
    for members in tarjan_cells(graph.vertices, adjacency):
        member_set = set(members)
        edges = tuple(
            e for e in graph.edges if e[0] in member_set and e[1] in member_set
        )
        components.append(SccComponent(vertices=members, edges=edges))
    return SccDecomposition(tuple(components))


def threshold_subgraph(graph: CostGraph, cutoff: float) -> CostGraph:
    """Keep edges with cost <= cutoff (exact comparison)."""
    costs = {e: c for e, c in graph.costs.items() if c <= cutoff}
    notes = {e: n for e, n in graph.annotations.items() if e in costs}
    return CostGraph(graph.vertices, costs, notes)


def induced_subgraph(graph: CostGraph, keep: Iterable[str]) -> CostGraph:
    keep_list = list(keep)
    keep_set = set(keep_list)
    unknown = keep_set - set(graph.vertices)
    if unknown:
        raise PreconditionError(f"unknown vertices: {sorted(unknown)}")
    vertices = tuple(v for v in graph.vertices if v in keep_set)
    costs = {e: c for e, c in graph.costs.items() if e[0] in keep_set and e[1] in keep_set}
    notes = {e: n for e, n in graph.annotations.items() if e in costs}
    return CostGraph(vertices, costs, notes)


def build_bipartite(graph: CostGraph, initials: Sequence[str], cells_side: Sequence[str]) -> BipartiteGraph:
    """Connect each SCC cell of the induced subgraph to compatible agents.

    Cell Q gets an edge to agent i iff some member of Q has an edge to i
    and i has an edge to some (possibly different) member of Q. Edges
    between agents, if present, are ignored.
    """
    iset, vset = set(initials), set(cells_side)
    if iset & vset:
        raise PreconditionError(f"overlapping sides: {sorted(iset & vset)}")
    if iset | vset != set(graph.vertices):
        raise PreconditionError("initials and cell side must partition the vertices")
    if not iset:
        raise PreconditionError("initials side must be nonempty")
    decomp = scc_decompose(induced_subgraph(graph, cells_side))
    into_agent: dict[str, set[str]] = {}
    from_agent: dict[str, set[str]] = {}
    for (u, v) in graph.costs:
        if u in vset and v in iset:
            into_agent.setdefault(v, set()).add(u)
        elif u in iset and v in vset:
            from_agent.setdefault(u, set()).add(v)
    order = {v: i for i, v in enumerate(graph.vertices)}
    right = tuple(sorted(iset, key=order.__getitem__))
    adjacency = {}
    for comp in decomp.components:
        members = set(comp.vertices)
        hooked = []
        for agent in right:
            if members & into_agent.get(agent, set()) and members & from_agent.get(agent, set()):
                hooked.append(agent)
        adjacency[comp.vertices] = tuple(hooked)
    return BipartiteGraph(left=decomp.cells, right=right, adjacency=adjacency)


def max_matching(bip: BipartiteGraph) -> Matching:
    """Maximum bipartite matching (Hopcroft-Karp).

    BFS builds alternating layers from the free left cells, then DFS
    pulls out a maximal set of vertex-disjoint shortest augmenting paths;
    repeat until no augmenting path remains. Deterministic under the
    input ordering. Sizes here are small (cells x agents), so the DFS
    recursion depth is never a concern.
    """
    left = list(bip.left)
    match_left: dict[tuple[str, ...], str | None] = {u: None for u in left}
    match_right: dict[str, tuple[str, ...] | None] = {r: None for r in bip.right}
    inf = float("inf")

    def bfs() -> bool:
        dist: dict[tuple[str, ...], float] = {}
        queue = deque()
        for u in left:
            if match_left[u] is None:
                dist[u] = 0
                queue.append(u)
        reached_free = inf
        while queue:
            u = queue.popleft()
            if dist[u] >= reached_free:
                continue
            for r in bip.adjacency[u]:
                nxt = match_right[r]
                if nxt is None:
                    reached_free = min(reached_free, dist[u] + 1)
                elif nxt not in dist:
                    dist[nxt] = dist[u] + 1
                    queue.append(nxt)
        bfs.dist = dist  # type: ignore[attr-defined]
        return reached_free < inf

    def dfs(u: tuple[str, ...]) -> bool:
        dist = bfs.dist  # type: ignore[attr-defined]
        for r in bip.adjacency[u]:
            nxt = match_right[r]
            if nxt is None or (dist.get(nxt) == dist[u] + 1 and dfs(nxt)):
                match_right[r] = u
                match_left[u] = r
                return True
        dist.pop(u, None)
        return False

    while bfs():
        for u in left:
            if match_left[u] is None:
                dfs(u)
    edges = tuple((u, match_left[u]) for u in left if match_left[u] is not None)
    return Matching(edges=edges)


def parse_edge_list(text: str) -> CostGraph:
    """Parse 'u v cost' lines; '#' starts a comment, blank lines ignored."""
    costs: dict[Edge, float] = {}
    seen: list[str] = []
    seen_set: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ModelFormatError(f"line {lineno}: expected 'u v cost', got {raw!r}")
        u, v, cost_text = parts
        try:
            cost = float(cost_text)
        except ValueError:
            raise ModelFormatError(f"line {lineno}: bad cost {cost_text!r}") from None
        for name in (u, v):
            if name not in seen_set:
                seen_set.add(name)
                seen.append(name)
        if (u, v) in costs:
            raise ModelFormatError(f"line {lineno}: duplicate edge ({u!r}, {v!r})")
        costs[(u, v)] = cost
    return CostGraph(tuple(seen), costs)


def format_edge_list(graph: CostGraph) -> str:
    lines = []
    for (u, v) in graph.edges:
        c = graph.costs[(u, v)]
        lines.append(f"{u} {v} {c:g}" if c != float("inf") else f"{u} {v} inf")
    return "\n".join(lines) + ("\n" if lines else "")


_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
)


def to_dot(
    graph: CostGraph,
    decomposition: SccDecomposition | None = None,
    retained: CostGraph | None = None,
    boxed: Iterable[str] = (),
) -> str:
    """Render to DOT; components get colors, dropped edges go dashed gray.

    ``retained`` marks the surviving subgraph: edges of ``graph`` missing
    from it render dashed. ``boxed`` vertices use a box shape (agents).
    """
    boxed_set = set(boxed)
    lines = ["digraph costs {", "  rankdir=LR;"]
    for v in graph.vertices:
        attrs = []
        if decomposition is not None and v in decomposition._owner:
            color = _PALETTE[decomposition.component_of(v) % len(_PALETTE)]
            attrs.append(f'color="{color}"')
        if v in boxed_set:
            attrs.append("shape=box")
        lines.append(f'  "{v}" [{", ".join(attrs)}];' if attrs else f'  "{v}";')
    for (u, v) in graph.edges:
        c = graph.costs[(u, v)]
        label = "inf" if c == float("inf") else f"{c:g}"
        attrs = [f'label="{label}"']
        if retained is not None and (u, v) not in retained.costs:
            attrs.append('style=dashed, color=gray')
        note = graph.annotations.get((u, v))
        if note:
            attrs.append(f'tooltip="{note}"')
        lines.append(f'  "{u}" -> "{v}" [{", ".join(attrs)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_to_json(graph: CostGraph) -> str:
    doc = {
        "vertices": list(graph.vertices),
        "edges": [[u, v, graph.costs[(u, v)]] for (u, v) in graph.edges],
    }
    return json.dumps(doc, indent=2) + "\n"
