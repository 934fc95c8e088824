"""Capacity-feasibility decisions, minimal capacities, and witness strategies.

The decision problem: given a capacity, can a strategy starting at `source`
with a full tank keep every possible run safe forever and still visit
`target` with probability one? Visiting counts from the first state, so
source = target reduces to surviving forever.

Semantically everything happens on the product arena of (state, level)
vertices plus the depletion sink. The production path never materializes
that arena: winning sets are upward closed in the level (spare resource
never hurts), so each state carries a single threshold, and the fixpoints
run as vectorized sweeps over per-state threshold arrays:

* safety: least fixpoint of T(s) = min over actions of the level needed
  to keep all branches safe forever;
* reach: shrink a candidate region, starting from the safe region, by
  alternating an attractor pass (levels from which some action keeps all
  branches inside the candidate region and moves one branch closer to
  the target) with a re-restriction to what the pass retained. Target
  vertices stay winning at their safety threshold throughout: once the
  target is visited, surviving forever is all that remains.

`ProductArena` keeps the explicit construction available as a slow
reference used to cross-check the threshold engine.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .cmdp import ConsumptionMDP, CounterStrategy
from .errors import InternalError, ModelFormatError, PreconditionError

INF_LEVEL = 1 << 30  # larger than any usable threshold, safe to add consumptions to


@dataclass(frozen=True)
class CapacityResult:
    """Minimal capacity for one source/target pair.

    `value` is None when no finite capacity suffices; the witness is
    present exactly when the value is finite and is extracted at that
    capacity.
    """

    value: int | None
    witness: "CounterStrategy | PhasedCounterStrategy | None"

    def __post_init__(self):
        if (self.value is None) != (self.witness is None):
            raise InternalError("witness must be present iff the value is finite")
        if self.witness is not None and self.witness.capacity != self.value:
            raise InternalError("witness capacity differs from computed value")

    @property
    def feasible(self) -> bool:
        return self.value is not None


@dataclass(frozen=True)
class PhasedCounterStrategy:
    """Deterministic strategy with memory (resource level, phase bit).

    Used for two-leg objectives: phase 0 before the intermediate state
    has been visited, phase 1 after.
    """

    capacity: int
    choice: Mapping[tuple[str, int, int], str]

    def action_at(self, state: str, level: int, phase: int) -> str:
        try:
            return self.choice[(state, level, phase)]
        except KeyError:
            from .errors import StrategyDomainError

            raise StrategyDomainError(f"{state} (phase {phase})", level) from None


@dataclass(frozen=True, eq=False)
class CapacityMatrix:
    """Minimal-capacity values for row x column state pairs.

    Entries hold values only (None for infeasible pairs); witnesses are
    re-extracted on demand at whatever capacity the caller settles on.
    """

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: Mapping[tuple[str, str], int | None]

    def value_at(self, row: str, col: str) -> int | None:
        return self.values[(row, col)]


def matrix_to_csv(matrix: CapacityMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(matrix.cols))
    for r in matrix.rows:
        row = [r]
        for c in matrix.cols:
            v = matrix.values[(r, c)]
            row.append("INF" if v is None else str(v))
        writer.writerow(row)
    return buf.getvalue()


def matrix_from_csv(text: str) -> CapacityMatrix:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ModelFormatError("empty capacity matrix") from None
    if not header or header[0] != "":
        raise ModelFormatError("capacity matrix header must start with an empty cell")
    cols = tuple(header[1:])
    rows: list[str] = []
    values: dict[tuple[str, str], int | None] = {}
    for line in reader:
        if not line:
            continue
        if len(line) != len(cols) + 1:
            raise ModelFormatError(f"row {line[0]!r} has {len(line) - 1} entries, expected {len(cols)}")
        rows.append(line[0])
        for c, cell in zip(cols, line[1:]):
            if cell == "INF":
                values[(line[0], c)] = None
            else:
                try:
                    values[(line[0], c)] = int(cell)
                except ValueError:
                    raise ModelFormatError(f"bad capacity entry {cell!r}") from None
    return CapacityMatrix(tuple(rows), cols, values)


# ---------------------------------------------------------------------------
# model arrays and caches


class _Arrays:
    """Padded array view of a model for vectorized sweeps.

    SUCC[s, a, w] lists successor indices padded by repetition (repeats
    never change a max or min over the axis), CONS[s, a] consumptions,
    RELOAD[s] the reload mask.
    """

    __slots__ = ("SUCC", "CONS", "RELOAD", "max_cons", "width")

    def __init__(self, model: ConsumptionMDP):
        n, m = model.n_states, model.n_actions
        width = max(len(model.support[s][a]) for s in range(n) for a in range(m))
        succ = np.empty((n, m, width), dtype=np.int64)
        for s in range(n):
            for a in range(m):
                row = model.support[s][a]
                padded = row + (row[0],) * (width - len(row))
                succ[s, a, :] = padded
        self.SUCC = succ
        self.CONS = model.consumption.astype(np.int64)
        self.RELOAD = model.reload_mask.copy()
        self.max_cons = int(self.CONS.max()) if self.CONS.size else 0
        self.width = width


def _cache(model: ConsumptionMDP) -> dict:
    cache = getattr(model, "_synthesis_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(model, "_synthesis_cache", cache)
    return cache


def _arrays(model: ConsumptionMDP) -> _Arrays:
    cache = _cache(model)
    arr = cache.get("arrays")
    if arr is None:
        arr = cache["arrays"] = _Arrays(model)
    return arr


def _state(model: ConsumptionMDP, name: str) -> int:
    try:
        return model.state_index(name)
    except KeyError:
        raise PreconditionError(f"unknown state {name!r}") from None


def _action_values(arr: _Arrays, cap: int, per_succ_level: np.ndarray) -> np.ndarray:
    """Threshold per (state, action) given the per-action successor level
    requirement `per_succ_level[s, a]` (what the arrival level must reach)."""
    non_reload = arr.CONS + per_succ_level
    np.copyto(non_reload, INF_LEVEL, where=non_reload > cap)
    ok = (arr.CONS <= cap) & (cap - arr.CONS >= per_succ_level)
    reload = np.where(ok, 0, INF_LEVEL)
    return np.where(arr.RELOAD[:, None], reload, non_reload)


def _safety_thresholds(model: ConsumptionMDP, cap: int) -> np.ndarray:
    """Least level per state from which all branches stay safe forever."""
    arr = _arrays(model)
    rho = np.zeros(model.n_states, dtype=np.int64)
    guard = (model.n_states + 2) * (cap + 2) + 4
    for _ in range(guard):
        need = rho[arr.SUCC].max(axis=2)
        new = _action_values(arr, cap, need).min(axis=1)
        if np.array_equal(new, rho):
            return rho
        rho = new
    raise InternalError("safety fixpoint failed to converge")


def _reach_thresholds(model: ConsumptionMDP, cap: int, target: int) -> tuple[np.ndarray, np.ndarray]:
    """(safety thresholds, winning thresholds) for almost-sure safe reach.

    The winning region is a fixpoint over candidate thresholds x: within
    the region cut at x, an attractor pass computes the least levels that
    force one branch closer to the target while keeping every branch in
    the region; the pass result becomes the next candidate. The target
    state is pinned at its safety threshold: reaching it at a level that
    cannot survive afterwards does not count.
    """
    arr = _arrays(model)
    cache = _cache(model)
    rho = cache.get(("safety", cap))
    if rho is None:
        rho = cache[("safety", cap)] = _safety_thresholds(model, cap)
    pinned = rho[target]  # INF_LEVEL here means the pair is hopeless at this cap
    x = rho
    outer_guard = (model.n_states + 2) * (cap + 2) + 4
    for _ in range(outer_guard):
        max_x = x[arr.SUCC].max(axis=2)
        y = np.full(model.n_states, INF_LEVEL, dtype=np.int64)
        y[target] = pinned
        for _ in range(outer_guard):
            min_y = y[arr.SUCC].min(axis=2)
            need = np.maximum(max_x, min_y)
            best = _action_values(arr, cap, need).min(axis=1)
            # a vertex must already lie in the candidate region (level >= x),
            # which also keeps the pinned target entry intact
            new_y = np.minimum(y, np.maximum(x, best))
            if np.array_equal(new_y, y):
                break
            y = new_y
        else:
            raise InternalError("reach attractor failed to converge")
        if np.array_equal(y, x):
            return rho, x
        x = y
    raise InternalError("reach fixpoint failed to converge")


def winning_thresholds(model: ConsumptionMDP, capacity: int, target: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-state (safety, winning) level thresholds at this capacity.

    Entry >= INF_LEVEL means no level works. Winning means: all branches
    safe forever and the target visited almost surely.
    """
    if capacity < 0:
        raise PreconditionError("capacity must be non-negative")
    t = _state(model, target)
    cache = _cache(model)
    key = ("reach", capacity, t)
    got = cache.get(key)
    if got is None:
        got = cache[key] = _reach_thresholds(model, capacity, t)
    rho, pi = got
    return rho.copy(), pi.copy()


def feasible(model: ConsumptionMDP, capacity: int, source: str, target: str) -> bool:
    """Can some strategy, from `source` with a full tank of `capacity`,
    keep every run safe forever and visit `target` with probability 1?"""
    if capacity < 0:
        raise PreconditionError("capacity must be non-negative")
    s = _state(model, source)
    t = _state(model, target)
    cache = _cache(model)
    key = ("reach", capacity, t)
    got = cache.get(key)
    if got is None:
        got = cache[key] = _reach_thresholds(model, capacity, t)
    return int(got[1][s]) <= capacity


def capacity_upper_bound(model: ConsumptionMDP) -> int:
    """Capacity beyond which feasibility can no longer change: enough to
    cross |S| fresh states at worst-case consumption."""
    return model.n_states * _arrays(model).max_cons


def min_cap(model: ConsumptionMDP, source: str, target: str) -> CapacityResult:
    """Least capacity making (source -> target) feasible, with a witness."""
    _state(model, source)
    value = _min_cap_value(model, source, target)
    if value is None:
        return CapacityResult(value=None, witness=None)
    return CapacityResult(value=value, witness=counter_strategy(model, value, target))


def _min_cap_value(model: ConsumptionMDP, source: str, target: str) -> int | None:
    cap_ub = capacity_upper_bound(model)
    if not feasible(model, cap_ub, source, target):
        return None
    lo, hi = 0, cap_ub
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(model, mid, source, target):
            hi = mid
        else:
            lo = mid + 1
    return lo


def min_cap_value(model: ConsumptionMDP, source: str, target: str) -> int | None:
    """Like min_cap but value-only, skipping witness extraction."""
    _state(model, source)
    return _min_cap_value(model, source, target)


def min_cap_matrix(
    model: ConsumptionMDP,
    rows: Sequence[str],
    cols: Sequence[str],
    workers: int | None = None,
) -> CapacityMatrix:
    """Minimal-capacity values for every (row, col) pair.

    Columns share fixpoint probes (a probe at one capacity answers every
    source at once), and are independent of each other, so `workers` > 1
    computes columns in a thread pool. Results do not depend on the
    schedule.
    """
    row_t = tuple(rows)
    col_t = tuple(cols)
    for name in set(row_t) | set(col_t):
        _state(model, name)

    def column(col: str) -> dict[tuple[str, str], int | None]:
        return {(r, col): _min_cap_value(model, r, col) for r in row_t}

    values: dict[tuple[str, str], int | None] = {}
    if workers is not None and workers > 1 and len(col_t) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(column, col_t):
                values.update(part)
    else:
        for col in col_t:
            values.update(column(col))
    return CapacityMatrix(row_t, col_t, values)


# ---------------------------------------------------------------------------
# witness extraction


def _allowed(arr: _Arrays, cap: int, bound: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per (state, action): the least vertex level from which the action
    keeps all branches at/above `bound`, and the arrival level column.

    Returns (threshold[s,a], arrival[s,a]); arrival is meaningful only
    where threshold is finite (for reloads it is fixed; otherwise it is
    relative: arrival = vertex level - consumption).
    """
    need = bound[arr.SUCC].max(axis=2)
    return _action_values(arr, cap, need), need


def counter_strategy(model: ConsumptionMDP, capacity: int, target: str) -> CounterStrategy:
    """Deterministic (state, level) strategy winning from every vertex
    whose level meets the winning threshold at this capacity.

    Below the winning threshold but at/above the safety threshold the
    strategy still plays safe (such vertices arise after the target has
    been visited). Ties among usable actions break toward the lowest
    action index.
    """
    rho, pi = winning_thresholds(model, capacity, target)
    t = _state(model, target)
    if rho[t] > capacity:
        raise InternalError(f"target {target!r} has no safe vertex at capacity {capacity}")
    arr = _arrays(model)
    n = model.n_states
    levels = capacity + 1

    safe_need = rho[arr.SUCC].max(axis=2)  # [s, a]
    win_need = pi[arr.SUCC].max(axis=2)

    # attractor distances over the winning region, one BFS layer per sweep:
    # dist[s, l] = fewest forced steps to a target vertex
    dist = np.full((n, levels), INF_LEVEL, dtype=np.int64)
    lvl = np.arange(levels, dtype=np.int64)
    in_win = lvl[None, :] >= pi[:, None]
    dist[t, :] = np.where(lvl >= pi[t], 0, INF_LEVEL)

    # arrive[s, a, l]: level after playing a from (s, l); -1 when the play
    # depletes or the action costs more than the vertex level
    arrive = np.where(
        arr.RELOAD[:, None, None],
        np.broadcast_to((capacity - arr.CONS)[:, :, None], (n, model.n_actions, levels)),
        lvl[None, None, :] - arr.CONS[:, :, None],
    )
    arrive = np.where(arrive < 0, -1, arrive)
    usable_win = (arrive >= 0) & (arrive >= win_need[:, :, None])
    usable_safe = (arrive >= 0) & (arrive >= safe_need[:, :, None])
    arrive_ix = np.maximum(arrive, 0)

    guard = n * (levels + 1) + 4
    for _ in range(guard):
        # dist of each branch at the arrival level: [s, a, w, l]
        branch = dist[arr.SUCC[:, :, :, None], arrive_ix[:, :, None, :]]
        closest = branch.min(axis=2)
        closest = np.where(usable_win, closest, INF_LEVEL)
        best = closest.min(axis=1) + 1
        new = np.minimum(dist, np.where(in_win, best, INF_LEVEL))
        new[t, :] = dist[t, :]
        if np.array_equal(new, dist):
            break
        dist = new
    else:
        raise InternalError("attractor distance computation failed to converge")
    if bool((dist >= INF_LEVEL)[in_win].any()):
        raise InternalError("winning vertex unreachable in attractor")

    branch = dist[arr.SUCC[:, :, :, None], arrive_ix[:, :, None, :]]
    closest = np.where(usable_win, branch.min(axis=2), INF_LEVEL)

    choice: dict[tuple[str, int], str] = {}
    names = model.state_names
    actions = model.action_names
    for s in range(n):
        floor = int(rho[s])
        if floor > capacity:
            continue
        win_floor = int(pi[s])
        for level in range(floor, capacity + 1):
            if s != t and level >= win_floor:
                d = int(dist[s, level])
                # progress move: first action with a branch one layer closer
                for a in range(model.n_actions):
                    if usable_win[s, a, level] and int(closest[s, a, level]) == d - 1:
                        choice[(names[s], level)] = actions[a]
                        break
                else:
                    raise InternalError("no progress action at a winning vertex")
            else:
                for a in range(model.n_actions):
                    if usable_safe[s, a, level]:
                        choice[(names[s], level)] = actions[a]
                        break
                else:
                    raise InternalError("no safe action at a safe vertex")
    return CounterStrategy(capacity=capacity, choice=choice)


# ---------------------------------------------------------------------------
# two-leg objectives (visit `via`, afterwards `then`)


def _two_phase_model(model: ConsumptionMDP, via: int) -> ConsumptionMDP:
    """Model over (state, phase): phase flips to 1 on arrival at `via`
    and stays. States 0..n-1 carry phase 0, n..2n-1 phase 1."""
    n = model.n_states
    names = tuple(f"{s}\x00p0" for s in model.state_names) + tuple(
        f"{s}\x00p1" for s in model.state_names
    )
    support: list[tuple[tuple[int, ...], ...]] = []
    probs: list[tuple[tuple[float, ...], ...]] = []
    for phase in (0, 1):
        for s in range(n):
            row_s = []
            row_p = []
            for a in range(model.n_actions):
                succ = model.support[s][a]
                prob = model.probs[s][a]
                if phase == 1:
                    lifted = [(j + n, p) for j, p in zip(succ, prob)]
                else:
                    lifted = [((j + n) if j == via else j, p) for j, p in zip(succ, prob)]
                lifted.sort()
                row_s.append(tuple(j for j, _ in lifted))
                row_p.append(tuple(p for _, p in lifted))
            support.append(tuple(row_s))
            probs.append(tuple(row_p))
    return ConsumptionMDP(
        state_names=names,
        action_names=model.action_names,
        consumption=np.tile(model.consumption, (2, 1)),
        support=tuple(support),
        probs=tuple(probs),
        reload_mask=np.tile(model.reload_mask, 2),
    )


def _lifted(model: ConsumptionMDP, via: int) -> ConsumptionMDP:
    cache = _cache(model)
    key = ("lift", via)
    lifted = cache.get(key)
    if lifted is None:
        lifted = cache[key] = _two_phase_model(model, via)
    return lifted


def _phased_from_lifted(model: ConsumptionMDP, lifted_witness: CounterStrategy) -> PhasedCounterStrategy:
    index = {f"{s}\x00p{p}": (s, p) for s in model.state_names for p in (0, 1)}
    choice = {}
    for (lifted_name, level), action in lifted_witness.choice.items():
        state, phase = index[lifted_name]
        choice[(state, level, phase)] = action
    return PhasedCounterStrategy(capacity=lifted_witness.capacity, choice=choice)


def sequence_strategy(model: ConsumptionMDP, capacity: int, via: str, then: str) -> PhasedCounterStrategy:
    """Witness for the two-leg objective at a given capacity."""
    v = _state(model, via)
    _state(model, then)
    lifted = _lifted(model, v)
    target = f"{then}\x00p1"
    return _phased_from_lifted(model, counter_strategy(lifted, capacity, target))


def min_cap_sequence_value(model: ConsumptionMDP, source: str, via: str, then: str) -> int | None:
    """Like min_cap_sequence but value-only, skipping witness extraction."""
    _state(model, source)
    v = _state(model, via)
    _state(model, then)
    lifted = _lifted(model, v)
    lifted_source = f"{source}\x00p{1 if source == via else 0}"
    lifted_target = f"{then}\x00p1"
    return _min_cap_value(lifted, lifted_source, lifted_target)


def min_cap_sequence(model: ConsumptionMDP, source: str, via: str, then: str) -> CapacityResult:
    """Least capacity admitting a strategy that safely, almost surely
    visits `via` and afterwards `then`. Visits count from the first
    state: starting at `via` already completes the first leg."""
    value = min_cap_sequence_value(model, source, via, then)
    if value is None:
        return CapacityResult(value=None, witness=None)
    return CapacityResult(value=value, witness=sequence_strategy(model, value, via, then))


# ---------------------------------------------------------------------------
# explicit product arena (reference semantics, used for cross-checks)


@dataclass(frozen=True, eq=False)
class ProductArena:
    """Explicit (state, level) arena with a depletion sink.

    Moves mirror the one-step level rule exactly; the sink is represented
    as successor level None and has no moves of its own. The solver here
    is set-based and deliberately plain; it exists to validate the
    threshold engine on small models, not to be fast.
    """

    model: ConsumptionMDP
    capacity: int
    target: str

    def __post_init__(self):
        if self.capacity < 0:
            raise PreconditionError("capacity must be non-negative")
        _state(self.model, self.target)

    def vertices(self) -> Iterator[tuple[int, int]]:
        for s in range(self.model.n_states):
            for level in range(self.capacity + 1):
                yield (s, level)

    def moves(self, state: int, level: int, action: int) -> tuple[tuple[int, int | None], ...]:
        from .cmdp import level_after

        out = []
        for succ, _ in self.model.successors(state, action):
            out.append((succ, level_after(self.model, self.capacity, state, level, action)))
        return tuple(out)

    def target_vertices(self) -> frozenset[tuple[int, int]]:
        t = _state(self.model, self.target)
        return frozenset((t, level) for level in range(self.capacity + 1))

    def winning_set(self) -> frozenset[tuple[int, int]]:
        model = self.model
        n_actions = model.n_actions
        t = _state(model, self.target)

        def arrivals(s: int, level: int, a: int) -> tuple[int | None, tuple[int, ...]]:
            from .cmdp import level_after

            new = level_after(model, self.capacity, s, level, a)
            return new, model.support[s][a]

        # safety: drop vertices with no action keeping every branch alive
        alive = set(self.vertices())
        changed = True
        while changed:
            changed = False
            for v in list(alive):
                s, level = v
                ok = False
                for a in range(n_actions):
                    new, succ = arrivals(s, level, a)
                    if new is not None and all((q, new) in alive for q in succ):
                        ok = True
                        break
                if not ok:
                    alive.discard(v)
                    changed = True

        goals = {(t, level) for level in range(self.capacity + 1) if (t, level) in alive}
        region = set(alive)
        while True:
            # attractor of the goals inside the region: an action is usable
            # only if every branch stays in the region
            attracted = set(goals)
            grew = True
            while grew:
                grew = False
                for v in region:
                    if v in attracted:
                        continue
                    s, level = v
                    for a in range(n_actions):
                        new, succ = arrivals(s, level, a)
                        if new is None:
                            continue
                        branches = [(q, new) for q in succ]
                        if all(b in region for b in branches) and any(
                            b in attracted for b in branches
                        ):
                            attracted.add(v)
                            grew = True
                            break
            if attracted == region:
                return frozenset(region)
            region = attracted
