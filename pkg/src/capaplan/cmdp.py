"""Consumption MDPs: model type, resource-level semantics, and simulation.

A consumption MDP is a finite MDP whose actions consume integer amounts of
a single resource. A subset of states is marked as reload states: whenever
the agent takes an action out of a reload state, the tank is refilled to
full capacity first, so the level after the step is ``capacity - cons``
regardless of the arrival level. Out of a non-reload state the level drops
by the action's consumption. If the consumption exceeds what is available
(the current level, or the capacity when departing a reload), the resource
is depleted; depletion is absorbing and marks the run as unsafe.

Levels along a path are therefore produced by a three-case rule, exposed
as :func:`level_after` for one step and :func:`resource_levels` for whole
paths. ``None`` encodes the depleted level.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ModelFormatError, PathError, StrategyDomainError

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ConsumptionMDP:
    """Immutable consumption MDP over dense state/action indices.

    ``support[s][a]`` lists successor state indices with positive
    probability, sorted ascending, and ``probs[s][a]`` holds the aligned
    probabilities. ``consumption`` is an ``[S, A]`` integer array and
    ``reload_mask`` a boolean array over states. Name tables map indices
    to display names; all algorithms work on indices.
    """

    state_names: tuple[str, ...]
    action_names: tuple[str, ...]
    consumption: np.ndarray
    support: tuple[tuple[tuple[int, ...], ...], ...]
    probs: tuple[tuple[tuple[float, ...], ...], ...]
    reload_mask: np.ndarray

    def __post_init__(self):
        self.consumption.setflags(write=False)
        self.reload_mask.setflags(write=False)

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_actions(self) -> int:
        return len(self.action_names)

    @property
    def reloads(self) -> frozenset[int]:
        return frozenset(int(i) for i in np.flatnonzero(self.reload_mask))

    def state_index(self, name: str) -> int:
        try:
            return self._state_idx[name]
        except AttributeError:
            object.__setattr__(self, "_state_idx", {n: i for i, n in enumerate(self.state_names)})
            return self._state_idx[name]

    def action_index(self, name: str) -> int:
        try:
            return self._action_idx[name]
        except AttributeError:
            object.__setattr__(self, "_action_idx", {n: i for i, n in enumerate(self.action_names)})
            return self._action_idx[name]

    def successors(self, state: int, action: int) -> tuple[tuple[int, float], ...]:
        return tuple(zip(self.support[state][action], self.probs[state][action]))

    def transition_prob(self, state: int, action: int, succ: int) -> float:
        row = self.support[state][action]
        pos = bisect_right(row, succ) - 1
        if pos >= 0 and row[pos] == succ:
            return self.probs[state][action][pos]
        return 0.0

    @staticmethod
    def build(
        states: Sequence[str],
        actions: Sequence[str],
        reloads: Iterable[str],
        transitions: Iterable[tuple[str, str, int, Mapping[str, float]]],
    ) -> "ConsumptionMDP":
        """Assemble a model from name-based parts.

        ``transitions`` yields ``(state, action, cons, dist)`` rows where
        ``dist`` maps successor names to probabilities. Rows not mentioned
        stay empty (their missing probability mass is reported by
        :func:`validate_cmdp`). Duplicate rows are rejected.
        """
        state_idx = {n: i for i, n in enumerate(states)}
        action_idx = {n: i for i, n in enumerate(actions)}
        if len(state_idx) != len(states):
            raise ModelFormatError("duplicate state names")
        if len(action_idx) != len(actions):
            raise ModelFormatError("duplicate action names")
        cons = np.zeros((len(states), len(actions)), dtype=np.int64)
        rows: dict[tuple[int, int], dict[int, float]] = {}
        for st, act, c, dist in transitions:
            if st not in state_idx:
                raise ModelFormatError(f"unknown state {st!r} in transition")
            if act not in action_idx:
                raise ModelFormatError(f"unknown action {act!r} in transition")
            key = (state_idx[st], action_idx[act])
            if key in rows:
                raise ModelFormatError(f"duplicate transition row for ({st!r}, {act!r})")
            merged: dict[int, float] = {}
            for to, p in dist.items():
                if to not in state_idx:
                    raise ModelFormatError(f"unknown successor {to!r} in transition")
                j = state_idx[to]
                merged[j] = merged.get(j, 0.0) + float(p)
            rows[key] = merged
            cons[key] = int(c)
        mask = np.zeros(len(states), dtype=bool)
        for r in reloads:
            if r not in state_idx:
                raise ModelFormatError(f"unknown reload state {r!r}")
            mask[state_idx[r]] = True
        support = []
        probs = []
        for s in range(len(states)):
            srow = []
            prow = []
            for a in range(len(actions)):
                dist = rows.get((s, a), {})
                succs = tuple(sorted(dist))
                srow.append(succs)
                prow.append(tuple(dist[j] for j in succs))
            support.append(tuple(srow))
            probs.append(tuple(prow))
        return ConsumptionMDP(
            state_names=tuple(states),
            action_names=tuple(actions),
            consumption=cons,
            support=tuple(support),
            probs=tuple(probs),
            reload_mask=mask,
        )


@dataclass(frozen=True)
class Path:
    """Alternating state/action sequence ``s1 a1 s2 ... s_n``."""

    states: tuple[int, ...]
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or not self.states:
            raise PathError("path needs n states and n-1 actions, n >= 1")

    @staticmethod
    def from_names(model: ConsumptionMDP, tokens: str | Sequence[str]) -> "Path":
        parts = tokens.split() if isinstance(tokens, str) else list(tokens)
        states = [model.state_index(t) for t in parts[0::2]]
        actions = [model.action_index(t) for t in parts[1::2]]
        return Path(tuple(states), tuple(actions))

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class ResourceTrace:
    """Levels along a path; ``None`` marks the depleted level onward."""

    capacity: int
    levels: tuple[int | None, ...]

    @property
    def depleted(self) -> bool:
        return self.levels[-1] is None


@dataclass(frozen=True)
class CounterStrategy:
    """Memoryless-in-(state, level) strategy with a fixed capacity.

    ``choice`` maps ``(state name, level)`` to an action name. Lookups
    outside the stored domain raise :class:`StrategyDomainError`.
    """

    capacity: int
    choice: Mapping[tuple[str, int], str]

    def action_at(self, state: str, level: int) -> str:
        try:
            return self.choice[(state, level)]
        except KeyError:
            raise StrategyDomainError(state, level) from None

    def compile(self, model: ConsumptionMDP) -> dict[tuple[int, int], int]:
        """Index-keyed view for tight simulation loops."""
        return {
            (model.state_index(s), lv): model.action_index(a)
            for (s, lv), a in self.choice.items()
        }


@dataclass(frozen=True)
class SimulationStats:
    runs: int
    depletion_count: int
    covered_count: int
    mean_steps_to_cover: float | None
    min_level_observed: int


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def level_after(
    model: ConsumptionMDP, capacity: int, state: int, level: int | None, action: int
) -> int | None:
    """One-step resource update; the single source of truth for the rule.

    Reload refill applies on departure: out of a reload state the level
    becomes ``capacity - cons`` whenever ``cons <= capacity``, independent
    of the arrival level. Depletion (``None``) is absorbing.
    """
    if level is None:
        return None
    c = int(model.consumption[state, action])
    if model.reload_mask[state]:
        return capacity - c if c <= capacity else None
    return level - c if c <= level else None


def resource_levels(model: ConsumptionMDP, capacity: int, path: Path) -> ResourceTrace:
    """Levels along ``path`` starting from a full tank of ``capacity``."""
    if capacity < 0:
        raise PathError("capacity must be non-negative")
    levels: list[int | None] = [capacity]
    cur: int | None = capacity
    for i, a in enumerate(path.actions):
        s, nxt = path.states[i], path.states[i + 1]
        if model.transition_prob(s, a, nxt) <= 0.0:
            raise PathError(
                f"step {i}: no transition {model.state_names[s]!r} "
                f"--{model.action_names[a]!r}--> {model.state_names[nxt]!r}"
            )
        cur = level_after(model, capacity, s, cur, a)
        levels.append(cur)
    return ResourceTrace(capacity=capacity, levels=tuple(levels))


def is_safe(model: ConsumptionMDP, capacity: int, path: Path) -> bool:
    """True iff no level along the path is depleted."""
    return not any(lv is None for lv in resource_levels(model, capacity, path).levels)


def validate_cmdp(model: ConsumptionMDP) -> ValidationReport:
    """Collect structural violations; an empty report means well-formed.

    Checks probability row sums against a 1e-9 tolerance, consumption
    signs, and index ranges. Does not raise; callers decide what a
    violation costs them.
    """
    out: list[str] = []
    S, A = model.n_states, model.n_actions
    if S < 1:
        out.append("model has no states")
    if A < 1:
        out.append("model has no actions")
    if model.consumption.shape != (S, A):
        out.append(f"consumption shape {model.consumption.shape} != ({S}, {A})")
        return ValidationReport(tuple(out))
    if not np.issubdtype(model.consumption.dtype, np.integer):
        out.append("consumption entries must be integers")
    for s in range(S):
        for a in range(A):
            c = int(model.consumption[s, a])
            if c < 0:
                out.append(f"negative consumption at ({model.state_names[s]!r}, {model.action_names[a]!r})")
            succs = model.support[s][a]
            probs = model.probs[s][a]
            for j, p in zip(succs, probs):
                if not (0 <= j < S):
                    out.append(f"dangling successor index {j} at ({model.state_names[s]!r}, {model.action_names[a]!r})")
                if not (0.0 < p <= 1.0 + ROW_SUM_TOL):
                    out.append(f"probability {p} out of range at ({model.state_names[s]!r}, {model.action_names[a]!r})")
            total = sum(probs)
            if abs(total - 1.0) > ROW_SUM_TOL:
                out.append(
                    f"transition row ({model.state_names[s]!r}, {model.action_names[a]!r}) "
                    f"sums to {total:.12g}, expected 1"
                )
    if model.reload_mask.shape != (S,):
        out.append("reload mask length does not match state count")
    return ValidationReport(tuple(out))


def simulate(
    model: ConsumptionMDP,
    strategy: CounterStrategy,
    start: int,
    capacity: int,
    required_targets: frozenset[int] | set[int],
    horizon: int,
    seed: int,
    runs: int = 1000,
) -> SimulationStats:
    """Sample ``runs`` trajectories under ``strategy`` and aggregate stats.

    Each run starts at ``start`` with a full tank and walks up to
    ``horizon`` steps or until depletion. The start state counts as
    visited. Steps-to-cover is the number of actions taken until every
    required target has been seen; runs that never cover within the
    horizon do not contribute to the mean. Identical seeds give identical
    stats.
    """
    rng = np.random.default_rng(seed)
    required = frozenset(required_targets)
    compiled = strategy.compile(model)
    cumulative: dict[tuple[int, int], tuple[tuple[int, ...], tuple[float, ...]]] = {}
    depletions = 0
    covered = 0
    cover_steps_total = 0
    min_level = capacity
    for _ in range(runs):
        state, level = start, capacity
        missing = set(required)
        missing.discard(state)
        cover_step = 0 if not missing else None
        for step in range(1, horizon + 1):
            action = compiled.get((state, level))
            if action is None:
                raise StrategyDomainError(model.state_names[state], level)
            nxt_level = level_after(model, capacity, state, level, action)
            if nxt_level is None:
                depletions += 1
                break
            key = (state, action)
            if key not in cumulative:
                succs = model.support[state][action]
                probs = model.probs[state][action]
                cum = []
                acc = 0.0
                for p in probs:
                    acc += p
                    cum.append(acc)
                cumulative[key] = (succs, tuple(cum))
            succs, cum = cumulative[key]
            if len(succs) == 1:
                state = succs[0]
            else:
                u = rng.random()
                state = succs[min(bisect_right(cum, u), len(succs) - 1)]
            level = nxt_level
            if level < min_level:
                min_level = level
            if cover_step is None:
                missing.discard(state)
                if not missing:
                    cover_step = step
        if cover_step is not None:
            covered += 1
            cover_steps_total += cover_step
    mean = (cover_steps_total / covered) if covered else None
    return SimulationStats(
        runs=runs,
        depletion_count=depletions,
        covered_count=covered,
        mean_steps_to_cover=mean,
        min_level_observed=min_level,
    )


_MODEL_KEYS = {"states", "actions", "reloads", "transitions"}
_ROW_KEYS = {"from", "action", "cons", "dist"}
_DIST_KEYS = {"to", "p"}


def model_from_json(text: str) -> ConsumptionMDP:
    """Parse the model interchange format; unknown fields are rejected."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    extra = set(doc) - _MODEL_KEYS
    if extra:
        raise ModelFormatError(f"unknown model fields: {sorted(extra)}")
    missing = _MODEL_KEYS - set(doc)
    if missing:
        raise ModelFormatError(f"missing model fields: {sorted(missing)}")
    rows = []
    for row in doc["transitions"]:
        if not isinstance(row, dict):
            raise ModelFormatError("transition rows must be objects")
        extra = set(row) - _ROW_KEYS
        if extra:
            raise ModelFormatError(f"unknown transition fields: {sorted(extra)}")
        if set(row) != _ROW_KEYS:
            raise ModelFormatError(f"missing transition fields: {sorted(_ROW_KEYS - set(row))}")
        dist = {}
        for entry in row["dist"]:
            if not isinstance(entry, dict) or set(entry) != _DIST_KEYS:
                raise ModelFormatError("dist entries must be objects with fields 'to' and 'p'")
            dist[entry["to"]] = dist.get(entry["to"], 0.0) + float(entry["p"])
        if not isinstance(row["cons"], int) or isinstance(row["cons"], bool):
            raise ModelFormatError(f"consumption must be an integer, got {row['cons']!r}")
        rows.append((row["from"], row["action"], row["cons"], dist))
    return ConsumptionMDP.build(doc["states"], doc["actions"], doc["reloads"], rows)


def model_to_json(model: ConsumptionMDP) -> str:
    """Serialize a model deterministically (stable field and row order)."""
    transitions = []
    for s in range(model.n_states):
        for a in range(model.n_actions):
            succs = model.support[s][a]
            if not succs:
                continue
            transitions.append(
                {
                    "from": model.state_names[s],
                    "action": model.action_names[a],
                    "cons": int(model.consumption[s, a]),
                    "dist": [
                        {"to": model.state_names[j], "p": p}
                        for j, p in zip(succs, model.probs[s][a])
                    ],
                }
            )
    doc = {
        "states": list(model.state_names),
        "actions": list(model.action_names),
        "reloads": [model.state_names[i] for i in sorted(model.reloads)],
        "transitions": transitions,
    }
    return json.dumps(doc, indent=2) + "\n"


def load_model(path: str) -> ConsumptionMDP:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(fh.read())


def save_model(model: ConsumptionMDP, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))


def strategy_to_json(model: ConsumptionMDP, strategy: CounterStrategy) -> str:
    """Serialize a counter strategy; keys are ``"state:level"`` strings."""
    choices = {}
    for (s, lv), a in sorted(strategy.choice.items()):
        model.state_index(s)
        model.action_index(a)
        choices[f"{s}:{lv}"] = a
    return json.dumps({"capacity": strategy.capacity, "choices": choices}, indent=2) + "\n"


def strategy_from_json(model: ConsumptionMDP, text: str) -> CounterStrategy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"invalid JSON: {e}") from None
    if set(doc) != {"capacity", "choices"}:
        raise ModelFormatError("strategy document needs exactly 'capacity' and 'choices'")
    choice = {}
    for key, action in doc["choices"].items():
        state_name, _, level = key.rpartition(":")
        try:
            model.state_index(state_name)
            model.action_index(action)
        except KeyError as e:
            raise ModelFormatError(f"strategy references unknown name {e.args[0]!r}") from None
        choice[(state_name, int(level))] = action
    return CounterStrategy(capacity=int(doc["capacity"]), choice=choice)
