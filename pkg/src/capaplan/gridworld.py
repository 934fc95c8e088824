"""Grid-world generator: a K x K patrol map as a consumption MDP.

Cells are addressed by coordinates 1..K in both axes. Every cell offers
16 actions: 8 compass directions, each in a weak and a strong flavor.
Strong moves always land where they aim and cost twice the weak base,
give or take one unit where the water current helps or fights the move.
Weak moves are cheap but drift: the intended neighbor comes up with a
configured probability and the two 45-degree neighbors split the rest.
Aiming off the map clamps the outcome to the border cell.

The current field is synthesized from the seed: random headings on a
coarse lattice, interpolated smoothly across the map and snapped to the
eight compass directions. The same seed always yields the same field,
the same model bytes, and the same heuristic costs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .cmdp import ConsumptionMDP
from .costgraph import CostGraph, Edge
from .errors import ModelFormatError, PreconditionError

Cell = tuple[int, int]

# compass order is load-bearing: index arithmetic below rotates by 45
# degrees per step and flips by 4 steps
DIRECTIONS = ("n", "ne", "e", "se", "s", "sw", "w", "nw")
_VECTORS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))

DEFAULT_WEAK_SUCCESS = 0.6


@dataclass(frozen=True)
class GridSpec:
    """Parameters of one grid-world instance.

    ``target_cells`` must be a subset of ``reload_cells``: a patrol target
    only makes sense where the agent can also refuel. ``current_seed``
    None turns the current off entirely.
    """

    K: int
    reload_cells: tuple[Cell, ...]
    target_cells: tuple[Cell, ...] = ()
    initial_cells: tuple[Cell, ...] = ()
    weak_success_prob: float = DEFAULT_WEAK_SUCCESS
    current_seed: int | None = None
    base_weak_cons: int = 1
    base_strong_cons: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise PreconditionError("grid size must be at least 1")
        for group, cells in (
            ("reload", self.reload_cells),
            ("target", self.target_cells),
            ("initial", self.initial_cells),
        ):
            for (x, y) in cells:
                if not (1 <= x <= self.K and 1 <= y <= self.K):
                    raise PreconditionError(f"{group} cell {(x, y)} outside the {self.K}x{self.K} grid")
            if len(set(cells)) != len(cells):
                raise PreconditionError(f"duplicate {group} cells")
        if not set(self.target_cells) <= set(self.reload_cells):
            missing = sorted(set(self.target_cells) - set(self.reload_cells))
            raise PreconditionError(f"targets must be reload cells; offenders: {missing}")
        if not (0.0 < self.weak_success_prob <= 1.0):
            raise PreconditionError("weak_success_prob must be in (0, 1]")
        if self.base_weak_cons < 1:
            raise PreconditionError("base_weak_cons must be at least 1")
        if self.base_strong_cons is not None and self.base_strong_cons < 1:
            raise PreconditionError("base_strong_cons must be at least 1")

    @property
    def strong_cons(self) -> int:
        return 2 * self.base_weak_cons if self.base_strong_cons is None else self.base_strong_cons


def cell_name(x: int, y: int) -> str:
    return f"c{x}_{y}"


def cell_coords(name: str) -> Cell:
    try:
        x, _, y = name[1:].partition("_")
        if not name.startswith("c"):
            raise ValueError
        return int(x), int(y)
    except ValueError:
        raise PreconditionError(f"not a cell name: {name!r}") from None


def _clamp(v: int, k: int) -> int:
    return 1 if v < 1 else k if v > k else v


def _step(x: int, y: int, d: int, k: int) -> Cell:
    dx, dy = _VECTORS[d]
    return _clamp(x + dx, k), _clamp(y + dy, k)


def current_field(spec: GridSpec) -> np.ndarray:
    """Per-cell current headings as direction indices; -1 means still.

    Entry [x-1, y-1] belongs to cell (x, y). The field comes from random
    headings on a coarse lattice, vector-interpolated bilinearly, so
    nearby cells mostly agree. Without a seed the whole field is still.
    """
    field = np.full((spec.K, spec.K), -1, dtype=np.int8)
    if spec.current_seed is None:
        return field
    rng = np.random.default_rng(spec.current_seed)
    step = max(2, spec.K // 4)
    knots = spec.K // step + 2
    theta = rng.uniform(0.0, 2.0 * math.pi, size=(knots, knots))
    kx = np.cos(theta)
    ky = np.sin(theta)

    pos = (np.arange(spec.K) / step).astype(np.float64)
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0

    fx = np.empty((spec.K, spec.K))
    fy = np.empty((spec.K, spec.K))
    for ax, (comp, out) in enumerate(((kx, fx), (ky, fy))):
        c00 = comp[np.ix_(i0, i0)]
        c10 = comp[np.ix_(i0 + 1, i0)]
        c01 = comp[np.ix_(i0, i0 + 1)]
        c11 = comp[np.ix_(i0 + 1, i0 + 1)]
        wx = frac[:, None]
        wy = frac[None, :]
        out[:] = (
            c00 * (1 - wx) * (1 - wy)
            + c10 * wx * (1 - wy)
            + c01 * (1 - wx) * wy
            + c11 * wx * wy
        )

    # snap the interpolated heading to the nearest compass direction;
    # atan2 measures from east counterclockwise, compass from north clockwise
    angle = np.arctan2(fy, fx)
    compass = (90.0 - np.degrees(angle)) % 360.0
    field = ((compass + 22.5) // 45.0).astype(np.int8) % 8
    return field


def current_to_csv(spec: GridSpec) -> str:
    """Current field as x,y,direction,dx,dy rows (for quiver plots)."""
    field = current_field(spec)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "direction", "dx", "dy"])
    for x in range(1, spec.K + 1):
        for y in range(1, spec.K + 1):
            d = int(field[x - 1, y - 1])
            if d < 0:
                writer.writerow([x, y, "", 0, 0])
            else:
                dx, dy = _VECTORS[d]
                writer.writerow([x, y, DIRECTIONS[d], dx, dy])
    return buf.getvalue()


def gen_grid(spec: GridSpec) -> ConsumptionMDP:
    """Materialize the grid as a consumption MDP.

    State order is x-major ((1,1), (1,2), ..., (K,K)); action order is
    the weak compass ring then the strong one. The same spec always
    produces byte-identical JSON.
    """
    k = spec.K
    field = current_field(spec)
    states = [cell_name(x, y) for x in range(1, k + 1) for y in range(1, k + 1)]
    actions = [f"weak-{d}" for d in DIRECTIONS] + [f"strong-{d}" for d in DIRECTIONS]
    reloads = [cell_name(x, y) for (x, y) in spec.reload_cells]

    p = spec.weak_success_prob
    side = (1.0 - p) / 2.0
    transitions = []
    for x in range(1, k + 1):
        for y in range(1, k + 1):
            src = cell_name(x, y)
            cur = int(field[x - 1, y - 1])
            for d in range(8):
                dist: dict[str, float] = {}
                for dd, share in ((d, p), ((d - 1) % 8, side), ((d + 1) % 8, side)):
                    if share <= 0.0:
                        continue
                    nx, ny = _step(x, y, dd, k)
                    name = cell_name(nx, ny)
                    dist[name] = dist.get(name, 0.0) + share
                transitions.append((src, f"weak-{DIRECTIONS[d]}", spec.base_weak_cons, dist))
            for d in range(8):
                cons = spec.strong_cons
                if cur == d:
                    cons -= 1
                elif cur == (d + 4) % 8:
                    cons += 1
                if cons < 1:
                    cons = 1
                nx, ny = _step(x, y, d, k)
                transitions.append(
                    (src, f"strong-{DIRECTIONS[d]}", cons, {cell_name(nx, ny): 1.0})
                )
    return ConsumptionMDP.build(states, actions, reloads, transitions)


def _as_cell(spec: GridSpec, c) -> Cell:
    if isinstance(c, str):
        c = cell_coords(c)
    x, y = int(c[0]), int(c[1])
    if not (1 <= x <= spec.K and 1 <= y <= spec.K):
        raise PreconditionError(f"cell {(x, y)} outside the {spec.K}x{spec.K} grid")
    return x, y


def _toward(sx: int, sy: int, tx: int, ty: int) -> int:
    """Compass index of the dominant direction from s to t."""
    dx = (tx > sx) - (tx < sx)
    dy = (ty > sy) - (ty < sy)
    return _VECTORS.index((dx, dy))


def heuristic_cost(spec: GridSpec, s, t) -> int:
    """Distance-based stand-in for the exact leg capacity.

    Strong moves cover one Chebyshev step each, so the base estimate is
    base_strong_cons per step. Legs that fight the current at either
    endpoint pay one extra unit per opposed endpoint. Not an upper or
    lower bound of the true cost; just a cheap, deterministic proxy.
    """
    sx, sy = _as_cell(spec, s)
    tx, ty = _as_cell(spec, t)
    if (sx, sy) == (tx, ty):
        return 0
    dist = max(abs(tx - sx), abs(ty - sy))
    cost = spec.strong_cons * dist
    if spec.current_seed is not None:
        field = _field_cached(spec)
        heading = _toward(sx, sy, tx, ty)
        opposite = (heading + 4) % 8
        if int(field[sx - 1, sy - 1]) == opposite:
            cost += 1
        if int(field[tx - 1, ty - 1]) == opposite:
            cost += 1
    return cost


def _field_cached(spec: GridSpec) -> np.ndarray:
    cached = getattr(spec, "_field", None)
    if cached is None:
        cached = current_field(spec)
        object.__setattr__(spec, "_field", cached)
    return cached


def heuristic_target_graph(spec: GridSpec) -> CostGraph:
    """Complete cost graph over the spec's targets, heuristic costs."""
    if not spec.target_cells:
        raise PreconditionError("spec lists no target cells")
    vertices = tuple(cell_name(x, y) for (x, y) in spec.target_cells)
    costs: dict[Edge, float] = {}
    for (ux, uy) in spec.target_cells:
        for (vx, vy) in spec.target_cells:
            costs[(cell_name(ux, uy), cell_name(vx, vy))] = heuristic_cost(
                spec, (ux, uy), (vx, vy)
            )
    return CostGraph(vertices, costs)


def heuristic_routing_graph(spec: GridSpec) -> CostGraph:
    """Targets plus agent starts, heuristic costs, no start-to-start edges."""
    if not spec.target_cells:
        raise PreconditionError("spec lists no target cells")
    if not spec.initial_cells:
        raise PreconditionError("spec lists no initial cells")
    overlap = set(spec.target_cells) & set(spec.initial_cells)
    if overlap:
        raise PreconditionError(f"initial cells also listed as targets: {sorted(overlap)}")
    targets = tuple(cell_name(x, y) for (x, y) in spec.target_cells)
    starts = tuple(cell_name(x, y) for (x, y) in spec.initial_cells)
    vertices = targets + starts
    target_set = set(targets)
    costs: dict[Edge, float] = {}
    for u in vertices:
        for v in vertices:
            if u in target_set or v in target_set:
                costs[(u, v)] = heuristic_cost(spec, u, v)
    return CostGraph(vertices, costs)


# ---------------------------------------------------------------------------
# spec (de)serialization


_SPEC_KEYS = {
    "K",
    "reload_cells",
    "target_cells",
    "initial_cells",
    "weak_success_prob",
    "current_seed",
    "base_weak_cons",
    "base_strong_cons",
}
_REQUIRED_KEYS = {"K", "reload_cells"}


def _cells_from_json(doc, key: str) -> tuple[Cell, ...]:
    raw = doc.get(key, [])
    if not isinstance(raw, list):
        raise ModelFormatError(f"{key} must be a list of [x, y] pairs")
    out = []
    for item in raw:
        if (
            not isinstance(item, list)
            or len(item) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in item)
        ):
            raise ModelFormatError(f"{key} entries must be [x, y] integer pairs")
        out.append((item[0], item[1]))
    return tuple(out)


def gridspec_from_json(text: str) -> GridSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("grid spec must be a JSON object")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ModelFormatError(f"unknown grid spec fields: {sorted(unknown)}")
    missing = _REQUIRED_KEYS - set(doc)
    if missing:
        raise ModelFormatError(f"grid spec missing fields: {sorted(missing)}")
    if not isinstance(doc["K"], int) or isinstance(doc["K"], bool):
        raise ModelFormatError("K must be an integer")
    seed = doc.get("current_seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool)):
        raise ModelFormatError("current_seed must be an integer or null")
    prob = doc.get("weak_success_prob", DEFAULT_WEAK_SUCCESS)
    if not isinstance(prob, (int, float)) or isinstance(prob, bool):
        raise ModelFormatError("weak_success_prob must be a number")
    weak = doc.get("base_weak_cons", 1)
    strong = doc.get("base_strong_cons")
    for label, v in (("base_weak_cons", weak), ("base_strong_cons", strong)):
        if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
            raise ModelFormatError(f"{label} must be an integer")
    try:
        return GridSpec(
            K=doc["K"],
            reload_cells=_cells_from_json(doc, "reload_cells"),
            target_cells=_cells_from_json(doc, "target_cells"),
            initial_cells=_cells_from_json(doc, "initial_cells"),
            weak_success_prob=float(prob),
            current_seed=seed,
            base_weak_cons=weak,
            base_strong_cons=strong,
        )
    except PreconditionError as e:
        raise ModelFormatError(str(e)) from None


def gridspec_to_json(spec: GridSpec) -> str:
    doc = {
        "K": spec.K,
        "reload_cells": [list(c) for c in spec.reload_cells],
        "target_cells": [list(c) for c in spec.target_cells],
        "initial_cells": [list(c) for c in spec.initial_cells],
        "weak_success_prob": spec.weak_success_prob,
        "current_seed": spec.current_seed,
        "base_weak_cons": spec.base_weak_cons,
        "base_strong_cons": spec.base_strong_cons,
    }
    return json.dumps(doc, indent=2) + "\n"


def load_gridspec(path: str) -> GridSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return gridspec_from_json(fh.read())


def save_gridspec(spec: GridSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(gridspec_to_json(spec))
