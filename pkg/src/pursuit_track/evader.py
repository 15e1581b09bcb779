"""The adversary: terrain-aware A* routing plus a detection-triggered
evasive state machine."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .terrain import DENSE_THRESHOLD, ConfigError, TerrainMap

FOLLOW = "FOLLOW"
EVADE = "EVADE"

_NEIGHBOURS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


@dataclass(frozen=True)
class Hideout:
    location: tuple[float, float]
    known_to_pursuers: bool


def edge_cost(terrain: TerrainMap, dst: tuple[int, int], diagonal: bool, w_v: float) -> float:
    step = (math.sqrt(2.0) if diagonal else 1.0) / terrain.size
    return step * (1.0 + w_v * terrain.visibility[dst[1], dst[0]])


def astar_plan(
    terrain: TerrainMap, start, goal, w_v: float = 2.0, return_cost: bool = False
):
    """Cost-optimal 8-connected route from the cell of ``start`` to the cell
    of ``goal``, returned as cell centres in normalized coordinates.

    Edge cost is step length times ``1 + w_v * visibility(destination)``;
    the euclidean heuristic is admissible because that factor is >= 1.
    """
    if w_v < 0:
        raise ConfigError("w_v must be non-negative")
    g = terrain.size
    vis = terrain.visibility
    src = terrain.cell_of(start)
    dst = terrain.cell_of(goal)
    straight = 1.0 / g
    diag = math.sqrt(2.0) / g

    def h(c):
        return math.hypot(c[0] - dst[0], c[1] - dst[1]) / g

    best = {src: 0.0}
    parent: dict[tuple[int, int], tuple[int, int] | None] = {src: None}
    closed: set[tuple[int, int]] = set()
    heap = [(h(src), 0.0, src)]
    while heap:
        _, cost, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        if cell == dst:
            break
        closed.add(cell)
        cx, cy = cell
        for dx, dy in _NEIGHBOURS:
            nx, ny = cx + dx, cy + dy
            if not (0 <= nx < g and 0 <= ny < g) or (nx, ny) in closed:
                continue
            step = diag if dx and dy else straight
            new = cost + step * (1.0 + w_v * vis[ny, nx])
            if new < best.get((nx, ny), math.inf):
                best[(nx, ny)] = new
                parent[(nx, ny)] = cell
                heapq.heappush(heap, (new + h((nx, ny)), new, (nx, ny)))
    if dst not in parent:
        raise AssertionError("goal unreachable on a fully connected grid")

    cells = []
    node: tuple[int, int] | None = dst
    while node is not None:
        cells.append(node)
        node = parent[node]
    cells.reverse()
    waypoints = [terrain.cell_center(ix, iy) for ix, iy in cells]
    if return_cost:
        return waypoints, best[dst]
    return waypoints


def choose_goal(hideouts: Sequence[Hideout], start, seed: int) -> Hideout:
    """Seeded uniform choice among all hideouts."""
    if not hideouts:
        raise ConfigError("at least one hideout is required")
    rng = np.random.default_rng(seed)
    return hideouts[int(rng.integers(len(hideouts)))]


@dataclass
class EvaderParams:
    max_speed: float = 15 / 2428
    base_detect_radius: float = 0.05
    w_v: float = 2.0
    n_trigger: int = 3
    t_evade: int = 30
    dark_threshold: float = DENSE_THRESHOLD


@dataclass
class EvaderState:
    goal: Hideout
    mode: str = FOLLOW
    waypoints: list[np.ndarray] = field(default_factory=list)
    contact_steps: int = 0
    evade_steps: int = 0
    evade_target: np.ndarray | None = None


class Evader:
    """Evader policy bound to one terrain. ``step`` mutates the state it is
    given and returns the velocity for this timestep."""

    def __init__(self, terrain: TerrainMap, params: EvaderParams):
        self.terrain = terrain
        self.params = params
        vis = terrain.visibility
        iy, ix = np.nonzero(vis < params.dark_threshold)
        self._dark = np.stack([(ix + 0.5) / terrain.size, (iy + 0.5) / terrain.size], axis=1)

    def initial_state(self, start, goal: Hideout) -> EvaderState:
        state = EvaderState(goal=goal)
        self.replan(state, start)
        return state

    def replan(self, state: EvaderState, pos) -> None:
        path = astar_plan(self.terrain, pos, state.goal.location, self.params.w_v)
        goal = np.asarray(state.goal.location, dtype=np.float64)
        if np.linalg.norm(path[-1] - goal) > 0:
            path.append(goal)
        state.waypoints = path
        state.mode = FOLLOW
        state.contact_steps = 0
        state.evade_steps = 0
        state.evade_target = None

    def nearest_dark(self, pos) -> np.ndarray | None:
        if len(self._dark) == 0:
            return None
        d = np.sum((self._dark - pos) ** 2, axis=1)
        return self._dark[int(np.argmin(d))].copy()

    def step(self, state: EvaderState, pos: np.ndarray, seen: Sequence[np.ndarray]) -> np.ndarray:
        """Advance the state machine. ``seen`` holds positions of pursuers
        currently inside the evader's own detection radius."""
        p = self.params
        pos = np.asarray(pos, dtype=np.float64)
        observed = len(seen) > 0

        if state.mode == EVADE and (not observed or state.evade_steps >= p.t_evade):
            self.replan(state, pos)
        if state.mode == FOLLOW:
            state.contact_steps = state.contact_steps + 1 if observed else 0
            if state.contact_steps >= p.n_trigger:
                state.mode = EVADE
                state.contact_steps = 0
                state.evade_steps = 0
                state.evade_target = self.nearest_dark(pos)
                if state.evade_target is None:
                    away = pos - min(seen, key=lambda s: float(np.linalg.norm(s - pos)))
                    n = np.linalg.norm(away)
                    away = away / n if n > 0 else np.array([1.0, 0.0])
                    state.evade_target = np.clip(pos + away, 0.0, 1.0)

        if state.mode == EVADE:
            state.evade_steps += 1
            return _move_toward(pos, state.evade_target, p.max_speed)
        return self._follow(state, pos)

    def _follow(self, state: EvaderState, pos: np.ndarray) -> np.ndarray:
        remaining = self.params.max_speed
        cur = pos.copy()
        while state.waypoints and remaining > 0:
            nxt = state.waypoints[0]
            d = float(np.linalg.norm(nxt - cur))
            if d <= remaining:
                cur = nxt.copy()
                remaining -= d
                state.waypoints.pop(0)
            else:
                cur = cur + (nxt - cur) * (remaining / d)
                remaining = 0.0
        return cur - pos


def _move_toward(pos: np.ndarray, target: np.ndarray, max_speed: float) -> np.ndarray:
    delta = target - pos
    d = float(np.linalg.norm(delta))
    if d <= max_speed:
        return delta
    return delta * (max_speed / d)


def path_length(start, waypoints: Sequence[np.ndarray]) -> float:
    pts = [np.asarray(start, dtype=np.float64)] + [np.asarray(w) for w in waypoints]
    return float(sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:])))
