"""Non-learning pursuit policies.

Every controller exposes ``reset(world, seed)`` and ``act(world)`` and
returns one velocity per learnable agent, so scripted and learned teams
share the same rollout and evaluation code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .world import AgentSpec, TerrainWorld, clip_norm

CHASE = "CHASE"
INTERCEPT = "INTERCEPT"
SPIRAL = "SPIRAL"
RANDOM_SPIRAL = "RANDOM_SPIRAL"
MODES = (CHASE, INTERCEPT, SPIRAL, RANDOM_SPIRAL)


def toward(pos, target, max_speed: float) -> np.ndarray:
    """Pointwise move: straight at ``target``, stopping on it if in reach."""
    return clip_norm(np.asarray(target, dtype=np.float64) - np.asarray(pos, dtype=np.float64), max_speed)


def random_policy(rng: np.random.Generator, agent: AgentSpec) -> np.ndarray:
    angle = rng.uniform(0.0, 2.0 * math.pi)
    return agent.max_speed * np.array([math.cos(angle), math.sin(angle)])


def intercept_point(x_s, v_max: float, x_p, u_p) -> np.ndarray | None:
    """Point where a pursuer at ``x_s`` with speed ``v_max`` first meets a
    target at ``x_p`` moving with constant velocity ``u_p``.

    Solves ||d + T u|| = T v for the smallest T > 0, with d = x_p - x_s.
    Returns None when no positive root exists.
    """
    if v_max <= 0:
        raise ValueError("v_max must be positive")
    x_s, x_p, u_p = (np.asarray(a, dtype=np.float64) for a in (x_s, x_p, u_p))
    d = x_p - x_s
    a = float(u_p @ u_p) - v_max * v_max
    b = 2.0 * float(d @ u_p)
    c = float(d @ d)
    if c == 0.0:
        return x_p.copy()
    if abs(a) < 1e-15:
        roots = [-c / b] if b != 0 else []
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            return None
        sq = math.sqrt(disc)
        # Numerically stable pair of roots.
        q = -0.5 * (b + math.copysign(sq, b)) if b != 0 else 0.5 * sq
        roots = [q / a]
        if q != 0:
            roots.append(c / q)
        else:
            roots.append(-roots[0])
    positive = [r for r in roots if r > 0]
    if not positive:
        return None
    return x_p + min(positive) * u_p


@dataclass(frozen=True)
class SpiralParams:
    a: float = 0.01
    b: float = 0.02 / (2 * math.pi)


def spiral_thetas(n: int, a: float, b: float, v_max: float) -> np.ndarray:
    """First ``n`` angles of an Archimedean spiral r = a + b*theta sampled
    so the arc between consecutive samples is at most ``v_max``.

    With dtheta <= pi/2, the arc over [th, th + dth] is bounded by
    (r(th) + 3b) * dth, so dth = min(pi/2, v_max / (r + 3b)) keeps every
    chord (and arc) within ``v_max``.
    """
    out = np.empty(n)
    th = 0.0
    for i in range(n):
        out[i] = th
        th += min(math.pi / 2, v_max / (a + b * th + 3 * b))
    return out


def spiral_waypoint(center, step_index: int, a: float, b: float, v_max: float) -> np.ndarray:
    th = spiral_thetas(step_index + 1, a, b, v_max)[-1]
    r = a + b * th
    return np.asarray(center, dtype=np.float64) + r * np.array([math.cos(th), math.sin(th)])


# -- heuristic state machine ------------------------------------------------


@dataclass
class AgentHeuristicState:
    mode: str = RANDOM_SPIRAL
    center: np.ndarray | None = None
    step_index: int = 0
    timer: int = 0


@dataclass
class HeuristicState:
    agents: list[AgentHeuristicState]
    rng: np.random.Generator
    last_detection: object | None = None
    t_spiral: int = 50
    spiral: SpiralParams = field(default_factory=SpiralParams)
    center_box: tuple[float, float] = (0.1, 0.9)

    def set_mode(self, k: int, mode: str, center=None) -> None:
        s = self.agents[k]
        if s.mode != mode or (center is not None and (s.center is None or not np.array_equal(s.center, center))):
            s.step_index = 0
            s.timer = 0
        s.mode = mode
        if center is not None:
            s.center = np.asarray(center, dtype=np.float64)


@dataclass
class WorldView:
    """What the team knows at decision time."""

    t: int
    positions: np.ndarray  # learnable agents only
    max_speeds: np.ndarray
    latest_detection: object | None  # newest shared detection, if any
    detected_now: bool


def view_of(world: TerrainWorld) -> WorldView:
    s = world.state
    latest = s.detections[-1] if s.detections else None
    return WorldView(
        t=s.t,
        positions=s.agent_pos[world.learnable].copy(),
        max_speeds=np.array([world.config.agents[i].max_speed for i in world.learnable]),
        latest_detection=latest,
        detected_now=latest is not None and latest.timestep == s.t,
    )


def _spiral_step(pos, s: AgentHeuristicState, spiral: SpiralParams, v_max: float) -> np.ndarray:
    wp = spiral_waypoint(s.center, s.step_index, spiral.a, spiral.b, v_max)
    if np.linalg.norm(wp - pos) <= v_max:
        s.step_index += 1
    return toward(pos, wp, v_max)


def heuristic_policy(view: WorldView, state: HeuristicState) -> np.ndarray:
    """Chase when in reach, intercept when detected but far, spiral around
    the last detection for ``t_spiral`` steps after losing it, otherwise
    spiral around random centres that are redrawn every ``t_spiral`` steps."""
    out = np.zeros((len(view.positions), 2))
    det = view.latest_detection
    if det is not None:
        state.last_detection = det
    lo, hi = state.center_box
    for k, (pos, v_max) in enumerate(zip(view.positions, view.max_speeds)):
        s = state.agents[k]
        if view.detected_now:
            x_p = np.asarray(det.position)
            if np.linalg.norm(x_p - pos) < v_max:
                state.set_mode(k, CHASE)
                out[k] = toward(pos, x_p, v_max)
            else:
                state.set_mode(k, INTERCEPT)
                target = intercept_point(pos, v_max, x_p, det.velocity)
                out[k] = toward(pos, x_p if target is None else target, v_max)
        elif state.last_detection is not None and view.t - state.last_detection.timestep < state.t_spiral:
            state.set_mode(k, SPIRAL, center=state.last_detection.position)
            out[k] = _spiral_step(pos, s, state.spiral, v_max)
            s.timer += 1
        else:
            if s.mode != RANDOM_SPIRAL or s.center is None or s.timer >= state.t_spiral:
                s.mode = RANDOM_SPIRAL
                s.center = state.rng.uniform(lo, hi, size=2)
                s.step_index = 0
                s.timer = 0
            out[k] = _spiral_step(pos, s, state.spiral, v_max)
            s.timer += 1
    return out


# -- filter-driven hand policies --------------------------------------------


def pmc_highest_prob_policy(pred, positions, max_speeds) -> np.ndarray:
    """Send every agent to the mean of the heaviest component (lowest index
    wins ties)."""
    j = int(np.argmax(pred.weights[0]))
    target = pred.means[0, j]
    return np.array([toward(p, target, v) for p, v in zip(positions, max_speeds)])


def search_assignment(weights: np.ndarray, n_agents: int) -> list[int]:
    order = np.argsort(-np.asarray(weights), kind="stable")
    top = order[: min(n_agents, len(order))]
    return [int(top[k % len(top)]) for k in range(n_agents)]


def pmc_search_policy(pred, positions, max_speeds) -> np.ndarray:
    """Spread agents round-robin over the components ranked by weight."""
    assign = search_assignment(pred.weights[0], len(positions))
    return np.array([toward(p, pred.means[0, j], v) for p, j, v in zip(positions, assign, max_speeds)])


# -- controllers ------------------------------------------------------------


class RandomController:
    name = "random"

    def reset(self, world: TerrainWorld, seed: int) -> None:
        self.rng = np.random.default_rng([seed, 1])

    def act(self, world: TerrainWorld) -> np.ndarray:
        return np.array([random_policy(self.rng, world.config.agents[i]) for i in world.learnable])


class HeuristicController:
    name = "heuristic"

    def __init__(self, t_spiral: int = 50, spiral: SpiralParams | None = None):
        self.t_spiral = t_spiral
        self.spiral = spiral or SpiralParams()

    def reset(self, world: TerrainWorld, seed: int) -> None:
        self.state = HeuristicState(
            agents=[AgentHeuristicState() for _ in world.learnable],
            rng=np.random.default_rng([seed, 2]),
            t_spiral=self.t_spiral,
            spiral=self.spiral,
        )

    def act(self, world: TerrainWorld) -> np.ndarray:
        return heuristic_policy(view_of(world), self.state)


class FilterController:
    """Drives agents from a frozen filter's prediction each step."""

    def __init__(self, predictor: Callable, rule: str = "highest_prob"):
        self.predictor = predictor
        self.rule = rule
        self.name = f"pmc_{rule}"

    def reset(self, world: TerrainWorld, seed: int) -> None:
        pass

    def act(self, world: TerrainWorld) -> np.ndarray:
        pred = self.predictor(world)
        view = view_of(world)
        fn = pmc_highest_prob_policy if self.rule == "highest_prob" else pmc_search_policy
        return fn(pred, view.positions, view.max_speeds)


class StationaryController:
    name = "stationary"

    def reset(self, world: TerrainWorld, seed: int) -> None:
        pass

    def act(self, world: TerrainWorld) -> np.ndarray:
        return np.zeros((len(world.learnable), 2))


SCRIPTED = {"random": RandomController, "heuristic": HeuristicController}


def scripted_controller(name: str):
    try:
        return SCRIPTED[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; expected one of {sorted(SCRIPTED)}") from None


def filter_predictor(model) -> Callable:
    """Wrap a filter so it predicts from a world's live detection log."""
    from .filtering.inputs import build_filter_array

    def predict(world: TerrainWorld):
        s = world.state
        return model.predict(build_filter_array(s.detections, s.t, world.x_start, model.cfg.t_max)[None])

    return predict
