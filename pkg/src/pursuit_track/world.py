"""Pursuit-evasion world in normalized [0, 1]^2 coordinates.

A heterogeneous team (static cameras, search parties, helicopters) tries to
detect an evader that plans toward one of several hideouts. Detection is
binary inside a radius that depends on terrain visibility at the target and
on the target's speed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evader import FOLLOW, Evader, EvaderParams, EvaderState, Hideout, choose_goal
from .ndgrad import ContractError
from .terrain import ConfigError, TerrainMap, generate_terrain

GRID_SCALE = 2428.0
AGENT_KINDS = ("camera", "search_party", "helicopter")

HIDEOUT_REACHED = "hideout_reached"
TIMEOUT = "timeout"
RUNNING = "running"


@dataclass(frozen=True)
class AgentSpec:
    kind: str
    max_speed: float
    base_detect_radius: float

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {self.kind!r}")
        if (self.max_speed == 0) != (self.kind == "camera"):
            raise ConfigError("max_speed must be 0 exactly for cameras")

    @property
    def learnable(self) -> bool:
        return self.kind != "camera"


def search_party(radius: float = 0.05) -> AgentSpec:
    return AgentSpec("search_party", 20 / GRID_SCALE, radius)


def helicopter(radius: float = 0.06) -> AgentSpec:
    return AgentSpec("helicopter", 127 / GRID_SCALE, radius)


def camera(radius: float = 0.05) -> AgentSpec:
    return AgentSpec("camera", 0.0, radius)


def default_roster() -> list[AgentSpec]:
    return [search_party(), search_party(), helicopter(), camera(), camera()]


@dataclass(frozen=True)
class Detection:
    timestep: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    detector: int


@dataclass
class EnvConfig:
    agents: list[AgentSpec] = field(default_factory=default_roster)
    t_max: int = 500
    grid_size: int = 64
    forest_fraction: float = 0.4
    terrain_seed: int = 0
    world_seed: int = 0
    n_hideouts: int = 3
    n_known_hideouts: int = 1
    v_min: float = 0.25
    kappa: float = 0.5
    c_det: float = 1.0
    c_team: float = 0.5
    c_dist: float = 0.5
    hideout_eps: float = 1e-3
    evader: EvaderParams = field(default_factory=EvaderParams)
    evader_start_box: tuple[float, float, float, float] = (0.05, 0.05, 0.25, 0.95)
    agent_start_box: tuple[float, float, float, float] = (0.2, 0.2, 0.8, 0.8)

    def __post_init__(self):
        consts = [self.v_min, self.kappa, self.c_det, self.c_team, self.c_dist, self.hideout_eps]
        if not all(np.isfinite(consts)):
            raise ConfigError("all constants must be finite")
        if self.c_det <= 0:
            raise ConfigError("c_det must be positive")
        if self.n_hideouts < 1 or not 0 <= self.n_known_hideouts <= self.n_hideouts:
            raise ConfigError("need >= 1 hideout and 0 <= known <= total")
        if self.t_max < 1:
            raise ConfigError("t_max must be positive")

    @property
    def learnable_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.agents) if a.learnable]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        d = dict(d)
        if "agents" in d:
            d["agents"] = [a if isinstance(a, AgentSpec) else AgentSpec(**a) for a in d["agents"]]
        if "evader" in d and isinstance(d["evader"], dict):
            d["evader"] = EvaderParams(**d["evader"])
        for key in ("evader_start_box", "agent_start_box"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_env_config(path: str | Path) -> EnvConfig:
    """Read an EnvConfig from TOML or JSON (by suffix)."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(path.read_text())
    else:
        data = json.loads(path.read_text())
    return EnvConfig.from_dict(data.get("env", data))


def detection_radius(
    observer: AgentSpec | float,
    target_speed: float,
    visibility: float,
    target_max_speed: float,
    v_min: float = 0.25,
    kappa: float = 0.5,
) -> float:
    """base * (v_min + (1 - v_min) * visibility) * (1 + kappa * speed / max_speed).

    A target whose max speed is zero (a camera) contributes no speed term.
    """
    base = observer.base_detect_radius if isinstance(observer, AgentSpec) else float(observer)
    ratio = target_speed / target_max_speed if target_max_speed > 0 else 0.0
    return base * (v_min + (1.0 - v_min) * visibility) * (1.0 + kappa * ratio)


def reward(
    agent_pos, evader_pos, detected_self: bool, detected_any: bool, c_det=1.0, c_team=0.5, c_dist=0.5
) -> float:
    dist = float(np.linalg.norm(np.asarray(agent_pos) - np.asarray(evader_pos)))
    return c_det * float(detected_self) + c_team * float(detected_any) - c_dist * dist


@dataclass
class TerrainWorldState:
    t: int
    evader_pos: np.ndarray
    evader_vel: np.ndarray
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    detections: list[Detection] = field(default_factory=list)
    done: bool = False
    outcome: str = RUNNING


@dataclass
class StepRecord:
    """Everything one step produced; trajectories are lists of these."""

    t: int
    evader_pos: np.ndarray
    evader_vel: np.ndarray
    agent_pos: np.ndarray
    detections: list[Detection]
    rewards: np.ndarray
    evader_mode: str


def clip_norm(v, max_norm: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n > max_norm:
        return v * (max_norm / n) if n > 0 else v
    return v


def _box_sample(rng: np.random.Generator, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])


class TerrainWorld:
    """One environment instance. Static layout (terrain, hideouts, camera
    sites) is fixed by the config; ``reset(seed)`` draws an episode."""

    def __init__(self, config: EnvConfig, terrain: TerrainMap | None = None):
        self.config = config
        self.terrain = terrain or generate_terrain(config.terrain_seed, config.grid_size, config.forest_fraction)
        self.evader_policy = Evader(self.terrain, config.evader)
        rng = np.random.default_rng(config.world_seed)
        self.hideouts = self._place_hideouts(rng)
        self.camera_sites = {
            i: rng.uniform(0.1, 0.9, size=2) for i, a in enumerate(config.agents) if not a.learnable
        }
        self.learnable = config.learnable_indices
        self.state: TerrainWorldState | None = None
        self.evader_state: EvaderState | None = None
        self.x_start: np.ndarray | None = None

    def _place_hideouts(self, rng: np.random.Generator) -> list[Hideout]:
        locs: list[np.ndarray] = []
        for _ in range(1000):
            if len(locs) == self.config.n_hideouts:
                break
            p = np.array([rng.uniform(0.7, 0.95), rng.uniform(0.05, 0.95)])
            c = self.terrain.cell_center(*self.terrain.cell_of(p))
            if all(np.linalg.norm(c - q) > 0.2 for q in locs):
                locs.append(c)
        while len(locs) < self.config.n_hideouts:
            p = rng.uniform(0.05, 0.95, size=2)
            locs.append(self.terrain.cell_center(*self.terrain.cell_of(p)))
        known = self.config.n_known_hideouts
        return [Hideout((float(c[0]), float(c[1])), i < known) for i, c in enumerate(locs)]

    @property
    def known_hideouts(self) -> list[Hideout]:
        return [h for h in self.hideouts if h.known_to_pursuers]

    @property
    def n_agents(self) -> int:
        return len(self.config.agents)

    def reset(self, seed: int) -> TerrainWorldState:
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.x_start = _box_sample(rng, cfg.evader_start_box)
        goal = choose_goal(self.hideouts, self.x_start, int(rng.integers(2**31)))
        positions = np.zeros((self.n_agents, 2))
        for i, a in enumerate(cfg.agents):
            positions[i] = self.camera_sites[i] if not a.learnable else _box_sample(rng, cfg.agent_start_box)
        self.evader_state = self.evader_policy.initial_state(self.x_start, goal)
        self.state = TerrainWorldState(
            t=0,
            evader_pos=self.x_start.copy(),
            evader_vel=np.zeros(2),
            agent_pos=positions,
            agent_vel=np.zeros((self.n_agents, 2)),
        )
        return self.state

    # -- perception -------------------------------------------------------

    def evader_sees(self, state: TerrainWorldState) -> list[np.ndarray]:
        """Pursuer positions inside the evader's own detection radius."""
        cfg = self.config
        seen = []
        for i, a in enumerate(cfg.agents):
            r = detection_radius(
                cfg.evader.base_detect_radius,
                float(np.linalg.norm(state.agent_vel[i])),
                self.terrain.visibility_at(state.agent_pos[i]),
                a.max_speed,
                cfg.v_min,
                cfg.kappa,
            )
            if np.linalg.norm(state.agent_pos[i] - state.evader_pos) <= r:
                seen.append(state.agent_pos[i].copy())
        return seen

    def detection_radii(self, evader_pos, evader_speed: float) -> np.ndarray:
        cfg = self.config
        vis = self.terrain.visibility_at(evader_pos)
        return np.array(
            [detection_radius(a, evader_speed, vis, cfg.evader.max_speed, cfg.v_min, cfg.kappa) for a in cfg.agents]
        )

    # -- dynamics ---------------------------------------------------------

    def step(self, actions) -> tuple[TerrainWorldState, np.ndarray, list[Detection]]:
        """Advance one timestep. ``actions`` holds one velocity per learnable
        agent, in roster order. Returns (state, per-learnable rewards,
        detections emitted this step)."""
        s = self.state
        if s is None or s.done:
            raise ContractError("step() on a finished or un-reset episode")
        cfg = self.config
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        if len(actions) != len(self.learnable):
            raise ContractError(f"expected {len(self.learnable)} actions, got {len(actions)}")

        seen = self.evader_sees(s)
        e_vel = self.evader_policy.step(self.evader_state, s.evader_pos, seen)

        new_pos = s.agent_pos.copy()
        new_vel = np.zeros_like(s.agent_vel)
        for k, i in enumerate(self.learnable):
            v = clip_norm(actions[k], cfg.agents[i].max_speed)
            new_pos[i] = np.clip(s.agent_pos[i] + v, 0.0, 1.0)
            new_vel[i] = new_pos[i] - s.agent_pos[i]

        e_pos = np.clip(s.evader_pos + e_vel, 0.0, 1.0)
        e_vel = e_pos - s.evader_pos
        t = s.t + 1

        radii = self.detection_radii(e_pos, float(np.linalg.norm(e_vel)))
        dists = np.linalg.norm(new_pos - e_pos, axis=1)
        detected = dists <= radii
        step_dets = [
            Detection(t, (float(e_pos[0]), float(e_pos[1])), (float(e_vel[0]), float(e_vel[1])), int(i))
            for i in np.flatnonzero(detected)
        ]
        any_det = bool(detected.any())
        rewards = np.array(
            [
                reward(new_pos[i], e_pos, bool(detected[i]), any_det, cfg.c_det, cfg.c_team, cfg.c_dist)
                for i in self.learnable
            ]
        )

        outcome = RUNNING
        if any(np.linalg.norm(e_pos - np.array(h.location)) <= cfg.hideout_eps for h in self.hideouts):
            outcome = HIDEOUT_REACHED
        elif t >= cfg.t_max:
            outcome = TIMEOUT

        self.state = TerrainWorldState(
            t=t,
            evader_pos=e_pos,
            evader_vel=e_vel,
            agent_pos=new_pos,
            agent_vel=new_vel,
            detections=s.detections + step_dets,
            done=outcome != RUNNING,
            outcome=outcome,
        )
        return self.state, rewards, step_dets

    @property
    def evader_mode(self) -> str:
        return self.evader_state.mode if self.evader_state else FOLLOW

    # -- observations -----------------------------------------------------

    def observe_base(self, agent_index: int, state: TerrainWorldState | None = None) -> np.ndarray:
        """[own xy, t/T_max, other learnable agents' xy in roster order,
        known hideout xy in hideout order]."""
        s = state or self.state
        if agent_index not in self.learnable:
            raise IndexError(f"agent {agent_index} is not a learnable agent")
        parts = [s.agent_pos[agent_index], [s.t / self.config.t_max]]
        parts += [s.agent_pos[j] for j in self.learnable if j != agent_index]
        parts += [np.array(h.location) for h in self.known_hideouts]
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    def base_obs_dim(self) -> int:
        return 3 + 2 * (len(self.learnable) - 1) + 2 * len(self.known_hideouts)


def episode_metrics(trajectory: Sequence[StepRecord], agent_indices: Sequence[int] | None = None) -> dict[str, float]:
    """Detection rate, mean closest agent-evader distance, mean team reward
    per step, and the episode's summed team reward.

    ``agent_indices`` restricts the closest-distance term (e.g. to mobile
    searchers); by default every agent counts.
    """
    if len(trajectory) == 0:
        raise ContractError("episode_metrics needs a non-empty trajectory")
    idx = slice(None) if agent_indices is None else list(agent_indices)
    detected = [len(r.detections) > 0 for r in trajectory]
    closest = [
        float(np.min(np.linalg.norm(np.asarray(r.agent_pos)[idx] - r.evader_pos, axis=1))) for r in trajectory
    ]
    team = [float(np.sum(r.rewards)) for r in trajectory]
    return {
        "detection_rate": float(np.mean(detected)),
        "closest_distance": float(np.mean(closest)),
        "mean_reward": float(np.mean(team)),
        "total_reward": float(np.sum(team)),
    }


def rollout(world: TerrainWorld, controller, seed: int) -> list[StepRecord]:
    """Run one episode. ``controller`` needs ``reset(world, seed)`` and
    ``act(world) -> actions`` (one velocity per learnable agent)."""
    world.reset(seed)
    controller.reset(world, seed)
    records = []
    while not world.state.done:
        actions = controller.act(world)
        state, rewards, dets = world.step(actions)
        records.append(
            StepRecord(
                t=state.t,
                evader_pos=state.evader_pos.copy(),
                evader_vel=state.evader_vel.copy(),
                agent_pos=state.agent_pos.copy(),
                detections=dets,
                rewards=rewards,
                evader_mode=world.evader_mode,
            )
        )
    return records
