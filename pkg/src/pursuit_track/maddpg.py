"""MADDPG for the pursuit team with optional observation augmentation.

Each learnable agent owns an actor on its local observation and a critic on
the joint observation and joint action. Actions are stored and fed to the
critics in units of the agent's max speed, so every action coordinate lies
in [-1, 1] regardless of whether the agent is a search party or a
helicopter.

Observation modes:

* ``base``: the world's base observation.
* ``detections``: plus the two detection slots of the filter input
  (position, velocity in speed units, staleness), 10 floats.
* ``filter``: plus, per mixture component, (weight, mean relative to the
  agent, scale), 5 floats each. The filter is frozen: it only ever runs
  under ``no_grad`` and its checksum is verified after training.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ndgrad as nd
from .filtering.inputs import build_filter_array
from .filtering.models import MixtureFilter, MixturePrediction, filter_checksum
from .ndgrad import MLP, ContractError, Tensor
from .terrain import ConfigError
from .world import StepRecord, TerrainWorld, clip_norm, episode_metrics, rollout

log = logging.getLogger(__name__)

MODES = ("base", "detections", "filter")
EXTRA_DIMS = {"base": 0, "detections": 10, "filter": 40}


# -- observations -------------------------------------------------------------


def augment_observation(
    o_b,
    mode: str,
    filter_pred: MixturePrediction | None = None,
    x_s=None,
    filter_input=None,
    velocity_scale: float = 2428.0 / 15.0,
) -> np.ndarray:
    """Append the mode's extra features to a base observation.

    ``filter_input`` is the 13-float filter input row (its detection slots
    are reused in ``detections`` mode); ``filter_pred`` is a single-row
    mixture and ``x_s`` the observing agent's position (``filter`` mode).
    """
    o_b = np.asarray(o_b, dtype=np.float64).reshape(-1)
    if mode == "base":
        return o_b
    if mode == "detections":
        if filter_input is None:
            raise ContractError("detections mode needs the filter input row")
        slots = np.asarray(filter_input, dtype=np.float64).reshape(-1)[3:13].copy()
        slots[[2, 3, 7, 8]] *= velocity_scale
        return np.concatenate([o_b, slots])
    if mode == "filter":
        if filter_pred is None or x_s is None:
            raise ContractError("filter mode needs a prediction and the agent position")
        rel = filter_pred.means[0] - np.asarray(x_s, dtype=np.float64)
        per = np.concatenate([filter_pred.weights[0][:, None], rel, filter_pred.scales[0]], axis=1)
        return np.concatenate([o_b, per.reshape(-1)])
    raise ValueError(f"unknown augment mode {mode!r}; expected one of {MODES}")


class ObservationBuilder:
    """Per-step local observations for every learnable agent."""

    def __init__(self, mode: str, filter_model: MixtureFilter | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown augment mode {mode!r}; expected one of {MODES}")
        if mode == "filter" and filter_model is None:
            raise ConfigError("filter mode needs a frozen filter checkpoint")
        self.mode = mode
        self.filter = filter_model

    def obs_dim(self, world: TerrainWorld) -> int:
        extra = EXTRA_DIMS[self.mode]
        if self.mode == "filter":
            extra = 5 * self.filter.cfg.n_components
        return world.base_obs_dim() + extra

    def __call__(self, world: TerrainWorld) -> np.ndarray:
        s = world.state
        X = pred = None
        if self.mode != "base":
            t_max = self.filter.cfg.t_max if self.filter is not None else world.config.t_max
            X = build_filter_array(s.detections, s.t, world.x_start, t_max)
        if self.mode == "filter":
            pred = self.filter.predict(X[None])
        rows = []
        for i in world.learnable:
            rows.append(augment_observation(world.observe_base(i), self.mode, pred, s.agent_pos[i], X))
        return np.stack(rows)


# -- networks -------------------------------------------------------------------


def frozen_forward(net: MLP, x) -> Tensor:
    """Run ``net`` on detached copies of its weights so a backward pass
    reaches ``x`` but never touches the network's parameters."""
    x = nd._wrap(x)
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        x = nd.matmul(x, Tensor(layer.weight.data)) + Tensor(layer.bias.data)
        if i < last:
            x = nd.activation(x, net.hidden_act)
        elif net.out_act is not None:
            x = nd.activation(x, net.out_act)
    return x


def soft_update(target: nd.Module, online: nd.Module, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise. Written as
    target += tau * (online - target) so equal networks stay bit-identical."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for (name, t), (_, o) in zip(target.named_parameters(), online.named_parameters()):
        if t.shape != o.shape:
            raise nd.DimensionError(f"{name}: target {t.shape} != online {o.shape}")
        if tau == 1.0:
            t.data[...] = o.data
        elif tau > 0.0:
            t.data += tau * (o.data - t.data)


def _clone(net: MLP) -> MLP:
    twin = MLP(net.sizes, np.random.default_rng(0), net.hidden_act, net.out_act)
    twin.load_state_dict(net.state_dict())
    return twin


@dataclass
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.01
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    buffer_size: int = 100_000
    batch_size: int = 256
    update_interval: int = 4
    noise_scale: float = 0.3
    noise_decay: float = 0.999
    episodes: int = 300
    actor_hidden: tuple[int, ...] = (128, 128)
    critic_hidden: tuple[int, ...] = (256, 128)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.update_interval < 1 or self.buffer_size < 1:
            raise ConfigError("batch size, update interval and buffer size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        for k in ("actor_hidden", "critic_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class PolicySet(nd.Module):
    """Actors, critics and their target copies for every learnable agent."""

    def __init__(self, obs_dims: Sequence[int], max_speeds: Sequence[float], config: TrainConfig, mode: str = "base"):
        rng = np.random.default_rng([config.seed, 7])
        self.obs_dims = [int(d) for d in obs_dims]
        self.max_speeds = [float(v) for v in max_speeds]
        self.mode = mode
        self.config = config
        joint = sum(self.obs_dims) + 2 * len(self.obs_dims)
        self.actors = [MLP([d, *config.actor_hidden, 2], rng, out_act="tanh") for d in self.obs_dims]
        self.critics = [MLP([joint, *config.critic_hidden, 1], rng) for _ in self.obs_dims]
        self.target_actors = [_clone(a) for a in self.actors]
        self.target_critics = [_clone(c) for c in self.critics]

    @property
    def n_agents(self) -> int:
        return len(self.actors)

    def policy(self, i: int, o_i) -> np.ndarray:
        """Noise-free normalized action of agent ``i`` (no graph)."""
        o_i = np.asarray(o_i, dtype=np.float64)
        if o_i.shape[-1] != self.obs_dims[i]:
            raise ContractError(f"agent {i} expects {self.obs_dims[i]} observation floats, got {o_i.shape[-1]}")
        with nd.no_grad():
            return self.actors[i](Tensor(np.atleast_2d(o_i))).data

    def save(self, path: str | Path) -> None:
        named = self.state_dict()
        meta = {"obs_dims": self.obs_dims, "max_speeds": self.max_speeds, "mode": self.mode, "config": asdict(self.config)}
        named["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).astype(np.float64)
        nd.save_params(path, named)

    @classmethod
    def load(cls, path: str | Path) -> PolicySet:
        named = nd.load_params(path)
        meta = json.loads(named.pop("__meta__").astype(np.uint8).tobytes())
        ps = cls(meta["obs_dims"], meta["max_speeds"], TrainConfig.from_dict(meta["config"]), meta["mode"])
        ps.load_state_dict(named)
        return ps


def act(actor: MLP, o_i, noise_scale: float, rng: np.random.Generator | None, max_speed: float) -> np.ndarray:
    """Velocity command: tanh head times max speed, plus Gaussian noise of
    std ``noise_scale * max_speed``, norm-clipped to max speed."""
    o_i = np.asarray(o_i, dtype=np.float64)
    if o_i.shape[-1] != actor.layers[0].n_in:
        raise ContractError(f"actor expects {actor.layers[0].n_in} observation floats, got {o_i.shape[-1]}")
    with nd.no_grad():
        a = actor(Tensor(o_i.reshape(1, -1))).data[0] * max_speed
    if noise_scale > 0:
        if rng is None:
            raise ContractError("exploration noise needs a seeded generator")
        a = a + rng.normal(0.0, noise_scale * max_speed, size=2)
    return clip_norm(a, max_speed)


# -- replay buffer ----------------------------------------------------------------


@dataclass
class Transition:
    obs: np.ndarray  # (N, d) local observations
    actions: np.ndarray  # (N, 2), normalized by max speed
    rewards: np.ndarray  # (N,)
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray  # (B, N, d)
    actions: np.ndarray  # (B, N, 2)
    rewards: np.ndarray  # (B, N)
    next_obs: np.ndarray
    done: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.done)


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is evicted first."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, seed: int = 0):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents, 2))
        self.rewards = np.zeros((capacity, n_agents))
        self.done = np.zeros(capacity)
        self.head = 0
        self.size = 0
        self.rng = np.random.default_rng([seed, 11])

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        if not np.all(np.isfinite(tr.rewards)):
            raise ContractError("non-finite reward in transition")
        k = self.head
        self.obs[k] = tr.obs
        self.next_obs[k] = tr.next_obs
        self.actions[k] = tr.actions
        self.rewards[k] = tr.rewards
        self.done[k] = float(tr.done)
        self.head = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        if self.size == 0:
            raise ContractError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.done[idx])


# -- updates --------------------------------------------------------------------


def td_target(r, gamma: float, q_next, done) -> np.ndarray:
    """y = r + gamma * (1 - done) * Q'; a finished episode ignores Q'."""
    r = np.asarray(r, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    q_next = np.asarray(q_next, dtype=np.float64)
    return r + gamma * np.where(done > 0, 0.0, q_next)


def _joint(obs: np.ndarray) -> np.ndarray:
    return obs.reshape(obs.shape[0], -1)


def target_actions(policies: PolicySet, next_obs: np.ndarray) -> np.ndarray:
    with nd.no_grad():
        return np.stack([policies.target_actors[j](Tensor(next_obs[:, j])).data for j in range(policies.n_agents)], axis=1)


def critic_update(
    policies: PolicySet, batch: Batch, i: int, opt: nd.Adam, next_actions: np.ndarray | None = None
) -> float:
    """One Adam step on critic ``i`` toward the TD target; returns the loss."""
    if len(batch) == 0:
        raise ContractError("critic_update on an empty batch")
    if next_actions is None:
        next_actions = target_actions(policies, batch.next_obs)
    with nd.no_grad():
        q_next = policies.target_critics[i](Tensor(np.hstack([_joint(batch.next_obs), _joint(next_actions)]))).data[:, 0]
    y = td_target(batch.rewards[:, i], policies.config.gamma, q_next, batch.done)
    opt.zero_grad()
    q = policies.critics[i](Tensor(np.hstack([_joint(batch.obs), _joint(batch.actions)])))
    diff = q - Tensor(y[:, None])
    loss = (diff * diff).mean()
    loss.backward()
    opt.step()
    return loss.item()


def actor_loss(policies: PolicySet, batch: Batch, i: int) -> Tensor:
    """-mean Q_i with agent i's batch action replaced by pi_i(o_i). The
    critic runs on detached weights, so only the actor collects gradients."""
    a_i = policies.actors[i](Tensor(batch.obs[:, i]))
    n = policies.n_agents
    parts: list = [Tensor(_joint(batch.obs))]
    if i > 0:
        parts.append(Tensor(_joint(batch.actions[:, :i])))
    parts.append(a_i)
    if i < n - 1:
        parts.append(Tensor(_joint(batch.actions[:, i + 1 :])))
    q = frozen_forward(policies.critics[i], nd.concat(parts, axis=1))
    return -q.mean()


def actor_update(policies: PolicySet, batch: Batch, i: int, opt: nd.Adam) -> float:
    """One Adam step ascending Q_i through pi_i; returns the gradient norm."""
    if len(batch) == 0:
        raise ContractError("actor_update on an empty batch")
    opt.zero_grad()
    actor_loss(policies, batch, i).backward()
    norm = float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in policies.actors[i].parameters())))
    opt.step()
    return norm


# -- training loop ------------------------------------------------------------------


class PolicyController:
    """Runs a PolicySet in a world; ``noise_scale=0`` gives evaluation mode."""

    def __init__(self, policies: PolicySet, builder: ObservationBuilder, noise_scale: float = 0.0, seed: int = 0):
        self.policies = policies
        self.builder = builder
        self.noise_scale = noise_scale
        self.name = f"maddpg_{builder.mode}"
        self.rng = np.random.default_rng([seed, 5])
        self.last_obs: np.ndarray | None = None
        self.last_norm_actions: np.ndarray | None = None

    def reset(self, world: TerrainWorld, seed: int) -> None:
        self.last_obs = None

    def act(self, world: TerrainWorld, obs: np.ndarray | None = None) -> np.ndarray:
        """Velocities for every learnable agent; ``obs`` skips rebuilding
        observations the caller already holds."""
        obs = self.builder(world) if obs is None else obs
        ps = self.policies
        vel = np.array(
            [act(ps.actors[k], obs[k], self.noise_scale, self.rng, ps.max_speeds[k]) for k in range(ps.n_agents)]
        )
        self.last_obs = obs
        self.last_norm_actions = vel / np.array(ps.max_speeds)[:, None]
        return vel


@dataclass
class MarlResult:
    policies: PolicySet
    episode_rewards: list[float]
    episode_detection: list[float]
    filter_checksum: str | None = None
    seconds: float = 0.0
    curve: list[dict] = field(default_factory=list)


def _resolve_world(env) -> TerrainWorld:
    return env() if callable(env) and not isinstance(env, TerrainWorld) else env


def train_marl(
    env: TerrainWorld | Callable[[], TerrainWorld],
    filter_model: MixtureFilter | None,
    mode: str,
    config: TrainConfig | None = None,
    curve_path: str | Path | None = None,
    seed_base: int | None = None,
) -> MarlResult:
    """Train one MADDPG team. Every ``update_interval`` environment steps
    (once the buffer holds a batch) one shared batch is drawn and each
    agent's critic and actor take one step; targets then soft-update."""
    config = config or TrainConfig()
    world = _resolve_world(env)
    builder = ObservationBuilder(mode, filter_model)
    checksum_before = filter_checksum(filter_model) if filter_model is not None else None

    obs_dim = builder.obs_dim(world)
    n = len(world.learnable)
    speeds = [world.config.agents[i].max_speed for i in world.learnable]
    policies = PolicySet([obs_dim] * n, speeds, config, mode)
    actor_opts = [nd.Adam(a.parameters(), lr=config.lr_actor) for a in policies.actors]
    critic_opts = [nd.Adam(c.parameters(), lr=config.lr_critic) for c in policies.critics]
    buffer = ReplayBuffer(config.buffer_size, n, obs_dim, seed=config.seed)
    controller = PolicyController(policies, builder, config.noise_scale, seed=config.seed)
    seed_base = config.seed * 1_000_003 if seed_base is None else seed_base

    rewards_curve, det_curve, curve = [], [], []
    steps = 0
    t0 = time.perf_counter()
    for ep in range(config.episodes):
        controller.noise_scale = config.noise_scale * config.noise_decay**ep
        world.reset(seed_base + ep)
        controller.reset(world, seed_base + ep)
        total, detected, length = 0.0, 0, 0
        obs = builder(world)
        while not world.state.done:
            vel = controller.act(world, obs)
            state, r, dets = world.step(vel)
            next_obs = builder(world)
            buffer.add(Transition(obs, controller.last_norm_actions, r, next_obs, state.done))
            obs = next_obs
            total += float(np.sum(r))
            detected += bool(dets)
            length += 1
            steps += 1
            if steps % config.update_interval == 0 and len(buffer) >= config.batch_size:
                batch = buffer.sample(config.batch_size)
                nxt = target_actions(policies, batch.next_obs)
                for i in range(n):
                    critic_update(policies, batch, i, critic_opts[i], nxt)
                    actor_update(policies, batch, i, actor_opts[i])
                for i in range(n):
                    soft_update(policies.target_critics[i], policies.critics[i], config.tau)
                    soft_update(policies.target_actors[i], policies.actors[i], config.tau)
        rewards_curve.append(total)
        det_curve.append(detected / length)
        curve.append({"episode": ep, "team_reward": total, "detection_rate": detected / length, "steps": length})
        log.info("episode %d reward %.3f detection %.3f", ep, total, detected / length)

    if filter_model is not None and filter_checksum(filter_model) != checksum_before:
        raise ContractError("filter parameters changed during MARL training")
    if curve_path is not None:
        write_curve(curve, curve_path)
    return MarlResult(policies, rewards_curve, det_curve, checksum_before, time.perf_counter() - t0, curve)


def write_curve(curve: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["episode", "team_reward", "detection_rate", "steps"], lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# -- evaluation -------------------------------------------------------------------

EVAL_SEED_BASE = 900_000


def evaluate_policies(
    controller, env: TerrainWorld | Callable[[], TerrainWorld], n_episodes: int = 50, seed_base: int = EVAL_SEED_BASE
) -> dict:
    """Noise-free rollouts of any controller. Returns mean and std of the
    per-episode metrics plus the per-episode rows themselves."""
    world = _resolve_world(env)
    if hasattr(controller, "noise_scale"):
        controller.noise_scale = 0.0
    episodes = []
    for k in range(n_episodes):
        traj: list[StepRecord] = rollout(world, controller, seed_base + k)
        episodes.append(episode_metrics(traj, world.learnable))
    out: dict = {"episodes": episodes}
    for key, col in (
        ("detection_rate", "detection_rate"),
        ("closest_distance", "closest_distance"),
        ("mean_reward", "reward"),
        ("total_reward", "episode_reward"),
    ):
        vals = np.array([e[key] for e in episodes])
        out[col] = float(vals.mean())
        out[f"{col}_std"] = float(vals.std())
    return out
