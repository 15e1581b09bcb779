"""Trajectory records, filter datasets and CSV reports.

One episode per JSON-Lines file: a header object, then one object per
timestep. Floats are written with full float64 precision, so a record
reloads to an equal value.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .filtering.inputs import build_filter_array
from .ndgrad import ContractError
from .world import Detection, EnvConfig, StepRecord, TerrainWorld, rollout

SPLITS = ("train", "val", "eval")


class RecordParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def _tup(a) -> tuple:
    return tuple(float(x) for x in np.asarray(a).reshape(-1))


@dataclass(frozen=True)
class Row:
    t: int
    evader_pos: tuple[float, float]
    evader_vel: tuple[float, float]
    agent_pos: tuple[tuple[float, float], ...]
    detections: tuple[Detection, ...]
    rewards: tuple[float, ...]
    evader_mode: str

    @classmethod
    def from_step(cls, r: StepRecord) -> Row:
        return cls(
            t=int(r.t),
            evader_pos=_tup(r.evader_pos),
            evader_vel=_tup(r.evader_vel),
            agent_pos=tuple(_tup(p) for p in r.agent_pos),
            detections=tuple(r.detections),
            rewards=_tup(r.rewards),
            evader_mode=r.evader_mode,
        )

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "evader_pos": list(self.evader_pos),
            "evader_vel": list(self.evader_vel),
            "agent_pos": [list(p) for p in self.agent_pos],
            "detections": [
                {"timestep": d.timestep, "position": list(d.position), "velocity": list(d.velocity), "detector": d.detector}
                for d in self.detections
            ],
            "rewards": list(self.rewards),
            "evader_mode": self.evader_mode,
        }

    @classmethod
    def from_json(cls, d: dict) -> Row:
        return cls(
            t=int(d["t"]),
            evader_pos=tuple(d["evader_pos"]),
            evader_vel=tuple(d["evader_vel"]),
            agent_pos=tuple(tuple(p) for p in d["agent_pos"]),
            detections=tuple(
                Detection(int(x["timestep"]), tuple(x["position"]), tuple(x["velocity"]), int(x["detector"]))
                for x in d["detections"]
            ),
            rewards=tuple(d["rewards"]),
            evader_mode=d["evader_mode"],
        )


@dataclass(frozen=True)
class TrajectoryRecord:
    episode_id: str
    seed: int
    policy: str
    config_hash: str
    outcome: str
    x_start: tuple[float, float]
    goal: tuple[float, float]
    rows: tuple[Row, ...]

    def header(self) -> dict:
        return {
            "type": "header",
            "episode_id": self.episode_id,
            "seed": self.seed,
            "policy": self.policy,
            "config_hash": self.config_hash,
            "outcome": self.outcome,
            "x_start": list(self.x_start),
            "goal": list(self.goal),
            "length": len(self.rows),
        }

    @property
    def detection_rate(self) -> float:
        return float(np.mean([len(r.detections) > 0 for r in self.rows]))


def write_record(path: str | Path, record: TrajectoryRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(record.header())] + [json.dumps(r.to_json()) for r in record.rows]
    path.write_text("\n".join(lines) + "\n")


def read_record(path: str | Path) -> TrajectoryRecord:
    path = Path(path)
    header = None
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordParseError(path, lineno, f"malformed JSON ({e.msg})") from None
            if lineno == 1:
                if obj.get("type") != "header":
                    raise RecordParseError(path, lineno, "first object must be the header")
                header = obj
                continue
            try:
                rows.append(Row.from_json(obj))
            except (KeyError, TypeError, ValueError) as e:
                raise RecordParseError(path, lineno, f"bad row: {e}") from None
    if header is None:
        raise RecordParseError(path, 1, "missing header")
    if not rows:
        raise ContractError(f"{path}: zero-length trajectory")
    if header.get("length") != len(rows):
        raise RecordParseError(path, len(rows) + 1, f"header says {header.get('length')} rows, found {len(rows)}")
    return TrajectoryRecord(
        episode_id=header["episode_id"],
        seed=int(header["seed"]),
        policy=header["policy"],
        config_hash=header["config_hash"],
        outcome=header["outcome"],
        x_start=tuple(header["x_start"]),
        goal=tuple(header["goal"]),
        rows=tuple(rows),
    )


def read_records(directory: str | Path) -> list[TrajectoryRecord]:
    paths = sorted(Path(directory).glob("*.jsonl"), key=lambda p: (len(p.stem), p.stem))
    return [read_record(p) for p in paths]


def record_episode(world: TerrainWorld, controller, seed: int, policy: str) -> TrajectoryRecord:
    steps = rollout(world, controller, seed)
    return TrajectoryRecord(
        episode_id=f"{policy}-{seed}",
        seed=int(seed),
        policy=policy,
        config_hash=world.config.config_hash(),
        outcome=world.state.outcome,
        x_start=_tup(world.x_start),
        goal=tuple(float(v) for v in world.evader_state.goal.location),
        rows=tuple(Row.from_step(r) for r in steps),
    )


def collect_dataset(
    config: EnvConfig,
    policy: str,
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
    world: TerrainWorld | None = None,
) -> list[TrajectoryRecord]:
    """Roll one episode per seed with a scripted team; optionally write
    ``out_dir/<policy>/<seed>.jsonl``."""
    from .policies import scripted_controller

    world = world or TerrainWorld(config)
    records = []
    for seed in seeds:
        rec = record_episode(world, scripted_controller(policy), int(seed), policy)
        if out_dir is not None:
            write_record(Path(out_dir) / policy / f"{seed}.jsonl", rec)
        records.append(rec)
    return records


def aggregate_detection_rate(records: Iterable[TrajectoryRecord]) -> float:
    flags = [len(r.detections) > 0 for rec in records for r in rec.rows]
    if not flags:
        raise ContractError("no timesteps to aggregate")
    return float(np.mean(flags))


# -- filter dataset -----------------------------------------------------------


def split_of(episode_id: str, split_seed: int = 0, fractions=(0.7, 0.1, 0.2)) -> str:
    """Deterministic split tag from a hash of (split seed, trajectory id)."""
    digest = hashlib.sha256(f"{split_seed}:{episode_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "little") / 2**64
    edges = np.cumsum(fractions) / np.sum(fractions)
    for tag, edge in zip(SPLITS, edges):
        if u < edge:
            return tag
    return SPLITS[-1]


@dataclass
class FilterDataset:
    X: np.ndarray
    y: np.ndarray
    episode: np.ndarray
    split: np.ndarray
    episode_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.X)

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == split
        return self.X[mask], self.y[mask]

    def with_split(self, split: str) -> FilterDataset:
        return FilterDataset(self.X, self.y, self.episode, np.full(len(self.X), split), self.episode_ids)


def episode_pairs(record: TrajectoryRecord, t_max: int) -> tuple[np.ndarray, np.ndarray]:
    log: list[Detection] = []
    X = np.empty((len(record.rows), 13))
    y = np.empty((len(record.rows), 2))
    for i, row in enumerate(record.rows):
        log.extend(row.detections)
        X[i] = build_filter_array(log, row.t, record.x_start, t_max)
        y[i] = row.evader_pos
    return X, y


def build_filter_dataset(
    records: Sequence[TrajectoryRecord],
    t_max: int,
    fractions=(0.7, 0.1, 0.2),
    split_seed: int = 0,
    force_split: str | None = None,
) -> FilterDataset:
    """One (input, true position) pair per timestep; splits are assigned
    per trajectory so no episode straddles two splits."""
    if not records:
        raise ContractError("no trajectories to build a dataset from")
    Xs, ys, eps, tags = [], [], [], []
    for k, rec in enumerate(records):
        X, y = episode_pairs(rec, t_max)
        tag = force_split or split_of(rec.episode_id, split_seed, fractions)
        Xs.append(X)
        ys.append(y)
        eps.append(np.full(len(X), k))
        tags.append(np.full(len(X), tag, dtype=object))
    return FilterDataset(
        np.concatenate(Xs),
        np.concatenate(ys),
        np.concatenate(eps),
        np.concatenate(tags).astype(str),
        [r.episode_id for r in records],
    )


# -- reports ----------------------------------------------------------------

REPORT_COLUMNS = [
    "name",
    "detection_rate",
    "closest_distance",
    "reward",
    "LL",
    "ADE",
    "CTP",
    "DESV",
    "RT",
    "dataset",
    "detection_rate_std",
    "closest_distance_std",
    "reward_std",
    "episode_reward",
    "episode_reward_std",
]


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return ""
    return f"{v:.4g}"


def emit_report(rows: Sequence[dict], path: str | Path) -> None:
    """CSV with the fixed REPORT_COLUMNS order; missing metrics stay empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            unknown = set(row) - set(REPORT_COLUMNS)
            if unknown:
                raise KeyError(f"unknown report columns: {sorted(unknown)}")
            writer.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])
