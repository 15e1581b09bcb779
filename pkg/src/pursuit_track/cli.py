"""Command-line entry point: ``pursuit-track <subcommand> [flags]``.

Every subcommand resolves its configuration (preset, then config file, then
flags) before doing any work and writes that resolved view as
``run_config.json`` next to its outputs.

Exit codes: 0 when every requested artifact was written, 2 for usage or
configuration errors, 1 for any other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import (
    aggregate_detection_rate,
    build_filter_dataset,
    collect_dataset,
    emit_report,
    read_records,
    write_record,
)
from .filtering import (
    FilterConfig,
    FilterHyper,
    bench_runtime,
    evaluate_filter,
    extrapolate_inputs,
    load_filter,
    make_filter,
    motion_ade,
    train_filter,
)
from .maddpg import ObservationBuilder, PolicyController, PolicySet, TrainConfig, evaluate_policies, train_marl
from .ndgrad import ContractError
from .policies import SCRIPTED, FilterController, StationaryController, filter_predictor, scripted_controller
from .terrain import ConfigError, generate_terrain
from .world import EnvConfig, TerrainWorld

log = logging.getLogger("pursuit_track")

PRESETS = {
    "desk": {"grid_size": 64, "t_max": 300, "episodes": 60, "marl_episodes": 300},
    "paper-shape": {"grid_size": 2428, "t_max": 500, "episodes": 300, "marl_episodes": 1000},
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    out: str
    preset: str | None
    env: EnvConfig
    filter_hyper: FilterHyper
    marl: TrainConfig
    episodes: int
    args: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "out": self.out,
            "preset": self.preset,
            "env": self.env.to_dict(),
            "filter_hyper": dataclasses.asdict(self.filter_hyper),
            "marl": dataclasses.asdict(self.marl),
            "episodes": self.episodes,
            "args": self.args,
        }

    def snapshot(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "run_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=list) + "\n")
        return path


def worker_count() -> int:
    raw = os.environ.get("PURSUIT_TRACK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PURSUIT_TRACK_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(p.read_text())
    return json.loads(p.read_text())


def resolve(args: argparse.Namespace) -> RunConfig:
    """preset -> config file -> explicit flags, later sources winning."""
    data = _read_config_file(args.config)
    if "filter_hyper" in data:
        # A run_config.json snapshot: map its layout onto the config tables.
        data = {
            "env": data["env"],
            "filter": data["filter_hyper"],
            "marl": data["marl"],
            "collect": {"episodes": data["episodes"]},
            "seed": data.get("seed"),
            "preset": data.get("preset"),
        }
    if args.seed is None and data.get("seed") is not None:
        args.seed = int(data["seed"])
    if args.preset is None and data.get("preset") is not None:
        args.preset = data["preset"]
    preset = PRESETS.get(args.preset or "desk")
    env_d = {"grid_size": preset["grid_size"], "t_max": preset["t_max"], **data.get("env", {})}
    for key in ("grid_size", "t_max", "forest_fraction"):
        value = getattr(args, key, None)
        if value is not None:
            env_d[key] = value
    if args.seed is not None:
        env_d.setdefault("terrain_seed", args.seed)
        env_d.setdefault("world_seed", args.seed)
    env = EnvConfig.from_dict(env_d)

    fh = dict(data.get("filter", {}))
    fcfg = FilterConfig.from_dict({"t_max": env.t_max, **fh.pop("config", {})})
    hyper = FilterHyper(**{**fh, "config": fcfg})
    for key in ("lr", "batch_size", "patience", "max_epochs"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(hyper, key, value)
    hyper.seed = args.seed if args.seed is not None else hyper.seed

    md = {"episodes": preset["marl_episodes"], **data.get("marl", {})}
    if args.seed is not None:
        md["seed"] = args.seed
    if getattr(args, "marl_episodes", None) is not None:
        md["episodes"] = args.marl_episodes
    marl = TrainConfig.from_dict(md)

    episodes = getattr(args, "episodes", None)
    if episodes is None:
        episodes = data.get("collect", {}).get("episodes", preset["episodes"])
    skip = {"func", "config", "seed", "out", "preset"}
    extra = {k: v for k, v in vars(args).items() if k not in skip}
    return RunConfig(args.command, args.seed or 0, args.out, args.preset, env, hyper, marl, int(episodes), extra)


# -- subcommands -------------------------------------------------------------


def cmd_gen_world(rc: RunConfig) -> list[Path]:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    world = TerrainWorld(rc.env, generate_terrain(rc.env.terrain_seed, rc.env.grid_size, rc.env.forest_fraction))
    world.terrain.to_csv(out / "terrain.csv")
    hideouts = [{"location": list(h.location), "known": h.known_to_pursuers} for h in world.hideouts]
    (out / "hideouts.json").write_text(json.dumps(hideouts, indent=2) + "\n")
    print(f"terrain {rc.env.grid_size}x{rc.env.grid_size}, dense fraction {world.terrain.dense_fraction():.3f}")
    return [out / "terrain.csv", out / "hideouts.json", rc.snapshot(out)]


def _collect_chunk(config: EnvConfig, policy: str, seeds: list[int], out: str) -> list[str]:
    records = collect_dataset(config, policy, seeds)
    paths = []
    for seed, rec in zip(seeds, records):
        path = Path(out) / policy / f"{seed}.jsonl"
        write_record(path, rec)
        paths.append(str(path))
    return paths


def cmd_collect(rc: RunConfig) -> list[Path]:
    policy = rc.args["policy"]
    if policy not in SCRIPTED:
        raise UsageError(f"unknown policy {policy!r}; expected one of {sorted(SCRIPTED)}")
    start = rc.args.get("seed_start") or 0
    seeds = list(range(start, start + rc.episodes))
    n_workers = worker_count()
    if n_workers == 1:
        paths = _collect_chunk(rc.env, policy, seeds, rc.out)
    else:
        chunks = [seeds[k::n_workers] for k in range(n_workers)]
        with ProcessPoolExecutor(n_workers) as pool:
            parts = pool.map(_collect_chunk, [rc.env] * n_workers, [policy] * n_workers, chunks, [rc.out] * n_workers)
            paths = [p for part in parts for p in part]
    records = read_records(Path(rc.out) / policy)
    rate = aggregate_detection_rate([r for r in records if r.seed in set(seeds)])
    print(f"{policy}: {len(seeds)} episodes, aggregate detection rate {rate:.4f}")
    return [Path(p) for p in paths] + [rc.snapshot(Path(rc.out) / policy)]


def _load_dataset_dir(path: str | None):
    if path is None:
        raise UsageError("--dataset is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"dataset directory not found: {p}")
    records = read_records(p)
    if not records:
        raise UsageError(f"no trajectory files in {p}")
    return records


def cmd_train_filter(rc: RunConfig) -> list[Path]:
    records = _load_dataset_dir(rc.args["dataset"])
    fractions = tuple(float(x) for x in rc.args["fractions"].split(","))
    ds = build_filter_dataset(records, rc.env.t_max, fractions=fractions, split_seed=rc.seed)
    resume = rc.args.get("resume")
    model = load_filter(resume) if resume else make_filter(rc.args["model"], rc.filter_hyper.config, seed=rc.filter_hyper.seed)
    result = train_filter(ds, rc.args["model"], rc.filter_hyper, model=model)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{rc.args['model']}.ndg"
    result.model.save(ckpt)
    curve = out / f"{rc.args['model']}_curve.csv"
    with curve.open("w") as fh:
        fh.write("epoch,train_nll,val_nll\n")
        for k, (a, b) in enumerate(zip(result.train_nll, result.val_nll), start=1):
            fh.write(f"{k},{a:.6g},{b:.6g}\n")
    if result.val_nll:
        print(f"{rc.args['model']}: best epoch {result.best_epoch}, val NLL {min(result.val_nll):.4f}")
    else:
        print(f"{rc.args['model']}: no epochs run, parameters unchanged")
    return [ckpt, curve, rc.snapshot(out)]


def cmd_eval_filter(rc: RunConfig) -> list[Path]:
    records = _load_dataset_dir(rc.args["dataset"])
    ds = build_filter_dataset(records, rc.env.t_max, force_split="eval")
    X, y = ds.arrays("eval")
    if len(X) == 0:
        raise ContractError("empty evaluation set")
    name = Path(rc.args["dataset"]).name
    rows = []
    for ckpt in rc.args["checkpoint"]:
        model = load_filter(ckpt)
        rows.append({"name": model.kind, "dataset": name, **evaluate_filter(model, X, y)})
    t_max = load_filter(rc.args["checkpoint"][0]).cfg.t_max if rc.args["checkpoint"] else rc.env.t_max
    rows.append({"name": "motion", "dataset": name, "ADE": motion_ade(extrapolate_inputs(X, t_max), y)})
    out = Path(rc.out)
    path = out / "filter_metrics.csv"
    emit_report(rows, path)
    for row in rows:
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return [path, rc.snapshot(out)]


def cmd_train_marl(rc: RunConfig) -> list[Path]:
    mode = rc.args["mode"]
    ckpt = rc.args.get("filter")
    if mode == "filter" and not ckpt:
        raise UsageError("--mode filter needs --filter CHECKPOINT")
    filt = load_filter(ckpt) if ckpt else None
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    curve = out / f"reward_curve_{mode}.csv"
    result = train_marl(TerrainWorld(rc.env), filt if mode == "filter" else None, mode, rc.marl, curve_path=curve)
    pol = out / f"policy_{mode}.ndg"
    result.policies.save(pol)
    print(f"{mode}: {rc.marl.episodes} episodes in {result.seconds:.1f}s, last-10 mean reward {np.mean(result.episode_rewards[-10:]):.3f}")
    return [curve, pol, rc.snapshot(out)]


def _contender(spec: str, filt):
    if spec in SCRIPTED:
        return spec, scripted_controller(spec)
    if spec == "stationary":
        return spec, StationaryController()
    if spec in ("pmc_highest_prob", "pmc_search"):
        if filt is None:
            raise UsageError(f"{spec} needs --filter CHECKPOINT")
        return spec, FilterController(filter_predictor(filt), spec.removeprefix("pmc_"))
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"{spec!r} is neither a policy name nor a checkpoint file")
    ps = PolicySet.load(path)
    if ps.mode == "filter" and filt is None:
        raise UsageError(f"{spec} was trained with filter observations; pass --filter")
    return f"maddpg_{ps.mode}", PolicyController(ps, ObservationBuilder(ps.mode, filt if ps.mode == "filter" else None))


def cmd_eval_marl(rc: RunConfig) -> list[Path]:
    filt = load_filter(rc.args["filter"]) if rc.args.get("filter") else None
    world = TerrainWorld(rc.env)
    rows = []
    for spec in rc.args["policy"]:
        name, ctrl = _contender(spec, filt)
        res = evaluate_policies(ctrl, world, rc.args["eval_episodes"])
        rows.append({"name": name, **{k: v for k, v in res.items() if k != "episodes"}})
        print(f"{name}: detection {res['detection_rate']:.4f} +- {res['detection_rate_std']:.4f}")
    out = Path(rc.out)
    path = out / "marl_eval.csv"
    emit_report(rows, path)
    return [path, rc.snapshot(out)]


def cmd_bench(rc: RunConfig) -> list[Path]:
    rows = []
    rng = np.random.default_rng(rc.seed)
    batch = np.clip(rng.uniform(0, 1, size=(rc.args["batch"], 13)), 0, 1)
    for kind in ("pmc", "fc"):
        model = make_filter(kind, FilterConfig(t_max=rc.env.t_max), seed=rc.seed)
        rows.append({"name": kind, "RT": bench_runtime(model, batch)})
    world = TerrainWorld(rc.env)
    ctrl = scripted_controller("heuristic")
    world.reset(rc.seed)
    ctrl.reset(world, rc.seed)
    t0, n = time.perf_counter(), 0
    while not world.state.done and n < 200:
        world.step(ctrl.act(world))
        n += 1
    per_step = (time.perf_counter() - t0) / max(n, 1)
    out = Path(rc.out)
    path = out / "bench.csv"
    emit_report(rows, path)
    for row in rows:
        print(f"{row['name']}: forward {row['RT'] * 1e3:.3f} ms for batch {rc.args['batch']}")
    print(f"env step with heuristic team: {per_step * 1e3:.3f} ms")
    return [path, rc.snapshot(out)]


COMMANDS = {
    "gen-world": cmd_gen_world,
    "collect": cmd_collect,
    "train-filter": cmd_train_filter,
    "eval-filter": cmd_eval_filter,
    "train-marl": cmd_train_marl,
    "eval-marl": cmd_eval_marl,
    "bench": cmd_bench,
}


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "runs", "preset": None, "t_max": None, "verbose": False}


def build_parser() -> argparse.ArgumentParser:
    # Global flags may appear before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given earlier with its default.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="TOML or JSON file with [env], [filter], [marl] tables")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--t-max", dest="t_max", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pursuit-track", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", parents=[common], help="write terrain CSV and hideouts")
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--forest-fraction", dest="forest_fraction", type=float)

    p = sub.add_parser("collect", parents=[common], help="roll scripted episodes into JSONL records")
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed-start", dest="seed_start", type=int, default=0)

    p = sub.add_parser("train-filter", parents=[common], help="train a PMC or FC filter")
    p.add_argument("--model", choices=["pmc", "fc"], default="pmc")
    p.add_argument("--dataset", help="directory of JSONL records")
    p.add_argument("--fractions", default="0.7,0.1,0.2", help="train,val,eval split fractions")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval-filter", parents=[common], help="LL/ADE/CTP/DESV/RT for checkpoints")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--dataset", help="directory of JSONL records used whole as the eval set")

    p = sub.add_parser("train-marl", parents=[common], help="train a MADDPG team")
    p.add_argument("--mode", choices=["base", "detections", "filter"], default="base")
    p.add_argument("--filter", help="frozen filter checkpoint (filter mode)")
    p.add_argument("--episodes", dest="marl_episodes", type=int)

    p = sub.add_parser("eval-marl", parents=[common], help="evaluate learned or scripted teams")
    p.add_argument("--policy", action="append", required=True, help="policy name or checkpoint; repeatable")
    p.add_argument("--filter", help="filter checkpoint for filter-driven contenders")
    p.add_argument("--episodes", dest="eval_episodes", type=int, default=50)

    p = sub.add_parser("bench", parents=[common], help="filter forward and env step timings")
    p.add_argument("--batch", type=int, default=128)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        if rc.env.grid_size < 8:
            raise UsageError("grid size must be at least 8")
        written = COMMANDS[args.command](rc)
    except (UsageError, ConfigError) as e:
        print(f"pursuit-track {args.command}: {e}", file=sys.stderr)
        return 2
    except (ContractError, OSError, ValueError) as e:
        print(f"pursuit-track {args.command}: error: {e}", file=sys.stderr)
        return 1
    missing = [p for p in written if not Path(p).exists()]
    if missing:
        print(f"pursuit-track {args.command}: missing outputs {missing}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
