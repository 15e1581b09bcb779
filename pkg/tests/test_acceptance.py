"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the "acceptance"
section of the pytest summary. The long-running checks (filter ordering
and the MARL ablation) train at desk scale and take most of an hour on a
single core.
"""

import csv
import math
import os
import shutil
import time

import numpy as np
import pytest

from oracles import dijkstra_cost
from pursuit_track import ndgrad as nd
from pursuit_track.cli import main as cli_main
from pursuit_track.datastore import aggregate_detection_rate, build_filter_dataset, collect_dataset
from pursuit_track.evader import astar_plan
from pursuit_track.filtering import (
    IDEAL_ONE_SIGMA,
    FCFilter,
    FilterConfig,
    FilterHyper,
    MixturePrediction,
    PMCFilter,
    build_filter_array,
    disk_probability,
    evaluate_filter,
    extrapolate_inputs,
    filter_checksum,
    metric_desv,
    nll_loss,
    nll_tensor,
    train_filter,
)
from pursuit_track.maddpg import ObservationBuilder, PolicyController, PolicySet, TrainConfig, evaluate_policies, train_marl
from pursuit_track.ndgrad import Tensor
from pursuit_track.policies import HeuristicController, RandomController
from pursuit_track.terrain import generate_terrain
from pursuit_track.world import Detection, EnvConfig, TerrainWorld

T_MAX = 300
SEEDS = (0, 1, 2)


def desk_world():
    return TerrainWorld(EnvConfig(t_max=T_MAX))


def _jitter_biases(module, rng):
    # Zero biases can put a relu exactly on its kink, where central
    # differences and the subgradient legitimately disagree.
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data += rng.normal(scale=0.1, size=p.shape)


def _fuzz_inputs(rng, n):
    X = rng.uniform(0.0, 1.0, size=(n, 13))
    X[:, [5, 6, 10, 11]] = rng.normal(scale=0.01, size=(n, 4))
    return X


# -- 1: gradient checks ---------------------------------------------------------


def test_criterion_01_grad_check_all_architectures(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = FilterConfig(t_max=T_MAX)
    pmc, fc = PMCFilter(cfg, seed=1), FCFilter(cfg, seed=1)
    for m in (pmc, fc):
        _jitter_biases(m, rng)
    X, y = _fuzz_inputs(rng, 4), rng.uniform(size=(4, 2))
    coef = [rng.normal(size=s) for s in ((4, 8), (4, 8, 2), (4, 8, 2))]
    emb = np.abs(rng.normal(size=(4, cfg.embed)))

    def decoder_loss():
        log_w, mu, sigma = pmc.decoder(Tensor(emb))
        return (log_w * coef[0]).sum() + (mu * coef[1]).sum() + (sigma * coef[2]).sum()

    world = desk_world()
    world.reset(0)
    obs_dim = ObservationBuilder("filter", pmc).obs_dim(world)
    n = len(world.learnable)
    ps = PolicySet([obs_dim] * n, [0.01] * n, TrainConfig())
    actor, critic = ps.actors[0], ps.critics[0]
    for net in (actor, critic):
        _jitter_biases(net, rng)
    obs = rng.normal(size=(4, obs_dim))
    joint = rng.normal(size=(4, n * obs_dim + 2 * n))

    checks = {
        "prior": lambda: pmc.prior(Tensor(X[:, :3])).sum(),
        "motion": lambda: pmc.motion(Tensor(extrapolate_inputs(X, T_MAX))).sum(),
        "confidence": lambda: pmc.confidence(Tensor(X * pmc.input_scale())).sum(),
        "decoder": decoder_loss,
        "fc": lambda: fc.trunk(Tensor(X * fc.input_scale())).sum(),
        "actor": lambda: actor(Tensor(obs)).sum(),
        "critic": lambda: critic(Tensor(joint)).sum(),
        "nll_pmc": lambda: nll_tensor(pmc, X, y),
        "nll_fc": lambda: nll_tensor(fc, X, y),
    }
    owners = {"prior": pmc.prior, "motion": pmc.motion, "confidence": pmc.confidence, "decoder": pmc.decoder,
              "fc": fc.trunk, "actor": actor, "critic": critic, "nll_pmc": pmc, "nll_fc": fc}
    errors = {k: nd.grad_check(fn, params=owners[k].parameters()) for k, fn in checks.items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    verdict(1, "grad check", ok, f"worst {worst} rel err {errors[worst]:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# -- 2: forward fuzz ------------------------------------------------------------


def test_criterion_02_forward_fuzz(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    X = _fuzz_inputs(rng, 10_000)
    worst_sum, min_sigma, finite = 0.0, np.inf, True
    for model in (PMCFilter(FilterConfig(t_max=T_MAX), seed=3), FCFilter(FilterConfig(t_max=T_MAX), seed=3)):
        pred = model.predict(X)
        worst_sum = max(worst_sum, float(np.max(np.abs(pred.weights.sum(axis=1) - 1.0))))
        min_sigma = min(min_sigma, float(pred.scales.min()))
        finite &= all(np.all(np.isfinite(a)) for a in (pred.weights, pred.means, pred.scales))
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-6 and min_sigma >= 1e-3 and finite and elapsed < 60
    verdict(2, "forward fuzz", ok,
            f"max |sum w - 1| {worst_sum:.1e}, min sigma {min_sigma:.4g}, finite {finite}, {elapsed:.1f}s")


# -- 3: analytic oracles ----------------------------------------------------------


def test_criterion_03_analytic_oracles(verdict):
    t0 = time.perf_counter()
    k = 8
    w = np.zeros(k)
    w[0] = 1.0

    def single(mu, sigma):
        return MixturePrediction(w, np.tile(mu, (k, 1)), np.tile(sigma, (k, 1)))

    nll_err = abs(float(nll_loss(single([0.4, 0.6], [1.0, 1.0]), [0.4, 0.6])) - math.log(2 * math.pi))

    disk_err = 0.0
    for delta in (0.01, 0.05, 0.2):
        p = disk_probability(single([0.5, 0.5], [delta, delta]), [0.5, 0.5], delta)[0]
        disk_err = max(disk_err, abs(p - IDEAL_ONE_SIGMA))

    rng = np.random.default_rng(2)
    n = 100_000
    means = rng.uniform(0.2, 0.8, size=(n, 2))
    scales = rng.uniform(0.01, 0.1, size=(n, 2))
    weights = np.zeros((n, k))
    weights[:, 0] = 1.0
    pred = MixturePrediction(weights, np.repeat(means[:, None], k, axis=1), np.repeat(scales[:, None], k, axis=1))
    desv = metric_desv(pred, means + scales * rng.normal(size=(n, 2)))

    elapsed = time.perf_counter() - t0
    ok = nll_err <= 1e-9 and disk_err <= 1e-3 and abs(desv) <= 0.01 and elapsed < 60
    verdict(3, "analytic oracles", ok, f"NLL err {nll_err:.1e}, disk err {disk_err:.1e}, DESV {desv:+.4f}")


# -- 4: motion exactness ----------------------------------------------------------


def test_criterion_04_motion_exactness(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        pos = rng.uniform(0.1, 0.9, size=2)
        vel = rng.uniform(-0.01, 0.01, size=2)
        k_hat = int(rng.integers(0, T_MAX // 2))
        track = [pos]
        for _ in range(T_MAX):
            track.append(np.clip(track[-1] + vel, 0.0, 1.0))
        det = Detection(k_hat, tuple(track[k_hat]), tuple(vel), 0)
        ks = np.arange(k_hat, T_MAX + 1)
        X = np.array([build_filter_array([det], int(k), (0.5, 0.5), T_MAX) for k in ks])
        err = np.abs(extrapolate_inputs(X, T_MAX) - np.array([track[k] for k in ks]))
        worst = max(worst, float(err.max()))
    verdict(4, "motion exactness", worst <= 1e-12, f"max error {worst:.1e} over 50 scripted tracks")


# -- 5: planner oracle -------------------------------------------------------------


def test_criterion_05_astar_matches_dijkstra(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        terrain = generate_terrain(1000 + i, size=32)
        s, g = rng.uniform(size=2), rng.uniform(size=2)
        w_v = float(rng.uniform(0.0, 5.0))
        _, cost = astar_plan(terrain, s, g, w_v, return_cost=True)
        ref = dijkstra_cost(terrain.visibility, terrain.cell_of(s), terrain.cell_of(g), w_v)
        worst = max(worst, abs(cost - ref) / max(ref, 1e-300))
    elapsed = time.perf_counter() - t0
    # Both sides sum the same edge costs in different orders.
    ok = worst <= 1e-12 and elapsed < 60
    verdict(5, "A* vs Dijkstra", ok, f"max rel diff {worst:.1e} on 100 terrains, {elapsed:.1f}s")


# -- shared desk-scale data ----------------------------------------------------------


@pytest.fixture(scope="module")
def desk_records():
    t0 = time.perf_counter()
    cfg = EnvConfig(t_max=T_MAX)
    world = TerrainWorld(cfg)
    out = {}
    for policy in ("random", "heuristic"):
        out[policy] = (
            collect_dataset(cfg, policy, range(0, 60), world=world),
            collect_dataset(cfg, policy, range(500, 540), world=world),
        )
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def filter_runs(desk_records):
    """PMC and FC trained on each dataset with three seeds."""
    records, collect_s = desk_records
    t0 = time.perf_counter()
    runs = {}
    for policy, (train_recs, eval_recs) in records.items():
        ds = build_filter_dataset(train_recs, T_MAX, fractions=(0.85, 0.15, 0.0))
        Xe, ye = build_filter_dataset(eval_recs, T_MAX, force_split="eval").arrays("eval")
        for seed in SEEDS:
            for kind in ("pmc", "fc"):
                res = train_filter(ds, kind, FilterHyper(seed=seed, config=FilterConfig(t_max=T_MAX)))
                runs[policy, kind, seed] = (res.model, evaluate_filter(res.model, Xe, ye))
    return runs, collect_s + time.perf_counter() - t0


# -- 6: filter ordering ---------------------------------------------------------------


def test_criterion_06_pmc_beats_fc(filter_runs, verdict):
    runs, seconds = filter_runs
    parts, ok = [], seconds < 20 * 60
    for policy in ("random", "heuristic"):
        med = {
            (kind, m): float(np.median([runs[policy, kind, s][1][m] for s in SEEDS]))
            for kind in ("pmc", "fc")
            for m in ("LL", "ADE")
        }
        ll_ok = med["pmc", "LL"] >= med["fc", "LL"]
        ade_ok = med["pmc", "ADE"] <= med["fc", "ADE"]
        ok &= ll_ok and ade_ok
        parts.append(
            f"{policy}: LL {med['pmc', 'LL']:.3f} vs {med['fc', 'LL']:.3f} [{'ok' if ll_ok else 'x'}], "
            f"ADE {med['pmc', 'ADE']:.4f} vs {med['fc', 'ADE']:.4f} [{'ok' if ade_ok else 'x'}]"
        )
    verdict(6, "PMC vs FC medians", ok, "; ".join(parts) + f"; {seconds:.0f}s")


# -- 7: dataset contrast ----------------------------------------------------------------


def test_criterion_07_heuristic_data_has_more_detections(desk_records, verdict):
    records, seconds = desk_records
    rates = {p: aggregate_detection_rate(tr + ev) for p, (tr, ev) in records.items()}
    n = {p: len(tr) + len(ev) for p, (tr, ev) in records.items()}
    ok = rates["heuristic"] > rates["random"] and min(n.values()) >= 100 and seconds < 5 * 60
    verdict(7, "dataset contrast", ok,
            f"heuristic {rates['heuristic']:.4f} vs random {rates['random']:.4f} over {min(n.values())} episodes each, "
            f"{seconds:.0f}s")


# -- 8 and 9: MARL ablation and gradient cutoff ------------------------------------------


@pytest.fixture(scope="module")
def marl_runs(filter_runs):
    runs, _ = filter_runs
    pmc = runs["heuristic", "pmc", 0][0]
    before = filter_checksum(pmc)
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        for mode in ("base", "filter"):
            f = pmc if mode == "filter" else None
            res = train_marl(desk_world(), f, mode, TrainConfig(episodes=300, seed=seed))
            ev = evaluate_policies(PolicyController(res.policies, ObservationBuilder(mode, f)), desk_world(), 50)
            out[mode, seed] = (res, ev["detection_rate"])
    return out, pmc, before, time.perf_counter() - t0


def test_criterion_08_filter_augmented_marl(marl_runs, verdict):
    out, _, _, seconds = marl_runs
    base = float(np.median([out["base", s][1] for s in SEEDS]))
    filt = float(np.median([out["filter", s][1] for s in SEEDS]))
    ok = filt >= 1.5 * base and seconds <= 60 * 60
    verdict(8, "MARL ablation", ok,
            f"median detection filter {filt:.4f} vs base {base:.4f} (need >= 1.5x), {seconds / 60:.1f} min (<= 60)")


def test_criterion_09_filter_untouched_by_marl(marl_runs, verdict):
    out, pmc, before, _ = marl_runs
    recorded = {out["filter", s][0].filter_checksum for s in SEEDS}
    ok = filter_checksum(pmc) == before and recorded == {before}
    verdict(9, "gradient cutoff", ok, f"checksum {before[:16]}... unchanged across {len(SEEDS)} runs: {ok}")


# -- 10: determinism --------------------------------------------------------------------


def _pipeline(root):
    common = ["--t-max", "60", "--seed", "4"]
    steps = [
        ["gen-world", "--out", "world"],
        ["collect", "--policy", "heuristic", "--episodes", "10", "--out", "data"],
        ["collect", "--policy", "random", "--episodes", "10", "--out", "data"],
        ["collect", "--policy", "heuristic", "--episodes", "4", "--seed-start", "100", "--out", "evalset"],
        ["train-filter", "--model", "pmc", "--dataset", "data/heuristic", "--max-epochs", "4", "--out", "filters"],
        ["train-filter", "--model", "fc", "--dataset", "data/heuristic", "--max-epochs", "4", "--out", "filters"],
        ["eval-filter", "--checkpoint", "filters/pmc.ndg", "--checkpoint", "filters/fc.ndg",
         "--dataset", "evalset/heuristic", "--out", "report"],
        ["train-marl", "--mode", "base", "--episodes", "4", "--out", "marl"],
        ["train-marl", "--mode", "filter", "--filter", "filters/pmc.ndg", "--episodes", "4", "--out", "marl"],
        ["eval-marl", "--policy", "heuristic", "--policy", "marl/policy_filter.ndg", "--filter", "filters/pmc.ndg",
         "--episodes", "4", "--out", "report"],
    ]
    cwd = os.getcwd()
    os.chdir(root)
    try:
        for argv in steps:
            assert cli_main(argv + common) == 0, argv
    finally:
        os.chdir(cwd)


def _without_runtime(path):
    # The RT column is a wall-clock benchmark and cannot repeat bitwise.
    rows = list(csv.DictReader(path.open()))
    return [{k: v for k, v in r.items() if k != "RT"} for r in rows]


def test_criterion_10_pipeline_determinism(tmp_path, verdict):
    t0 = time.perf_counter()
    work = tmp_path / "run"
    work.mkdir()
    _pipeline(work)
    shutil.move(work, tmp_path / "first")
    work.mkdir()
    _pipeline(work)
    first = sorted(p.relative_to(tmp_path / "first") for p in (tmp_path / "first").rglob("*") if p.is_file())
    second = sorted(p.relative_to(work) for p in work.rglob("*") if p.is_file())
    differing = []
    for rel in first:
        a, b = tmp_path / "first" / rel, work / rel
        if rel.name == "filter_metrics.csv":
            same = _without_runtime(a) == _without_runtime(b)
        else:
            same = a.read_bytes() == b.read_bytes()
        if not same:
            differing.append(str(rel))
    elapsed = time.perf_counter() - t0
    ok = first == second and not differing and elapsed < 10 * 60
    verdict(10, "determinism", ok,
            f"{len(first)} files compared, differing {differing or 'none'}, {elapsed:.0f}s")


# -- 11: scripted baselines ---------------------------------------------------------------


def test_criterion_11_heuristic_beats_random(verdict):
    t0 = time.perf_counter()
    heu = evaluate_policies(HeuristicController(), desk_world(), 50)["detection_rate"]
    rnd = evaluate_policies(RandomController(), desk_world(), 50)["detection_rate"]
    elapsed = time.perf_counter() - t0
    ok = heu > rnd and elapsed < 5 * 60
    verdict(11, "scripted baselines", ok, f"heuristic {heu:.4f} vs random {rnd:.4f} on 50 episodes, {elapsed:.0f}s")
