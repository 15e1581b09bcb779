import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pursuit_track import ndgrad as nd
from pursuit_track.evader import EvaderParams
from pursuit_track.filtering import FilterConfig, MixturePrediction, PMCFilter, filter_checksum
from pursuit_track.maddpg import (
    Batch,
    ObservationBuilder,
    PolicyController,
    PolicySet,
    ReplayBuffer,
    TrainConfig,
    Transition,
    act,
    actor_loss,
    actor_update,
    augment_observation,
    critic_update,
    evaluate_policies,
    soft_update,
    td_target,
    train_marl,
)
from pursuit_track.ndgrad import ContractError, MLP, Tensor
from pursuit_track.policies import StationaryController
from pursuit_track.terrain import ConfigError
from pursuit_track.world import EnvConfig, TerrainWorld, episode_metrics, helicopter, rollout, search_party

SMALL = dict(actor_hidden=(16, 16), critic_hidden=(32, 16), batch_size=32)


def _pred(k=8):
    rng = np.random.default_rng(0)
    w = np.zeros(k)
    w[0] = 1.0
    means = np.tile([0.5, 0.5], (k, 1))
    return MixturePrediction(w, means, rng.uniform(0.01, 0.1, size=(k, 2)))


def test_augment_layouts():
    o_b = np.arange(9.0)
    assert len(augment_observation(o_b, "base")) == 9
    x = augment_observation(o_b, "filter", _pred(), x_s=(0.2, 0.1))
    assert len(x) == 9 + 40
    assert_allclose(x[10:12], [0.3, 0.4])
    assert len(augment_observation(o_b, "detections", filter_input=np.zeros(13))) == 9 + 10
    with pytest.raises(ContractError):
        augment_observation(o_b, "filter", None, x_s=(0, 0))


def test_observation_builder_widths():
    w = TerrainWorld(EnvConfig(t_max=20))
    w.reset(0)
    f = PMCFilter(FilterConfig(t_max=20))
    dims = {m: ObservationBuilder(m, f if m == "filter" else None)(w).shape for m in ("base", "detections", "filter")}
    assert dims["base"] == (3, 9)
    assert dims["detections"] == (3, 19)
    assert dims["filter"] == (3, 49)
    with pytest.raises(ConfigError):
        ObservationBuilder("filter", None)


def test_act_contracts():
    actor = MLP([5, 8, 2], np.random.default_rng(0), out_act="tanh")
    o = np.ones(5)
    assert_array_equal(act(actor, o, 0.0, None, 0.1), act(actor, o, 0.0, None, 0.1))
    a = [act(actor, o, 0.5, np.random.default_rng(1), 0.1) for _ in range(2)]
    assert_array_equal(a[0], a[1])
    assert np.linalg.norm(act(actor, o, 5.0, np.random.default_rng(2), 0.1)) <= 0.1 + 1e-15
    with pytest.raises(ContractError):
        act(actor, np.ones(4), 0.0, None, 0.1)


def test_td_target_examples():
    assert_allclose(td_target(1.0, 0.9, 2.0, 0), 2.8)
    assert td_target(1.0, 0.9, 2.0, 1) == 1.0
    assert td_target(1.0, 0.0, 2.0, 0) == 1.0
    assert td_target(1.0, 0.9, np.nan, 1) == 1.0


def test_replay_buffer_eviction_and_sampling():
    buf = ReplayBuffer(3, 1, 1, seed=0)
    with pytest.raises(ContractError):
        buf.sample(2)
    for k in range(5):
        buf.add(Transition(np.full((1, 1), k), np.zeros((1, 2)), np.zeros(1), np.zeros((1, 1)), False))
    assert len(buf) == 3
    assert sorted(buf.obs[:, 0, 0]) == [2.0, 3.0, 4.0]
    b = buf.sample(200)
    assert set(b.obs[:, 0, 0]) == {2.0, 3.0, 4.0}
    with pytest.raises(ContractError):
        buf.add(Transition(np.zeros((1, 1)), np.zeros((1, 2)), np.array([np.inf]), np.zeros((1, 1)), False))


def test_soft_update_rules():
    rng = np.random.default_rng(0)
    a, b = MLP([3, 4, 1], rng), MLP([3, 4, 1], rng)
    before = a.state_dict()
    soft_update(a, b, 0.0)
    for k, v in a.state_dict().items():
        assert_array_equal(v, before[k])
    soft_update(a, b, 1.0)
    for k, v in a.state_dict().items():
        assert_array_equal(v, b.state_dict()[k])
    soft_update(a, b, 0.3)
    for k, v in a.state_dict().items():
        assert_array_equal(v, b.state_dict()[k])


def _policies(n=2, d=4, **kw):
    cfg = TrainConfig(**{**SMALL, **kw})
    return PolicySet([d] * n, [0.01] * n, cfg)


def _batch(n=2, d=4, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(
        rng.normal(size=(size, n, d)),
        rng.uniform(-1, 1, size=(size, n, 2)),
        rng.normal(size=(size, n)),
        rng.normal(size=(size, n, d)),
        (rng.random(size) < 0.1).astype(float),
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0)


def test_critic_fixed_point_has_zero_loss():
    ps = _policies(gamma=0.0)
    b = _batch()
    with nd.no_grad():
        q = ps.critics[0](Tensor(np.hstack([b.obs.reshape(32, -1), b.actions.reshape(32, -1)]))).data[:, 0]
    b.rewards[:, 0] = q
    before = ps.critics[0].state_dict()
    opt = nd.Adam(ps.critics[0].parameters(), lr=1e-3)
    assert critic_update(ps, b, 0, opt) == 0.0
    for k, v in ps.critics[0].state_dict().items():
        assert_array_equal(v, before[k])


def test_critic_loss_non_negative_and_grad_checked():
    ps = _policies()
    b = _batch()
    assert critic_update(ps, b, 1, nd.Adam(ps.critics[1].parameters())) >= 0.0
    x = Tensor(np.hstack([b.obs.reshape(32, -1), b.actions.reshape(32, -1)]))
    y = Tensor(np.random.default_rng(1).normal(size=(32, 1)))

    def loss():
        d = ps.critics[1](x) - y
        return (d * d).mean()

    assert nd.grad_check(loss, params=ps.critics[1].parameters()) < 1e-4
    with pytest.raises(ContractError):
        critic_update(ps, _batch(size=0), 0, nd.Adam(ps.critics[0].parameters()))


def test_actor_update_isolation_and_ascent():
    ps = _policies(lr_actor=1e-4)
    b = _batch()
    critic_before = [c.state_dict() for c in ps.critics]
    q_before = -actor_loss(ps, b, 0).item()
    norm = actor_update(ps, b, 0, nd.Adam(ps.actors[0].parameters(), lr=1e-4))
    assert norm > 0
    for c, before in zip(ps.critics, critic_before):
        for k, v in c.state_dict().items():
            assert_array_equal(v, before[k])
    assert -actor_loss(ps, b, 0).item() >= q_before


def test_actor_gradient_through_critic():
    ps = _policies()
    b = _batch(size=8)
    assert nd.grad_check(lambda: actor_loss(ps, b, 1), params=ps.actors[1].parameters()) < 1e-4


def test_policy_checkpoint_round_trip(tmp_path):
    ps = _policies()
    ps.save(tmp_path / "p.ndg")
    back = PolicySet.load(tmp_path / "p.ndg")
    o = np.ones(4)
    assert_array_equal(back.policy(0, o), ps.policy(0, o))
    assert back.config == ps.config


def _toy_env():
    # One fast searcher and a parked evader at a fixed spot: the optimal
    # policy is a fixed function of the agent's own position.
    cfg = EnvConfig(
        agents=[helicopter()],
        t_max=30,
        evader=EvaderParams(max_speed=0.0),
        evader_start_box=(0.5, 0.5, 0.5, 0.5),
    )
    return TerrainWorld(cfg)


def test_toy_benchmark_learns():
    tc = TrainConfig(episodes=200, seed=1, lr_actor=1e-3, update_interval=1, **SMALL)
    r = np.array(train_marl(_toy_env(), None, "base", tc).episode_rewards)
    assert r[190:].mean() > r[:10].mean()


def test_training_is_deterministic_and_filter_untouched(tmp_path):
    cfg = EnvConfig(t_max=12)
    f = PMCFilter(FilterConfig(t_max=12), seed=2)
    chk = filter_checksum(f)
    tc = TrainConfig(episodes=6, seed=3, **SMALL)
    a = train_marl(TerrainWorld(cfg), f, "filter", tc, curve_path=tmp_path / "a.csv")
    b = train_marl(lambda: TerrainWorld(cfg), f, "filter", tc, curve_path=tmp_path / "b.csv")
    assert a.episode_rewards == b.episode_rewards
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 7
    assert filter_checksum(f) == chk == a.filter_checksum
    with pytest.raises(ConfigError):
        train_marl(TerrainWorld(cfg), None, "filter", tc)


class _Glued:
    """Parks every learnable agent on the evader each step."""

    def reset(self, world, seed):
        pass

    def act(self, world):
        s = world.state
        target = s.evader_pos + s.evader_vel
        return np.array([target - s.agent_pos[i] for i in world.learnable])


def test_evaluate_scripted_extremes():
    cfg = EnvConfig(t_max=30, agents=[helicopter()], evader_start_box=(0.05, 0.05, 0.1, 0.1),
                    agent_start_box=(0.05, 0.05, 0.1, 0.1))
    out = evaluate_policies(_Glued(), TerrainWorld(cfg), n_episodes=3)
    assert out["detection_rate"] == 1.0
    far = EnvConfig(t_max=30, agents=[search_party()], agent_start_box=(0.95, 0.95, 1.0, 1.0))
    out = evaluate_policies(StationaryController(), TerrainWorld(far), n_episodes=3)
    assert out["detection_rate"] == 0.0


def test_evaluate_matches_recomputation():
    w = TerrainWorld(EnvConfig(t_max=20))
    ps = PolicySet([9, 9, 9], [w.config.agents[i].max_speed for i in w.learnable], TrainConfig(**SMALL))
    ctrl = PolicyController(ps, ObservationBuilder("base"), noise_scale=0.3)
    out = evaluate_policies(ctrl, w, n_episodes=4, seed_base=10)
    rates = [episode_metrics(rollout(w, ctrl, 10 + k), w.learnable)["detection_rate"] for k in range(4)]
    assert_allclose(out["detection_rate"], np.mean(rates))
    assert_allclose(out["detection_rate_std"], np.std(rates))
    assert [e["detection_rate"] for e in out["episodes"]] == rates
