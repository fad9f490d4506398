import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2pagent import autodiff as ad
from i2pagent.agent import Agent, PolicyOutput, bc_loss
from i2pagent.autodiff.gradcheck import check_gradients
from i2pagent.embed import Encoders
from i2pagent.geometry import Se3Pose
from i2pagent.synth import SceneConfig, generate_scene
from i2pagent.state import hybrid_states_batch
from i2pagent.train import (
    METRICS_HEADER,
    Batch,
    ContextCache,
    GaeConfig,
    NonFiniteLossError,
    PpoConfig,
    RewardContext,
    TrainConfig,
    compute_gae,
    normalize_advantages,
    p2p_distance,
    ppo_losses,
    rollout_episode,
    step_reward,
    train_agent,
    update_agent,
)


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(SceneConfig(seed=s)) for s in (51, 52)]


@pytest.fixture(scope="module")
def encoders():
    return Encoders(seed=0)


# --- reward -----------------------------------------------------------------


def test_p2p_distance_vanishes_at_the_true_pose(scenes):
    ctx = RewardContext.from_scene(scenes[0])
    assert p2p_distance(ctx, scenes[0].gt_pose) < 1e-9
    off = Se3Pose(scenes[0].gt_pose.rotation, scenes[0].gt_pose.translation + [1.0, 0.0, 0.0])
    assert p2p_distance(ctx, off) == pytest.approx(1.0)


def test_step_reward_cases(scenes):
    ctx = RewardContext.from_scene(scenes[0])
    assert step_reward(2.0, 1.0, ctx) == 0.5
    assert step_reward(1.0, 2.0, ctx) == -0.5
    assert step_reward(1.0, 1.0, ctx) == 0.0


def test_reward_constants_are_validated():
    pts = np.ones((2, 3))
    with pytest.raises(ValueError):
        RewardContext(pts, pts, eps_pos=0.0)
    with pytest.raises(ValueError):
        RewardContext(pts, pts, eps_neg=0.1)


# --- rollouts ---------------------------------------------------------------


def test_rollout_records_every_step(scenes, encoders):
    agent = Agent(seed=0)
    before = (encoders.point_passes, encoders.image_passes)
    ep = rollout_episode(scenes[0], encoders, agent, "sample", seed=3, length=6)
    assert (encoders.point_passes - before[0], encoders.image_passes - before[1]) == (1, 1)
    assert len(ep) == 6 and len(ep.poses) == 7 and len(ep.errors) == 6
    assert [t.done for t in ep] == [False] * 5 + [True]
    for t in ep:
        assert t.state.shape == (256,)
        assert t.actions.shape == (3,) and t.expert.shape == (3,)
        assert np.all(t.log_probs <= 0) and t.reward in (-0.5, 0.0, 0.5)


def test_rollout_is_seeded(scenes, encoders):
    agent = Agent(seed=0)
    a = rollout_episode(scenes[0], encoders, agent, "sample", seed=4, length=4)
    b = rollout_episode(scenes[0], encoders, agent, "sample", seed=4, length=4)
    assert all(np.array_equal(x.actions, y.actions) for x, y in zip(a, b))
    assert a.poses[-1] == b.poses[-1]


def test_expert_rollout_registers(scenes, encoders):
    agent = Agent(seed=0)
    ep = rollout_episode(scenes[1], encoders, agent, "greedy", seed=5, length=12, policy="expert")
    assert ep.errors[-1].rre < 0.1 and ep.errors[-1].rte < 0.1
    assert sum(t.reward for t in ep) > 0


def test_full_expert_mix_executes_expert_actions(scenes, encoders):
    agent = Agent(seed=0)
    ep = rollout_episode(scenes[1], encoders, agent, "sample", seed=5, length=12, expert_mix=1.0)
    assert all(np.array_equal(t.actions, t.expert) for t in ep)
    assert ep.errors[-1].rre < 0.1 and ep.errors[-1].rte < 0.1
    for t in ep:
        with ad.no_grad():
            p = agent.forward(t.state).probabilities()
        np.testing.assert_allclose(t.log_probs, np.log(p[np.arange(3), t.expert]), rtol=1e-5)


def test_rollout_rejects_empty_episode(scenes, encoders):
    with pytest.raises(ValueError):
        rollout_episode(scenes[0], encoders, Agent(seed=0), length=0)


# --- GAE --------------------------------------------------------------------


def brute_force_gae(r, v, gamma, lam):
    n = len(r)
    vv = list(v) + [0.0]
    deltas = [r[t] + gamma * vv[t + 1] - vv[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** (l - t) * deltas[l] for l in range(t, n)) for t in range(n)])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=1, max_size=12),
    st.floats(0, 1),
    st.floats(0, 1),
    st.integers(0, 1000),
)
def test_gae_matches_brute_force(rewards, gamma, lam, seed):
    values = np.random.default_rng(seed).normal(size=len(rewards))
    adv, ret = compute_gae(rewards, values, GaeConfig(gamma, lam))
    np.testing.assert_allclose(adv, brute_force_gae(rewards, values, gamma, lam), atol=1e-9)
    np.testing.assert_allclose(ret, adv + values, atol=1e-12)


def test_gae_with_unit_discount_is_return_minus_value():
    r = np.array([0.5, -0.5, 0.5, 0.0])
    v = np.array([0.1, 0.2, -0.3, 0.4])
    adv, ret = compute_gae(r, v, GaeConfig(1.0, 1.0))
    np.testing.assert_allclose(ret, np.cumsum(r[::-1])[::-1], atol=1e-12)


def test_gae_config_validation():
    with pytest.raises(ValueError):
        GaeConfig(gamma=1.5)
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0])


# --- PPO --------------------------------------------------------------------


def make_batch(rng, B=6, S=3, A=11):
    logits = rng.normal(size=(B, S, A))
    actions = rng.integers(0, A, size=(B, S))
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    old = np.take_along_axis(logp, actions[..., None], -1)[..., 0]
    return logits, Batch(actions, old, rng.normal(size=B), rng.normal(size=B), rng.integers(0, A, size=(B, S)))


def test_policy_loss_at_unit_ratio_is_minus_mean_advantage():
    rng = np.random.default_rng(0)
    logits, batch = make_batch(rng)
    with ad.precision(np.float64):
        out = PolicyOutput(ad.Tensor(logits), ad.Tensor(np.zeros(6)))
        raw = ppo_losses(batch, out, PpoConfig(), normalize=False)
        norm = ppo_losses(batch, out, PpoConfig())
    assert raw.policy.item() == pytest.approx(-batch.advantages.mean())
    assert abs(norm.policy.item()) < 1e-9
    assert raw.value.item() == pytest.approx(np.mean(batch.returns**2))


def test_clipped_ratio_has_no_policy_gradient():
    rng = np.random.default_rng(1)
    logits, batch = make_batch(rng, B=1)
    batch.old_log_probs = batch.old_log_probs - 1.0  # ratio e^3 far above 1 + clip
    batch.advantages = np.array([1.0])
    with ad.precision(np.float64):
        t = ad.Tensor(logits, requires_grad=True)
        loss = ppo_losses(batch, PolicyOutput(t, ad.Tensor(np.zeros(1))), PpoConfig(), normalize=False)
        loss.policy.backward()
    assert loss.policy.item() == pytest.approx(-1.2)
    np.testing.assert_allclose(t.grad, 0.0, atol=1e-12)


def test_entropy_of_uniform_policy():
    _, batch = make_batch(np.random.default_rng(2))
    out = PolicyOutput(ad.Tensor(np.zeros((6, 3, 11))), ad.Tensor(np.zeros(6)))
    assert ppo_losses(batch, out).entropy.item() == pytest.approx(np.log(11), abs=1e-6)


def test_bc_only_config_reduces_to_cloning_loss():
    rng = np.random.default_rng(3)
    logits, batch = make_batch(rng)
    out = PolicyOutput(ad.Tensor(logits), ad.Tensor(rng.normal(size=6)))
    losses = ppo_losses(batch, out, PpoConfig.bc_only())
    assert losses.total.item() == pytest.approx(losses.bc.item(), rel=1e-6)


def test_normalized_advantages():
    adv = normalize_advantages([1.0, 2.0, 3.0, 6.0])
    assert adv.mean() == pytest.approx(0.0, abs=1e-12) and adv.std() == pytest.approx(1.0)
    np.testing.assert_allclose(normalize_advantages([2.0, 2.0]), 0.0)


@pytest.mark.parametrize("part", ["policy", "value", "entropy", "bc", "total"])
def test_ppo_gradients_match_finite_differences(part):
    rng = np.random.default_rng(4)
    logits, batch = make_batch(rng, B=4, S=2, A=5)
    batch.old_log_probs = batch.old_log_probs + rng.normal(scale=0.05, size=batch.old_log_probs.shape)
    values = rng.normal(size=4)

    def fn(t):
        return getattr(ppo_losses(batch, PolicyOutput(t[0], t[1]), PpoConfig()), part)

    assert check_gradients(fn, [logits, values], h=1e-6) < 1e-5


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=0.0)
    with pytest.raises(ValueError):
        PpoConfig(epochs=0)


# --- training loop ----------------------------------------------------------


def test_train_agent_writes_metrics(tmp_path, scenes, encoders):
    agent = Agent(seed=0)
    path = tmp_path / "metrics.csv"
    config = TrainConfig(iterations=2, episodes_per_iteration=2, validate_every=1)
    rows = train_agent(agent, encoders, scenes, scenes[:1], config, PpoConfig(epochs=1, minibatch=8, episode_length=3), metrics_path=path)
    assert len(rows) == 2
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == METRICS_HEADER
    assert len(table) == 3
    assert all(np.isfinite(float(x)) for x in table[1][:7])
    assert 0.0 <= rows[-1]["val_rr"] <= 1.0


def test_train_agent_is_seeded(scenes, encoders):
    config = TrainConfig(iterations=2, episodes_per_iteration=2, expert_mix=0.5, expert_mix_decay=0.5)
    ppo = PpoConfig(epochs=1, minibatch=4, episode_length=3)
    a = train_agent(Agent(seed=2), encoders, scenes, (), config, ppo, seed=9)
    b = train_agent(Agent(seed=2), encoders, scenes, (), config, ppo, seed=9)
    assert len(a) == len(b) == 2
    for x, y in zip(a, b):
        assert x.keys() == y.keys()
        assert np.array_equal(list(x.values()), list(y.values()), equal_nan=True)


@pytest.mark.parametrize("kw", [dict(expert_mix=1.5), dict(expert_mix=-0.1), dict(expert_mix_decay=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_cloning_updates_fit_collected_episodes(scenes, encoders):
    agent = Agent(seed=1)
    contexts = ContextCache(encoders, scenes)
    episodes = [
        rollout_episode(s, encoders, agent, "sample", seed=i, length=5, context=contexts[i], scene_index=i)
        for i, s in enumerate(scenes)
    ]
    trans = [t for ep in episodes for t in ep]
    ctxs = [contexts[t.scene_index] for t in trans]
    poses = [t.pose for t in trans]
    labels = np.stack([t.expert for t in trans])

    def cloning_loss():
        with ad.no_grad():
            return bc_loss(agent.forward(hybrid_states_batch(agent.state_encoder, ctxs, poses)), labels).item()

    before = cloning_loss()
    rng = np.random.default_rng(0)
    for _ in range(5):
        update_agent(agent, contexts, episodes, PpoConfig.bc_only(epochs=2, minibatch=5), GaeConfig(), 3e-3, 0.9, 5.0, rng)
    assert cloning_loss() < 0.5 * before


def test_non_finite_loss_is_reported(scenes, encoders):
    agent = Agent(seed=0)
    agent.value_head.b.data[...] = np.nan
    config = TrainConfig(iterations=1, episodes_per_iteration=1)
    with pytest.raises(NonFiniteLossError) as info:
        train_agent(agent, encoders, scenes, (), config, PpoConfig(epochs=1, minibatch=4, episode_length=2))
    assert "losses" in info.value.snapshot


def test_train_agent_needs_scenes(encoders):
    with pytest.raises(ValueError):
        train_agent(Agent(seed=0), encoders, [], config=TrainConfig(iterations=1))
