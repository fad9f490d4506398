"""Acceptance criteria, one test per criterion.

Each test records its outcome through ``conftest.criterion`` so the session
ends with one PASS/FAIL line per criterion. The training criteria share one
pretrained encoder pair and chain behavioural cloning into joint training.
"""

import copy
import math
import time

import numpy as np
import pytest

from conftest import criterion
from test_autodiff import LAYER_CASES

from i2pagent import autodiff as ad
from i2pagent.agent import (
    ActionSpec,
    Agent,
    PolicyOutput,
    apply_actions,
    bc_loss,
    disentangled_residual,
    expert_for_pose,
    residual_components,
)
from i2pagent.autodiff.gradcheck import check_gradients
from i2pagent.embed import (
    Encoders,
    PretrainConfig,
    alignment_margin,
    circle_loss,
    circle_loss_from_distances,
    frustum_accuracy,
    pretrain_encoders,
    weighted_bce,
)
from i2pagent.evalcli import RecallSpec, evaluate
from i2pagent.geometry import (
    Se3Pose,
    back_project_many,
    compose_disentangled,
    frustum_mask,
    project_points,
    yaw_rotation,
)
from i2pagent.state import (
    EpisodeCache,
    EpisodeContext,
    StateEncoder,
    build_hybrid_state,
    build_state_2d,
    transform_points,
)
from i2pagent.synth import PerturbSpec, SceneConfig, generate_scenes, perturb_pose
from i2pagent.train import (
    Batch,
    GaeConfig,
    PpoConfig,
    RewardContext,
    TrainConfig,
    compute_gae,
    p2p_distance,
    ppo_losses,
    rollout_episode,
    step_reward,
    train_agent,
    validate,
)

PRETRAIN_SEEDS = range(0, 50)
PRETRAIN_HELD_OUT = range(1000, 1010)
TRAIN_SEEDS = range(2000, 2200)
HELD_OUT_SEEDS = range(5000, 5050)
BC_BUDGET = 30 * 60.0
TOTAL_BUDGET = 2 * 3600.0
BC_CONFIG = dict(
    episodes_per_iteration=32, lr=1e-3, beta1=0.9, validate_every=10**9, expert_mix=0.5, expert_mix_decay=0.98
)
BC_PPO = PpoConfig.bc_only(epochs=4, minibatch=64)
JOINT_CONFIG = dict(episodes_per_iteration=32, lr=3e-4, beta1=0.98, validate_every=10**9)
JOINT_PPO = PpoConfig(epochs=4, minibatch=64)

CLOCK = {"start": time.perf_counter()}


# --- shared training fixtures -------------------------------------------------


@pytest.fixture(scope="module")
def pretrained():
    t0 = time.perf_counter()
    enc = Encoders(seed=0)
    cfg = PretrainConfig()
    scenes = generate_scenes(SceneConfig(), PRETRAIN_SEEDS)
    pretrain_encoders(enc, scenes, cfg.epochs, cfg.lr, cfg.seed, cfg.beta1, final_lr_fraction=cfg.final_lr_fraction)
    return enc, time.perf_counter() - t0


@pytest.fixture(scope="module")
def datasets():
    return generate_scenes(SceneConfig(), TRAIN_SEEDS), generate_scenes(SceneConfig(), HELD_OUT_SEEDS)


@pytest.fixture(scope="module")
def bc_run(pretrained, datasets):
    enc, _ = pretrained
    train, held_out = datasets
    agent = Agent(seed=0)
    t0 = time.perf_counter()
    config = TrainConfig(iterations=10**6, time_budget=BC_BUDGET - 120.0, **BC_CONFIG)
    rows = train_agent(agent, enc, train, (), config, BC_PPO, seed=0)
    seconds = time.perf_counter() - t0
    val = validate(agent, enc, held_out, PerturbSpec(), 10, seed=7)
    return agent, rows, seconds, val


@pytest.fixture(scope="module")
def joint_run(pretrained, datasets, bc_run):
    enc, pretrain_seconds = pretrained
    train, held_out = datasets
    agent = copy.deepcopy(bc_run[0])
    spent = pretrain_seconds + bc_run[2]
    budget = max(TOTAL_BUDGET - spent - 600.0, 60.0)
    config = TrainConfig(iterations=10**6, time_budget=budget, **JOINT_CONFIG)
    rows = train_agent(agent, enc, train, (), config, JOINT_PPO, seed=1)
    report = evaluate(agent, enc, held_out, iterations=10, seed=11)
    return agent, rows, report, time.perf_counter() - CLOCK["start"]


# --- 1 ------------------------------------------------------------------------


def test_criterion_1_geometry_oracles():
    with criterion(1, "geometry round trip and disentangled composition") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        scene = generate_scenes(SceneConfig(), [1])[0]
        K = scene.intrinsics
        uv = np.column_stack([rng.uniform(0, K.width, 10**4), rng.uniform(0, K.height, 10**4)])
        z = rng.uniform(K.near, K.far, 10**4)
        pose = Se3Pose(yaw_rotation(37.0), [1.0, -0.5, 3.0])
        world = back_project_many(uv, z, K, pose)
        assert frustum_mask(world, K, pose).all()
        uv2, z2, _ = project_points(world, K, pose)
        cam = pose.apply(world)
        round_trip = np.max(np.linalg.norm(pose.inverse().apply(cam) - world, axis=1))
        reprojected = back_project_many(uv2, z2, K, pose)
        err = float(np.max(np.linalg.norm(reprojected - world, axis=1)))
        assert err <= 1e-9 and round_trip <= 1e-9
        for deg in rng.uniform(-180, 180, 100):
            cur = Se3Pose(yaw_rotation(rng.uniform(0, 360)), rng.normal(size=3) * 5)
            out = compose_disentangled(Se3Pose(yaw_rotation(deg), np.zeros(3)), cur)
            assert np.array_equal(out.translation, cur.translation)
        seconds = time.perf_counter() - t0
        info["text"] = f"max round-trip error {err:.2e} m, {seconds:.2f} s"
        assert seconds < 5.0


# --- 2 ------------------------------------------------------------------------


def test_criterion_2_expert_convergence():
    with criterion(2, "expert converges on 100 full-range scenes within 40 steps") as info:
        scenes = generate_scenes(SceneConfig(), range(3000, 3100))
        t0 = time.perf_counter()
        spec = ActionSpec()
        rng = np.random.default_rng(2)
        worst_steps, worst = 0, np.zeros(3)
        for scene in scenes:
            gt = scene.gt_pose
            cur = perturb_pose(gt, PerturbSpec(max_yaw=360.0, max_planar_translation=10.0), rng)
            for step in range(1, 41):
                cur = apply_actions(expert_for_pose(gt, cur, spec), cur, spec)
                res = np.abs(residual_components(disentangled_residual(gt, cur), spec))
                if np.all(res <= 0.05):
                    break
            assert np.all(res <= 0.05), f"residual {res} after 40 steps"
            worst_steps = max(worst_steps, step)
            worst = np.maximum(worst, res)
        seconds = time.perf_counter() - t0
        info["text"] = f"100/100 converged, at most {worst_steps} steps, {seconds:.1f} s"
        assert seconds < 30.0


# --- 3 ------------------------------------------------------------------------


def test_criterion_3_reward():
    with criterion(3, "reward branches and point-to-point distance") as info:
        scene = generate_scenes(SceneConfig(), [4])[0]
        ctx = RewardContext.from_scene(scene)
        assert (step_reward(5.0, 4.0, ctx), step_reward(5.0, 5.0, ctx), step_reward(4.0, 5.0, ctx)) == (0.5, 0.0, -0.5)
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(50):
            offset = Se3Pose(yaw_rotation(rng.uniform(-30, 30)), rng.normal(size=3))
            pose = offset.compose(scene.gt_pose)
            brute = np.mean([np.linalg.norm(q - pose.apply(p[None])[0]) for p, q in zip(ctx.points, ctx.reconstructed)])
            worst = max(worst, abs(p2p_distance(ctx, pose) - brute))
        info["text"] = f"max deviation {worst:.1e}"
        assert worst <= 1e-6


# --- 4 ------------------------------------------------------------------------


def test_criterion_4_circle_identity_and_gradients():
    with criterion(4, "circle-loss identity and gradient checks") as info:
        m_pos, m_neg = 0.1, 1.4
        for n_pos, n_neg in [(1, 1), (2, 3), (5, 1), (4, 7)]:
            d = np.array([[m_pos] * n_pos + [m_neg] * n_neg])
            pos = np.array([[True] * n_pos + [False] * n_neg])
            with ad.precision(np.float64):
                got = circle_loss_from_distances(d, pos).item()
            assert abs(got - math.log(1 + n_pos * n_neg)) <= 1e-6
        rng = np.random.default_rng(4)
        errors = {}
        for name, (fn, make) in LAYER_CASES.items():
            errors[name] = check_gradients(fn, make(np.random.default_rng(0)))
        coords = np.array([[0.0, 0.0], [0.5, 0.0], [3.0, 3.0], [6.0, 1.0]])
        errors["circle"] = check_gradients(
            lambda t: circle_loss(ad.l2_normalize(t[0]), ad.l2_normalize(t[1]), coords, coords),
            [rng.normal(size=(4, 5)), rng.normal(size=(4, 5))],
            h=1e-5,
        )
        y = np.array([1, 0, 0, 1, 0])
        errors["bce"] = check_gradients(lambda t: weighted_bce(ad.sigmoid(t[0]), y), [rng.normal(size=5)], h=1e-5)
        labels = rng.integers(0, 11, size=(3, 3))
        errors["bc"] = check_gradients(lambda t: bc_loss(PolicyOutput(t[0], ad.Tensor(0.0)), labels), [rng.normal(size=(3, 3, 11))], h=1e-5)
        actions = rng.integers(0, 11, size=(4, 3))
        logits = rng.normal(size=(4, 3, 11))
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        old = np.take_along_axis(logp, actions[..., None], -1)[..., 0] + rng.normal(scale=0.05, size=(4, 3))
        batch = Batch(actions, old, rng.normal(size=4), rng.normal(size=4), rng.integers(0, 11, size=(4, 3)))
        errors["ppo"] = check_gradients(
            lambda t: ppo_losses(batch, PolicyOutput(t[0], t[1]), PpoConfig()).total, [logits, rng.normal(size=4)], h=1e-6
        )
        worst = max(errors, key=errors.get)
        info["text"] = f"{len(errors)} checks, worst {worst} at {errors[worst]:.1e}"
        assert errors[worst] <= 1e-4


# --- 5 ------------------------------------------------------------------------


def brute_force_advantages(r, v, gamma, lam):
    n = len(r)
    vv = list(v) + [0.0]
    delta = [r[t] + gamma * vv[t + 1] - vv[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** (l - t) * delta[l] for l in range(t, n)) for t in range(n)])


def test_criterion_5_gae():
    with criterion(5, "GAE against brute-force expansion") as info:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 7))
            r, v = rng.normal(size=n), rng.normal(size=n)
            gamma, lam = rng.uniform(0, 1, 2)
            adv, _ = compute_gae(r, v, GaeConfig(gamma, lam))
            worst = max(worst, float(np.max(np.abs(adv - brute_force_advantages(r, v, gamma, lam)))))
            mc = np.array([sum(gamma ** (l - t) * r[l] for l in range(t, n)) for t in range(n)]) - v
            adv1, _ = compute_gae(r, v, GaeConfig(gamma, 1.0))
            worst = max(worst, float(np.max(np.abs(adv1 - mc))))
        info["text"] = f"max deviation {worst:.1e}"
        assert worst <= 1e-6


# --- pretraining (supports 6 to 9) --------------------------------------------


def test_pretrained_encoders_classify_and_align(pretrained):
    enc, seconds = pretrained
    held_out = generate_scenes(SceneConfig(), PRETRAIN_HELD_OUT)
    acc = frustum_accuracy(enc, held_out)
    pos, neg = alignment_margin(enc, held_out)
    print(f"pretraining {seconds:.0f} s, held-out frustum accuracy {acc:.3f}, distances {pos:.3f} vs {neg:.3f}")
    assert acc > 0.85
    assert neg - pos >= 0.2


# --- 6 ------------------------------------------------------------------------


def test_criterion_6_behavioural_cloning(bc_run):
    agent, rows, seconds, val = bc_run
    with criterion(6, "cloning-only training reaches 90% held-out expert agreement in 30 min") as info:
        info["text"] = (
            f"held-out agreement {val['val_agreement']:.3f}, {len(rows)} iterations in {seconds / 60:.1f} min, "
            f"held-out RR {val['val_rr']:.2f}"
        )
        assert seconds <= BC_BUDGET
        assert val["val_agreement"] >= 0.90


# --- 7 ------------------------------------------------------------------------


def test_criterion_7_iteration_trend(joint_run):
    agent, rows, report, elapsed = joint_run
    with criterion(7, "joint training: RR non-decreasing over iterations, final RR >= 90%") as info:
        rr = report.rr_series
        info["text"] = (
            "RR by iteration " + " ".join(f"{x:.2f}" for x in rr)
            + f"; RRE {report.row(3).rre_mean:.2f} -> {report.row(10).rre_mean:.2f} deg"
            + f"; RTE {report.row(3).rte_mean:.2f} -> {report.row(10).rte_mean:.2f} m; {elapsed / 60:.0f} min"
        )
        assert np.all(np.diff(rr) >= 0)
        assert rr[-1] >= 0.90
        assert report.row(10).rre_mean < report.row(3).rre_mean
        assert report.row(10).rte_mean < report.row(3).rte_mean
        assert elapsed <= TOTAL_BUDGET


# --- 8 ------------------------------------------------------------------------


def test_criterion_8_reuse_and_cost(pretrained):
    enc, _ = pretrained
    with criterion(8, "one embedding pass per modality, at most 10 ms per iteration") as info:
        scene = generate_scenes(SceneConfig(), [6])[0]
        agent = Agent(seed=3)
        for length in (1, 10, 30):
            before = (enc.point_passes, enc.image_passes)
            ep = rollout_episode(scene, enc, agent, "greedy", seed=length, length=length)
            assert (enc.point_passes - before[0], enc.image_passes - before[1]) == (1, 1)
        per_iteration = float(np.median(ep.step_seconds)) * 1e3
        info["text"] = f"median {per_iteration:.2f} ms per iteration"
        assert per_iteration <= 10.0


# --- 9 ------------------------------------------------------------------------


def test_criterion_9_neutral_states(pretrained):
    enc, _ = pretrained
    with criterion(9, "empty-overlap poses: zero 2D point channels, distinct hybrid states") as info:
        scene = generate_scenes(SceneConfig(), [8])[0]
        context = EpisodeContext.from_scene(scene, enc)
        encoder = StateEncoder(seed=4)
        cache = EpisodeCache.build(encoder, context)
        gt = scene.gt_pose
        poses = [
            Se3Pose(gt.rotation, gt.translation + [0.0, 0.0, -500.0]),
            Se3Pose(yaw_rotation(90.0) @ gt.rotation, gt.translation + [0.0, 0.0, -700.0]),
        ]
        states = []
        for pose in poses:
            pts = transform_points(scene.points, pose)
            assert not frustum_mask(scene.points, scene.intrinsics, pose).any()
            s2d = build_state_2d(context.image_emb, pts, context.point_emb, scene.intrinsics)
            assert np.all(s2d[..., context.image_emb.shape[-1]:] == 0.0)
            states.append(build_hybrid_state(encoder, cache, pose))
        f2 = encoder.config.f_state
        gap_2d = float(np.max(np.abs(states[0][:f2] - states[1][:f2])))
        gap = float(np.linalg.norm(states[0] - states[1]))
        info["text"] = f"2D halves differ by {gap_2d:.1e}, hybrid states by {gap:.3f}"
        assert gap_2d == 0.0
        assert gap > 1e-3
