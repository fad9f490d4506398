"""Rewards, episode rollouts, advantage estimation and the PPO + behavioural
cloning training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import (
    ActionSpec,
    Agent,
    apply_actions,
    bc_loss,
    expert_for_pose,
    select_actions,
)
from .embed import Encoders
from .geometry import PoseError, Se3Pose, back_project_many, pose_error, project_points
from .state import EpisodeCache, EpisodeContext, build_hybrid_state, hybrid_states_batch
from .synth import EmptyFrustumError, PerturbSpec, ScenePair, perturb_pose

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch",
    "policy_loss",
    "value_loss",
    "entropy",
    "bc_loss",
    "mean_reward",
    "expert_agreement",
    "val_rre",
    "val_rte",
    "val_rr",
)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


# --- reward -----------------------------------------------------------------

@dataclass(frozen=True)
class RewardSpec:
    eps_neg: float = -0.5
    eps_pause: float = 0.0
    eps_pos: float = 0.5
    tolerance: float = 1e-6


@dataclass
class RewardContext:
    """In-frustum points under the true pose and their reconstructions from
    the true projection, built once per episode."""

    points: np.ndarray  # P-bar, world frame, (m, 3)
    reconstructed: np.ndarray  # P-double-dot, true camera frame, (m, 3)
    eps_neg: float = -0.5
    eps_pause: float = 0.0
    eps_pos: float = 0.5
    tolerance: float = 1e-6

    def __post_init__(self):
        if not (self.eps_neg <= 0 and self.eps_pause <= 0 and self.eps_pos > 0):
            raise ValueError("reward constants need eps_neg <= 0, eps_pause <= 0 < eps_pos")
        if len(self.points) == 0:
            raise EmptyFrustumError("reward context has no in-frustum points")

    @classmethod
    def from_scene(cls, scene: ScenePair, **constants) -> "RewardContext":
        pts = scene.points[scene.gt_frustum_labels]
        if len(pts) == 0:
            raise EmptyFrustumError("no point of the scene lies in the true frustum")
        uv, z, _ = project_points(pts, scene.intrinsics, scene.gt_pose)
        recon = back_project_many(uv, z, scene.intrinsics, Se3Pose.identity())
        return cls(pts, recon, **constants)


def p2p_distance(ctx: RewardContext, pose: Se3Pose) -> float:
    """Mean distance between reconstructed points and points under ``pose``."""
    moved = pose.apply(ctx.points)
    return float(np.mean(np.linalg.norm(ctx.reconstructed - moved, axis=1)))


def step_reward(d_before: float, d_after: float, ctx: RewardContext) -> float:
    if d_after < d_before - ctx.tolerance:
        return ctx.eps_pos
    if abs(d_after - d_before) <= ctx.tolerance:
        return ctx.eps_pause
    return ctx.eps_neg


# --- rollouts ---------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    reward: float
    value: float
    expert: np.ndarray
    done: bool
    scene_index: int = -1
    pose: Se3Pose | None = None
    greedy: np.ndarray | None = None


@dataclass
class Episode:
    transitions: list
    poses: list  # initial pose followed by the pose after every step
    errors: list  # PoseError after every step
    step_seconds: list

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    def __getitem__(self, i):
        return self.transitions[i]


def rollout_episode(
    scene: ScenePair,
    encoders: Encoders,
    agent: Agent,
    mode: str = "sample",
    seed=0,
    length: int = 10,
    perturb: PerturbSpec = PerturbSpec(),
    initial_pose: Se3Pose | None = None,
    context: EpisodeContext | None = None,
    scene_index: int = -1,
    policy: str = "agent",
    reward: RewardSpec = RewardSpec(),
    expert_mix: float = 0.0,
) -> Episode:
    """Run ``length`` registration steps from a perturbed pose.

    ``mode`` is ``greedy`` or ``sample``; ``policy="expert"`` executes the
    expert's actions instead of the agent's (states and log-probabilities are
    still recorded from the agent). With ``expert_mix`` > 0 each agent step is
    replaced by the expert's with that probability. One-shot embeddings are computed once,
    unless a prepared ``context`` is given.
    """
    if length < 1:
        raise ValueError("episode length must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ctx = context if context is not None else EpisodeContext.from_scene(scene, encoders)
    cache = EpisodeCache.build(agent.state_encoder, ctx)
    reward_ctx = RewardContext.from_scene(scene, **asdict(reward))
    pose = initial_pose if initial_pose is not None else perturb_pose(scene.gt_pose, perturb, rng)
    d = p2p_distance(reward_ctx, pose)
    transitions, poses, errors, seconds = [], [pose], [], []
    for k in range(length):
        t0 = time.perf_counter()
        state = build_hybrid_state(agent.state_encoder, cache, pose)
        with ad.no_grad():
            out = agent.forward(state)
        choice = select_actions(out, mode, rng)
        if policy == "expert":
            expert = expert_for_pose(scene.gt_pose, pose, agent.spec)
            new_pose = apply_actions(expert, pose, agent.spec)
        else:
            new_pose = apply_actions(choice.indices, pose, agent.spec)
        seconds.append(time.perf_counter() - t0)
        executed = choice.indices
        if policy == "expert":
            executed = expert
        else:
            expert = expert_for_pose(scene.gt_pose, pose, agent.spec)
            if expert_mix > 0.0 and rng.random() < expert_mix:
                executed = expert
                new_pose = apply_actions(expert, pose, agent.spec)
        d_new = p2p_distance(reward_ctx, new_pose)
        if executed is expert:
            logp = np.log(np.maximum(out.probabilities()[np.arange(len(expert)), expert], 1e-30))
        else:
            logp = choice.log_probs
        transitions.append(
            Transition(
                state=state,
                actions=np.asarray(executed),
                log_probs=logp,
                reward=step_reward(d, d_new, reward_ctx),
                value=float(out.value.data),
                expert=expert,
                done=k == length - 1,
                scene_index=scene_index,
                pose=pose,
                greedy=np.argmax(out.logits.data, axis=-1),
            )
        )
        pose, d = new_pose, d_new
        poses.append(pose)
        errors.append(pose_error(pose, scene.gt_pose))
    return Episode(transitions, poses, errors, seconds)


# --- advantages and losses -------------------------------------------------

@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")


def compute_gae(rewards, values, config: GaeConfig = GaeConfig()):
    """Advantages and returns for one episode with a zero terminal bootstrap."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("rewards and values must have equal length")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        nxt = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + config.gamma * nxt - v[t]
        running = delta + config.gamma * config.lam * running
        adv[t] = running
    return adv, adv + v


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    bc_coef: float = 1.0
    policy_coef: float = 1.0
    epochs: int = 4
    minibatch: int = 64
    episode_length: int = 10

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch < 1 or self.episode_length < 1:
            raise ValueError("epochs, minibatch and episode length must be positive")

    @classmethod
    def bc_only(cls, **kw) -> "PpoConfig":
        return cls(value_coef=0.0, entropy_coef=0.0, policy_coef=0.0, **kw)


@dataclass
class Batch:
    actions: np.ndarray  # (B, S)
    old_log_probs: np.ndarray  # (B, S)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)
    expert: np.ndarray  # (B, S)


@dataclass
class PpoLosses:
    policy: ad.Tensor
    value: ad.Tensor
    entropy: ad.Tensor
    bc: ad.Tensor
    total: ad.Tensor


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


def ppo_losses(batch: Batch, output, config: PpoConfig = PpoConfig(), normalize: bool = True) -> PpoLosses:
    """Clipped surrogate, value, entropy and cloning losses for one minibatch.

    ``output`` holds fresh logits of shape (B, S, N_a) and values of shape (B,).
    """
    logp_all = ad.log_softmax(output.logits, axis=-1)
    B, S, A = logp_all.shape
    onehot = np.zeros((B, S, A))
    np.put_along_axis(onehot, np.asarray(batch.actions)[..., None], 1.0, axis=-1)
    new_logp = ad.sum_(logp_all * ad.Tensor(onehot), axis=(1, 2))
    old_logp = np.asarray(batch.old_log_probs, dtype=np.float64).sum(axis=1)
    ratio = ad.exp(new_logp - ad.Tensor(old_logp))
    adv = normalize_advantages(batch.advantages) if normalize else np.asarray(batch.advantages, dtype=np.float64)
    adv_t = ad.Tensor(adv)
    surrogate = ad.minimum(ratio * adv_t, ad.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv_t)
    policy = -ad.mean(surrogate)
    value = ad.mean(ad.square(output.value - ad.Tensor(np.asarray(batch.returns, dtype=np.float64))))
    probs = ad.exp(logp_all)
    entropy = ad.mean(-ad.sum_(probs * logp_all, axis=-1))
    bc = bc_loss(output, batch.expert)
    total = config.policy_coef * policy + config.value_coef * value - config.entropy_coef * entropy + config.bc_coef * bc
    return PpoLosses(policy, value, entropy, bc, total)


# --- training loop ----------------------------------------------------------

class ContextCache:
    """Least-recently-used store of one-shot episode contexts (encoders are
    frozen while the agent trains, so contexts never go stale)."""

    def __init__(self, encoders: Encoders, scenes, capacity: int = 256):
        self.encoders = encoders
        self.scenes = scenes
        self.capacity = capacity
        self._items: OrderedDict[int, EpisodeContext] = OrderedDict()

    def __getitem__(self, i: int) -> EpisodeContext:
        ctx = self._items.get(i)
        if ctx is None:
            ctx = EpisodeContext.from_scene(self.scenes[i], self.encoders)
            self._items[i] = ctx
            if len(self._items) > self.capacity:
                self._items.popitem(last=False)
        else:
            self._items.move_to_end(i)
        return ctx


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100
    episodes_per_iteration: int = 32
    lr: float = 1e-3
    beta1: float = 0.98
    grad_clip: float = 5.0
    validate_every: int = 5
    context_capacity: int = 256
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    reward: RewardSpec = field(default_factory=RewardSpec)
    time_budget: float = 0.0  # seconds, 0 for no limit
    expert_mix: float = 0.0  # probability of executing the expert's action
    expert_mix_decay: float = 1.0  # per-iteration factor on expert_mix

    def __post_init__(self):
        if not 0.0 <= self.expert_mix <= 1.0:
            raise ValueError("expert_mix must be in [0, 1]")
        if not 0.0 < self.expert_mix_decay <= 1.0:
            raise ValueError("expert_mix_decay must be in (0, 1]")


def _minibatches(episode_order, episodes, size):
    flat = [(e, t) for e in episode_order for t in range(len(episodes[e]))]
    for start in range(0, len(flat), size):
        yield flat[start : start + size]


def update_agent(agent: Agent, contexts: ContextCache, episodes, ppo: PpoConfig, gae: GaeConfig, lr, beta1, grad_clip, rng):
    """PPO + cloning epochs over the transitions of ``episodes``."""
    advs, rets = [], []
    for ep in episodes:
        a, r = compute_gae([t.reward for t in ep], [t.value for t in ep], gae)
        advs.append(a)
        rets.append(r)
    sums = dict(policy=0.0, value=0.0, entropy=0.0, bc=0.0)
    n = 0
    for _ in range(ppo.epochs):
        for mb in _minibatches(rng.permutation(len(episodes)), episodes, ppo.minibatch):
            trans = [episodes[e].transitions[t] for e, t in mb]
            batch = Batch(
                actions=np.stack([t.actions for t in trans]),
                old_log_probs=np.stack([t.log_probs for t in trans]),
                advantages=np.array([advs[e][t] for e, t in mb]),
                returns=np.array([rets[e][t] for e, t in mb]),
                expert=np.stack([t.expert for t in trans]),
            )
            agent.store.zero_grad()
            states = hybrid_states_batch(agent.state_encoder, [contexts[t.scene_index] for t in trans], [t.pose for t in trans])
            losses = ppo_losses(batch, agent.forward(states), ppo)
            values = {k: getattr(losses, k).item() for k in ("policy", "value", "entropy", "bc", "total")}
            if not all(math.isfinite(v) for v in values.values()):
                raise NonFiniteLossError(
                    f"non-finite loss {values}",
                    dict(losses=values, scenes=[t.scene_index for t in trans], step=agent.store.step),
                )
            losses.total.backward()
            agent.store.clip_grad_norm(grad_clip)
            ad.adam_step(agent.store, lr=lr, beta1=beta1)
            for k in sums:
                sums[k] += values[k]
            n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


def validate(
    agent: Agent,
    encoders: Encoders,
    scenes,
    perturb: PerturbSpec,
    length: int,
    seed: int,
    recall=(10.0, 5.0),
    reward: RewardSpec = RewardSpec(),
):
    """Greedy rollouts on held-out scenes: final errors, recall and expert agreement."""
    errs, agree = [], []
    for i, scene in enumerate(scenes):
        ep = rollout_episode(scene, encoders, agent, "greedy", np.random.default_rng([seed, i]), length, perturb, reward=reward)
        errs.append(ep.errors[-1])
        agree.extend(np.mean(t.greedy == t.expert) for t in ep.transitions)
    rre = np.array([e.rre for e in errs])
    rte = np.array([e.rte for e in errs])
    rr = float(np.mean((rre < recall[0]) & (rte < recall[1])))
    return dict(val_rre=float(rre.mean()), val_rte=float(rte.mean()), val_rr=rr, val_agreement=float(np.mean(agree)))


def train_agent(
    agent: Agent,
    encoders: Encoders,
    scenes,
    val_scenes=(),
    config: TrainConfig = TrainConfig(),
    ppo: PpoConfig = PpoConfig(),
    gae: GaeConfig = GaeConfig(),
    seed: int = 0,
    metrics_path=None,
    callback=None,
):
    """Rollout / update loop with frozen encoders; returns the metric rows."""
    if len(scenes) < 1:
        raise ValueError("training needs at least one scene")
    rng = np.random.default_rng(seed)
    contexts = ContextCache(encoders, scenes, config.context_capacity)
    rows = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    start = time.perf_counter()
    last_val = dict(val_rre=float("nan"), val_rte=float("nan"), val_rr=float("nan"))
    try:
        for it in range(config.iterations):
            picks = rng.choice(len(scenes), size=config.episodes_per_iteration, replace=len(scenes) < config.episodes_per_iteration)
            episodes = []
            for i in picks:
                episodes.append(
                    rollout_episode(
                        scenes[i], encoders, agent, "sample", rng, ppo.episode_length, config.perturb,
                        context=contexts[int(i)], scene_index=int(i), reward=config.reward,
                        expert_mix=config.expert_mix * config.expert_mix_decay**it,
                    )
                )
            trans = [t for ep in episodes for t in ep]
            mean_reward = float(np.mean([t.reward for t in trans]))
            agreement = float(np.mean([np.mean(t.greedy == t.expert) for t in trans]))
            losses = update_agent(agent, contexts, episodes, ppo, gae, config.lr, config.beta1, config.grad_clip, rng)
            final = it == config.iterations - 1
            out_of_time = config.time_budget and time.perf_counter() - start > config.time_budget
            if len(val_scenes) and (final or out_of_time or (it + 1) % config.validate_every == 0):
                last_val = validate(agent, encoders, val_scenes, config.perturb, ppo.episode_length, seed + 1, reward=config.reward)
            row = dict(
                epoch=it,
                policy_loss=losses["policy"],
                value_loss=losses["value"],
                entropy=losses["entropy"],
                bc_loss=losses["bc"],
                mean_reward=mean_reward,
                expert_agreement=agreement,
                val_rre=last_val["val_rre"],
                val_rte=last_val["val_rte"],
                val_rr=last_val["val_rr"],
            )
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] if k == "epoch" else f"{row[k]:.6f}" for k in METRICS_HEADER])
                fh.flush()
            log.info(
                "iter %d: bc %.4f agree %.3f reward %.3f val_rr %.3f (%.0fs)",
                it, row["bc_loss"], agreement, mean_reward, row["val_rr"], time.perf_counter() - start,
            )
            if callback is not None:
                callback(row)
            if out_of_time:
                break
    finally:
        if fh is not None:
            fh.close()
    return rows
