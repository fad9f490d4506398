"""Actor-critic policy over hybrid states, discrete per-subspace actions and
the greedy expert used for behavioural cloning.

Each subspace (yaw, then planar x and z translations by default) picks one of
``N_a`` candidate steps. Candidates are ordered by magnitude, positive before
negative, so "first maximiser" and "first nearest" both break ties towards
the smallest step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Linear, ParameterStore, Tensor
from .geometry import Se3Pose, compose_disentangled, yaw_of
from .state import StateConfig, StateEncoder

TIE_TOLERANCE = 1e-9

# rotation subspaces: yaw (camera y), pitch (camera x), roll (camera z)
ROTATION_AXES = (1, 0, 2)
# translation subspaces: camera x, camera z, camera y
TRANSLATION_AXES = (0, 2, 1)


def symmetric_candidates(steps, unit: float) -> np.ndarray:
    """``[0, +s1, -s1, +s2, -s2, ...] * unit`` for increasing steps."""
    out = [0.0]
    for s in steps:
        if s == 0:
            continue
        out += [s * unit, -s * unit]
    return np.array(out)


@dataclass(frozen=True)
class ActionSpec:
    n_r: int = 1
    n_t: int = 2
    rotation_steps: tuple[int, ...] = (1, 5, 25, 125, 625)
    translation_steps: tuple[int, ...] = (1, 3, 9, 27, 81)
    rotation_unit: float = 0.1  # degrees
    translation_unit: float = 0.1  # meters

    def __post_init__(self):
        if not (0 <= self.n_r <= 3 and 0 <= self.n_t <= 3 and self.n_r + self.n_t > 0):
            raise ValueError("need 0..3 rotation and 0..3 translation subspaces")
        if len(self.rotation_steps) != len(self.translation_steps):
            raise ValueError("rotation and translation candidate lists must have equal length")

    @property
    def rotation_candidates(self) -> np.ndarray:
        return symmetric_candidates(self.rotation_steps, self.rotation_unit)

    @property
    def translation_candidates(self) -> np.ndarray:
        return symmetric_candidates(self.translation_steps, self.translation_unit)

    @property
    def n_actions(self) -> int:
        return 1 + 2 * len(self.rotation_steps)

    @property
    def n_subspaces(self) -> int:
        return self.n_r + self.n_t

    def candidates(self, subspace: int) -> np.ndarray:
        return self.rotation_candidates if subspace < self.n_r else self.translation_candidates


@dataclass
class PolicyOutput:
    """Logits of shape (..., subspaces, N_a) and values of shape (...)."""

    logits: Tensor
    value: Tensor

    def probabilities(self) -> np.ndarray:
        return ad.softmax(self.logits, axis=-1).data


@dataclass
class ActionChoice:
    indices: np.ndarray  # (subspaces,) candidate indices
    log_probs: np.ndarray  # (subspaces,)


class Agent:
    """State encoders plus a shared trunk with policy and value heads."""

    def __init__(
        self,
        spec: ActionSpec = ActionSpec(),
        state_config: StateConfig = StateConfig(),
        seed: int = 0,
        hidden: int = 128,
    ):
        self.spec = spec
        self.store = ParameterStore()
        self.state_encoder = StateEncoder(state_config, seed=seed, store=self.store)
        rng = np.random.default_rng([seed, 1])
        self.trunk = MLP(self.store, "trunk", [state_config.hybrid_dim, hidden, hidden], rng, final_relu=True)
        self.policy_head = Linear(self.store, "policy", hidden, spec.n_subspaces * spec.n_actions, rng, gain=0.01)
        self.value_head = Linear(self.store, "value", hidden, 1, rng, gain=1.0)

    def forward(self, state) -> PolicyOutput:
        h = self.trunk(ad.as_tensor(state))
        lead = h.shape[:-1]
        logits = ad.reshape(self.policy_head(h), lead + (self.spec.n_subspaces, self.spec.n_actions))
        value = ad.reshape(self.value_head(h), lead)
        return PolicyOutput(logits, value)


def policy_forward(agent: Agent, state) -> PolicyOutput:
    return agent.forward(state)


def select_actions(output: PolicyOutput, mode: str = "greedy", seed=None) -> ActionChoice:
    """Greedy per-subspace argmax or a seeded categorical draw.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    logits = output.logits.data
    if logits.ndim != 2:
        raise ValueError(f"expected (subspaces, N_a) logits, got {logits.shape}")
    logp = _log_softmax(logits)
    if mode == "greedy":
        idx = np.argmax(logits, axis=-1)
    elif mode == "sample":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        cdf = np.cumsum(np.exp(logp), axis=-1)
        u = rng.random(len(logits)) * cdf[:, -1]
        idx = np.minimum((cdf < u[:, None]).sum(axis=-1), logits.shape[-1] - 1)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return ActionChoice(idx.astype(np.int64), logp[np.arange(len(idx)), idx])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _axis_rotation(axis: int, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i] = c
    R[j, j] = c
    R[j, i] = s
    R[i, j] = -s
    return R


def action_values(indices, spec: ActionSpec) -> np.ndarray:
    return np.array([spec.candidates(s)[int(i)] for s, i in enumerate(indices)])


def actions_to_transform(indices, spec: ActionSpec = ActionSpec()) -> Se3Pose:
    """Action transform: rotations about the camera axes and a translation in
    the camera frame, to be applied with :func:`compose_disentangled`."""
    vals = action_values(indices, spec)
    R = np.eye(3)
    for k in range(spec.n_r):
        R = _axis_rotation(ROTATION_AXES[k], vals[k]) @ R
    t = np.zeros(3)
    for k in range(spec.n_t):
        t[TRANSLATION_AXES[k]] = vals[spec.n_r + k]
    return Se3Pose(R, t)


def apply_actions(indices, current: Se3Pose, spec: ActionSpec = ActionSpec()) -> Se3Pose:
    return compose_disentangled(actions_to_transform(indices, spec), current)


def pose_residual(gt: Se3Pose, current: Se3Pose) -> Se3Pose:
    """``gt * current^-1``: the transform taking the current pose onto ``gt``."""
    return gt.compose(current.inverse())


def disentangled_residual(gt: Se3Pose, current: Se3Pose) -> Se3Pose:
    """The single action that reaches ``gt`` under disentangled composition.

    Its rotation equals that of :func:`pose_residual`; its translation is the
    plain difference of translations since rotations do not move them.
    """
    return Se3Pose(gt.rotation @ current.rotation.T, gt.translation - current.translation)


def residual_components(residual: Se3Pose, spec: ActionSpec = ActionSpec()) -> np.ndarray:
    """Per-subspace scalar components (degrees, meters) of a residual."""
    R = residual.rotation
    angles = []
    if spec.n_r:
        angles.append(yaw_of(R))
    if spec.n_r > 1:
        angles.append(math.degrees(math.atan2(R[2, 1] - R[1, 2], R[1, 1] + R[2, 2])))
    if spec.n_r > 2:
        angles.append(math.degrees(math.atan2(R[1, 0] - R[0, 1], R[0, 0] + R[1, 1])))
    trans = [residual.translation[TRANSLATION_AXES[k]] for k in range(spec.n_t)]
    return np.array(angles + trans)


def nearest_candidate(value: float, candidates: np.ndarray) -> int:
    diff = np.abs(candidates - value)
    return int(np.flatnonzero(diff <= diff.min() + TIE_TOLERANCE)[0])


def expert_actions(residual: Se3Pose, spec: ActionSpec = ActionSpec()) -> np.ndarray:
    """Per-subspace index of the candidate closest to the residual component."""
    comp = residual_components(residual, spec)
    return np.array([nearest_candidate(v, spec.candidates(s)) for s, v in enumerate(comp)], dtype=np.int64)


def expert_for_pose(gt: Se3Pose, current: Se3Pose, spec: ActionSpec = ActionSpec()) -> np.ndarray:
    return expert_actions(disentangled_residual(gt, current), spec)


def bc_loss(output: PolicyOutput, labels) -> Tensor:
    """Mean cross-entropy over subspaces (and batch) against expert indices."""
    logp = ad.log_softmax(output.logits, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logp.shape, dtype=np.float64)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    per = -ad.sum_(logp * Tensor(onehot), axis=-1)
    return ad.mean(per)


def agreement(predicted, labels) -> float:
    return float(np.mean(np.asarray(predicted) == np.asarray(labels)))
