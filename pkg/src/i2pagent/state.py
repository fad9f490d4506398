"""2D, 3D and hybrid registration states built from one-shot embeddings.

The 2D state stacks the image features with the point features scattered
into the image at the current pose; the 3D state lists every point in the
current camera frame with its predicted and current frustum membership.
Both are pooled into fixed-length vectors by small encoders.

The first 2D convolution is linear in its input, so it is evaluated as an
image term (fixed for an episode) plus a point term obtained by a sparse
scatter matrix applied to per-point projected weights. ``encode_2d`` is the
dense reference that materialises the full ``H x W x 2f`` state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import MLP, Linear, ParameterStore, Tensor
from .embed import Encoders
from .geometry import CameraIntrinsics, DepthMap, Se3Pose, project_points, pixel_indices, render_depth_map
from .synth import ScenePair

COORD_SCALE = 10.0


@dataclass(frozen=True)
class StateConfig:
    f: int = 64
    f_state: int = 128
    conv_channels: tuple[int, int] = (16, 32)
    point_widths: tuple[int, int, int] = (32, 64, 64)

    @property
    def hybrid_dim(self) -> int:
        return 2 * self.f_state


def transform_points(points, pose: Se3Pose) -> np.ndarray:
    return pose.apply(points)


def _pixel_groups(points_cam, K: CameraIntrinsics):
    """Flat pixel index per in-frustum point and the number of points per pixel."""
    uv, _, inside = project_points(points_cam, K)
    idx = np.flatnonzero(inside)
    pix = pixel_indices(uv[idx])
    flat = pix[:, 1] * K.width + pix[:, 0]
    counts = np.bincount(flat, minlength=K.height * K.width)
    return idx, pix, flat, counts


def scatter_point_features(points_cam, point_emb, K: CameraIntrinsics) -> tuple[np.ndarray, DepthMap]:
    """Mean point feature per pixel (zero where no point lands) and the depth map."""
    emb = np.asarray(point_emb, dtype=np.float32)
    idx, _, flat, counts = _pixel_groups(points_cam, K)
    F = np.zeros((K.height * K.width, emb.shape[1]), dtype=np.float64)
    np.add.at(F, flat, emb[idx])
    filled = counts > 0
    F[filled] /= counts[filled, None]
    depth = render_depth_map(points_cam, K, Se3Pose.identity())
    return F.reshape(K.height, K.width, -1).astype(np.float32), depth


def current_frustum_labels(points_cam, K: CameraIntrinsics) -> np.ndarray:
    return project_points(points_cam, K)[2]


def build_state_2d(image_emb, points_cam, point_emb, K: CameraIntrinsics) -> np.ndarray:
    F, _ = scatter_point_features(points_cam, point_emb, K)
    return np.concatenate([np.asarray(image_emb, dtype=np.float32), F], axis=2)


def build_state_3d(points_cam, y_pred, y_current) -> np.ndarray:
    return np.concatenate(
        [np.asarray(points_cam, dtype=np.float32), np.asarray(y_pred, dtype=np.float32)[:, None], np.asarray(y_current, dtype=np.float32)[:, None]],
        axis=1,
    )


def scatter_operator(points_cam, K: CameraIntrinsics, n_points: int) -> sp.csr_matrix:
    """Sparse map from per-(point, tap) rows to stride-2 conv outputs.

    Row ``oy * Wo + ox`` gathers, for every 3x3 tap, the mean over the points
    landing on the tapped pixel. Columns are ``point * 9 + tap``.
    """
    Ho, Wo = (K.height + 1) // 2, (K.width + 1) // 2
    idx, pix, flat, counts = _pixel_groups(points_cam, K)
    w = 1.0 / counts[flat]
    rows, cols, vals = [], [], []
    for dy in range(3):
        oy2 = pix[:, 1] + 1 - dy
        for dx in range(3):
            ox2 = pix[:, 0] + 1 - dx
            ok = (oy2 % 2 == 0) & (ox2 % 2 == 0) & (oy2 >= 0) & (ox2 >= 0) & (oy2 < 2 * Ho) & (ox2 < 2 * Wo)
            rows.append((oy2[ok] // 2) * Wo + ox2[ok] // 2)
            cols.append(idx[ok] * 9 + dy * 3 + dx)
            vals.append(w[ok])
    return sp.csr_matrix(
        (np.concatenate(vals).astype(np.float32), (np.concatenate(rows), np.concatenate(cols))),
        shape=(Ho * Wo, n_points * 9),
    )


@dataclass
class EpisodeContext:
    """One-shot artifacts of a scene: embeddings and predicted frustum labels."""

    scene: ScenePair
    point_emb: np.ndarray
    image_emb: np.ndarray
    y_pred: np.ndarray

    @classmethod
    def from_scene(cls, scene: ScenePair, encoders: Encoders) -> "EpisodeContext":
        with ad.no_grad():
            pe = encoders.embed_points(scene.points, scene.intensities)
            ie = encoders.embed_image(scene.image)
            y = encoders.classify_frustum(pe, ie, scene.image > 0)
        return cls(scene, pe.data, ie.data, y.data)


class StateEncoder:
    """The 2D state encoder (strided convs, mean-pool, perceptron) and the
    3D state encoder (shared perceptron, max-pool, linear)."""

    def __init__(self, config: StateConfig = StateConfig(), seed: int = 0, store: ParameterStore | None = None):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        c1, c2 = c.conv_channels
        std = np.sqrt(2.0 / (9 * 2 * c.f))
        self.w_img = self.store.add("state2d.conv0.w_img", rng.normal(0.0, std, (3, 3, c.f, c1)))
        self.w_pts = self.store.add("state2d.conv0.w_pts", rng.normal(0.0, std, (3, 3, c.f, c1)))
        self.b0 = self.store.add("state2d.conv0.b", np.zeros(c1))
        self.conv1 = ad.Conv3x3(self.store, "state2d.conv1", c1, c2, rng, stride=2)
        self.head2d = MLP(self.store, "state2d.mlp", [c2, c.f_state, c.f_state], rng)
        self.point_mlp = MLP(self.store, "state3d.mlp", [5, *c.point_widths], rng, final_relu=True)
        self.head3d = Linear(self.store, "state3d.out", c.point_widths[-1], c.f_state, rng, gain=1.0)

    # -- 2D branch ---------------------------------------------------------

    def _tail_2d(self, h0: Tensor) -> Tensor:
        h = ad.relu(self.conv1(ad.relu(h0)))
        return self.head2d(ad.mean(h, axis=(-3, -2)))

    def encode_2d(self, s2d) -> Tensor:
        """Dense reference path on a materialised ``H x W x 2f`` state."""
        w = ad.concat([self.w_img, self.w_pts], axis=2)
        return self._tail_2d(ad.conv2d_3x3(ad.as_tensor(s2d), w, stride=2) + self.b0)

    def image_term(self, image_emb) -> Tensor:
        return ad.conv2d_3x3(ad.as_tensor(image_emb), self.w_img, stride=2)

    def point_taps(self, point_emb) -> Tensor:
        """Per-point contribution to every tap, shaped ``(N * 9, c1)``."""
        f, c1 = self.config.f, self.config.conv_channels[0]
        w = ad.reshape(ad.transpose(self.w_pts, (2, 0, 1, 3)), (f, 9 * c1))
        y = ad.matmul(ad.as_tensor(point_emb), w)
        return ad.reshape(y, (-1, c1))

    def encode_2d_split(self, image_term: Tensor, taps: Tensor, ops) -> Tensor:
        """Fast 2D encoding for one or more poses sharing a scene.

        ``ops`` is a list of scatter operators; the result has one row per operator.
        """
        Ho, Wo, c1 = image_term.shape
        M = ops[0] if len(ops) == 1 else sp.vstack(ops, format="csr")
        pts = ad.reshape(ad.sparse_matmul(M, taps), (len(ops), Ho, Wo, c1))
        return self._tail_2d(pts + image_term + self.b0)

    # -- 3D branch ---------------------------------------------------------

    @staticmethod
    def _point_inputs(s3d) -> np.ndarray:
        x = np.array(s3d, dtype=np.float32, copy=True)
        x[..., :3] /= COORD_SCALE
        return x

    def _point_features_t(self, x: np.ndarray) -> np.ndarray:
        """Untracked perceptron features laid out ``(..., C, N)``."""
        h = np.swapaxes(x, -1, -2)
        for layer in self.point_mlp.layers:
            h = np.matmul(layer.w.data.T, h)
            h += layer.b.data[:, None]
            np.maximum(h, 0.0, out=h)
        return h

    def _encode_winners(self, x: np.ndarray) -> Tensor:
        # Only the rows that win the max-pool affect its value and gradient.
        winners = np.argmax(self._point_features_t(x), axis=-1)  # (..., C)
        sub = np.take_along_axis(x, winners[..., None], axis=-2)
        return self.head3d(ad.max_pool_over_points(self.point_mlp(Tensor(sub))))

    def encode_3d(self, s3d) -> Tensor:
        return self._encode_winners(self._point_inputs(s3d))

    def encode_3d_batch(self, s3d_batch) -> Tensor:
        """Batched 3D encoding; the graph is recorded only on the rows that
        win the max-pool, so values and gradients equal the full computation."""
        return self._encode_winners(self._point_inputs(s3d_batch))


@dataclass
class EpisodeCache:
    """Pose-independent pieces of the state encoding for one episode under
    fixed encoder parameters."""

    context: EpisodeContext
    image_term: Tensor
    taps: Tensor

    @classmethod
    def build(cls, encoder: StateEncoder, context: EpisodeContext) -> "EpisodeCache":
        with ad.no_grad():
            return cls(context, encoder.image_term(context.image_emb), encoder.point_taps(context.point_emb))


def state_3d_for_pose(context: EpisodeContext, pose: Se3Pose) -> np.ndarray:
    pts = transform_points(context.scene.points, pose)
    return build_state_3d(pts, context.y_pred, current_frustum_labels(pts, context.scene.intrinsics))


def build_hybrid_state(encoder: StateEncoder, cache: EpisodeCache, pose: Se3Pose) -> np.ndarray:
    """Hybrid state vector for the current pose; no embedding is recomputed."""
    ctx = cache.context
    K = ctx.scene.intrinsics
    pts = transform_points(ctx.scene.points, pose)
    op = scatter_operator(pts, K, len(pts))
    s3d = build_state_3d(pts, ctx.y_pred, current_frustum_labels(pts, K))
    with ad.no_grad():
        a = encoder.encode_2d_split(cache.image_term, cache.taps, [op])
        b = encoder.encode_3d(s3d)
    return np.concatenate([a.data[0], b.data])


def build_hybrid_state_dense(encoder: StateEncoder, context: EpisodeContext, pose: Se3Pose) -> np.ndarray:
    """Reference construction through the materialised 2D and 3D states."""
    K = context.scene.intrinsics
    pts = transform_points(context.scene.points, pose)
    s2d = build_state_2d(context.image_emb, pts, context.point_emb, K)
    s3d = build_state_3d(pts, context.y_pred, current_frustum_labels(pts, K))
    with ad.no_grad():
        return np.concatenate([encoder.encode_2d(s2d).data, encoder.encode_3d(s3d).data])


def hybrid_states_batch(encoder: StateEncoder, contexts, poses) -> Tensor:
    """Differentiable hybrid states for ``(context, pose)`` pairs, shape (B, 2f')."""
    B = len(poses)
    ops = []
    s3d = []
    for ctx, pose in zip(contexts, poses):
        pts = transform_points(ctx.scene.points, pose)
        K = ctx.scene.intrinsics
        ops.append(scatter_operator(pts, K, len(pts)))
        s3d.append(build_state_3d(pts, ctx.y_pred, current_frustum_labels(pts, K)))
    groups: dict[int, list[int]] = {}
    for i, ctx in enumerate(contexts):
        groups.setdefault(id(ctx), []).append(i)
    parts, order = [], []
    for members in groups.values():
        ctx = contexts[members[0]]
        part = encoder.encode_2d_split(
            encoder.image_term(ctx.image_emb), encoder.point_taps(ctx.point_emb), [ops[i] for i in members]
        )
        parts.append(part)
        order.extend(members)
    s2 = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    s2 = ad.take_rows(s2, np.argsort(np.asarray(order)))
    s3 = encoder.encode_3d_batch(np.stack(s3d))
    assert s2.shape[0] == B
    return ad.concat([s2, s3], axis=1)
