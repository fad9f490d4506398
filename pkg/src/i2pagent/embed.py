"""One-shot cross-modal embeddings and their pretraining losses.

The point branch is a shared per-point perceptron over hand-built local
descriptors; the image branch is a stack of 3x3 convolutions at full
resolution. Both emit unit-norm ``f``-dimensional features so that pixel and
point features can be compared with Euclidean distances.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import MLP, Conv3x3, ParameterStore, Tensor
from .geometry import pixel_indices, project_points
from .synth import ScenePair, sample_frustum_points

log = logging.getLogger(__name__)

COORD_SCALE = 10.0
# sinusoid frequencies (cycles per unit intensity) of the appearance code
CODE_FREQUENCIES = 4.0 ** np.arange(8)
CODE_SIZE = 2 * len(CODE_FREQUENCIES)
POINT_FEATURES = 3 + 1 + CODE_SIZE + 9
IMAGE_CHANNELS = 2 + CODE_SIZE


@dataclass(frozen=True)
class EmbedConfig:
    f: int = 64
    r: float = 1.0
    circle_scale: float = 10.0
    margin_pos: float = 0.1
    margin_neg: float = 1.4
    n_anchors: int = 512
    knn: int = 8
    hidden: int = 64
    image_channels: tuple[int, int, int] = (16, 32, 32)
    head_hidden: int = 64

    def __post_init__(self):
        if not 0 < self.margin_pos < self.margin_neg:
            raise ValueError("need 0 < margin_pos < margin_neg")
        if self.f <= 0 or self.r <= 0:
            raise ValueError("f and r must be positive")


def intensity_code(values) -> np.ndarray:
    """Sines and cosines of the intensity at geometrically spaced frequencies.

    The high frequencies let a small network tell apart nearly equal
    intensities, which is what makes point/pixel matches sharp.
    """
    x = np.asarray(values, dtype=np.float64)[..., None] * (2.0 * np.pi * CODE_FREQUENCIES)
    return np.concatenate([np.sin(x), np.cos(x)], axis=-1)


def point_descriptors(points, intensities, k: int = 8) -> np.ndarray:
    """Per-point input features: centred coordinates, intensity and its code,
    and statistics of the k nearest neighbours (offsets, spread, distance,
    intensity)."""
    P = np.asarray(points, dtype=np.float64)
    a = np.asarray(intensities, dtype=np.float64)
    k_eff = min(k, len(P) - 1)
    feats = np.zeros((len(P), POINT_FEATURES))
    feats[:, 0:3] = (P - P.mean(axis=0)) / COORD_SCALE
    feats[:, 3] = a
    feats[:, 4 : 4 + CODE_SIZE] = intensity_code(a)
    o = 4 + CODE_SIZE
    if k_eff > 0:
        _, nbr = cKDTree(P).query(P, k=k_eff + 1)
        nbr = nbr[:, 1:]
        off = P[nbr] - P[:, None, :]
        feats[:, o : o + 3] = off.mean(axis=1)
        feats[:, o + 3 : o + 6] = off.std(axis=1)
        feats[:, o + 6] = np.linalg.norm(off, axis=2).mean(axis=1)
        feats[:, o + 7] = a[nbr].mean(axis=1)
        feats[:, o + 8] = a[nbr].std(axis=1)
    return feats.astype(np.float32)


def image_inputs(image) -> np.ndarray:
    """Per-pixel input channels: occupancy, intensity and the intensity code
    (zero on empty pixels)."""
    img = np.asarray(image, dtype=np.float64)
    filled = (img > 0).astype(np.float64)
    code = intensity_code(img) * filled[..., None]
    return np.concatenate([filled[..., None], img[..., None], code], axis=-1).astype(np.float32)


class Encoders:
    """Point encoder, image encoder and frustum classification head.

    ``point_passes`` and ``image_passes`` count embedding evaluations so the
    reuse of one-shot embeddings can be audited.
    """

    def __init__(self, config: EmbedConfig = EmbedConfig(), seed: int = 0):
        self.config = config
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        self.point_net = MLP(self.store, "point", [POINT_FEATURES, c.hidden, c.hidden, c.hidden, c.f], rng)
        chans = (IMAGE_CHANNELS,) + tuple(c.image_channels) + (c.f,)
        self.image_net = [
            Conv3x3(self.store, f"image.{i}", chans[i], chans[i + 1], rng, padding="edge") for i in range(4)
        ]
        self.head = MLP(self.store, "frustum", [3 * c.f + 1, c.head_hidden, 1], rng)
        self.point_passes = 0
        self.image_passes = 0

    def embed_points(self, points, intensities) -> Tensor:
        self.point_passes += 1
        x = Tensor(point_descriptors(points, intensities, self.config.knn))
        return ad.l2_normalize(self.point_net(x), axis=-1)

    def embed_image(self, image) -> Tensor:
        self.image_passes += 1
        x = Tensor(image_inputs(image))
        for i, conv in enumerate(self.image_net):
            x = conv(x)
            if i < len(self.image_net) - 1:
                x = ad.relu(x)
        return ad.l2_normalize(x, axis=-1)

    def classify_frustum(self, point_emb: Tensor, image_emb: Tensor, pixel_mask=None) -> Tensor:
        """Probability that each point lies in the image's camera frustum.

        The head sees the point feature, the max- and mean-pooled image
        feature, and the point's best cosine match among the pixels selected
        by ``pixel_mask`` (all pixels when omitted).
        """
        f = image_emb.shape[-1]
        flat = ad.reshape(image_emb, (-1, f))
        g = ad.concat([ad.max_(flat, axis=0), ad.mean(flat, axis=0)], axis=0)
        n = point_emb.shape[0]
        match = best_match(point_emb, flat, None if pixel_mask is None else np.asarray(pixel_mask).ravel())
        # standardised within the scene so the head's threshold survives feature drift
        centred = match - ad.mean(match)
        z = centred / ad.sqrt(ad.mean(ad.square(centred)) + 1e-6)
        x = ad.concat([point_emb, ad.broadcast_to(g, (n, 2 * f)), ad.reshape(z, (n, 1))], axis=1)
        return ad.reshape(ad.sigmoid(self.head(x)), (n,))


def best_match(point_emb, pixel_emb, pixel_mask=None) -> Tensor:
    """Largest cosine similarity of every point feature to the selected pixel features."""
    pixels = ad.as_tensor(pixel_emb)
    if pixel_mask is not None:
        rows = np.flatnonzero(pixel_mask)
        if len(rows) == 0:
            return Tensor(np.full(point_emb.shape[0], -1.0))
        pixels = ad.take_rows(pixels, rows)
    sim = ad.matmul(ad.as_tensor(point_emb), ad.transpose(pixels))
    return ad.max_(sim, axis=1)


def embed_points(encoders: Encoders, points, intensities) -> Tensor:
    return encoders.embed_points(points, intensities)


def embed_image(encoders: Encoders, image) -> Tensor:
    return encoders.embed_image(image)


def classify_frustum(encoders: Encoders, point_emb, image_emb, pixel_mask=None) -> Tensor:
    return encoders.classify_frustum(point_emb, image_emb, pixel_mask)


# --- losses -----------------------------------------------------------------

def feature_distances(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between rows of ``a`` (n, f) and ``b`` (m, f)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    aa = ad.sum_(ad.square(a), axis=1, keepdims=True)
    bb = ad.reshape(ad.sum_(ad.square(b), axis=1), (1, -1))
    d2 = aa + bb - 2.0 * ad.matmul(a, ad.transpose(b))
    return ad.sqrt(ad.clip(d2, 1e-12, None))


def _circle_rows(d: Tensor, pos: np.ndarray, scale, m_pos, m_neg) -> Tensor:
    neg = ~pos
    wp = scale * ad.relu(d - m_pos)
    wn = scale * ad.relu(m_neg - d)
    lse_p = ad.logsumexp(wp * (d - m_pos), axis=1, mask=pos)
    lse_n = ad.logsumexp(wn * (m_neg - d), axis=1, mask=neg)
    valid = pos.any(axis=1)
    if not valid.any():
        return Tensor(0.0)
    per_anchor = ad.softplus(lse_p + lse_n)
    if not neg.any(axis=1).all():
        # log(1 + 0) for anchors without negatives, avoid -inf arithmetic
        per_anchor = per_anchor * Tensor(neg.any(axis=1).astype(np.float64))
    rows = np.flatnonzero(valid)
    if len(rows) < len(valid):
        per_anchor = ad.take_rows(ad.reshape(per_anchor, (-1, 1)), rows)
    return ad.mean(per_anchor)


def circle_loss(
    anchor_feats,
    pixel_feats,
    anchor_pixels,
    pixel_coords,
    r: float = 1.0,
    scale: float = 10.0,
    m_pos: float = 0.1,
    m_neg: float = 1.4,
) -> Tensor:
    """Bidirectional circle loss between point anchors and pixels.

    ``anchor_pixels[i]`` is the pixel of point anchor ``i`` and
    ``pixel_coords[j]`` the location of pixel feature ``j``. Pixel ``j`` is a
    positive for point ``i`` when the two locations are within ``r``; the
    pixel-anchored direction mirrors this with the transposed distances.
    Anchors with no positive are left out of the mean.
    """
    d = feature_distances(anchor_feats, pixel_feats)
    ap = np.asarray(anchor_pixels, dtype=np.float64)
    pc = np.asarray(pixel_coords, dtype=np.float64)
    pos = np.linalg.norm(ap[:, None, :] - pc[None, :, :], axis=2) <= r
    return circle_loss_from_distances(d, pos, scale, m_pos, m_neg)


def circle_loss_from_distances(d, positives, scale: float = 10.0, m_pos: float = 0.1, m_neg: float = 1.4) -> Tensor:
    """Sum of the row-anchored and column-anchored circle losses for a
    distance matrix ``d`` and a boolean positive mask of the same shape."""
    d = ad.as_tensor(d)
    pos = np.asarray(positives, dtype=bool)
    return _circle_rows(d, pos, scale, m_pos, m_neg) + _circle_rows(ad.transpose(d), pos.T, scale, m_pos, m_neg)


def weighted_bce(pred, labels, eps: float = 1e-7) -> Tensor:
    """Class-balanced binary cross-entropy on probabilities.

    Weights ``N / (2 N_pos)`` and ``N / (2 N_neg)`` average to one; a batch
    with a single class falls back to plain BCE.
    """
    pred = ad.as_tensor(pred)
    y = np.asarray(labels, dtype=bool)
    n = len(y)
    n_pos = int(y.sum())
    if 0 < n_pos < n:
        w = np.where(y, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        w = np.ones(n)
    p = ad.clip(pred, eps, 1.0 - eps)
    yf = y.astype(np.float64)
    ll = Tensor(yf) * ad.log(p) + Tensor(1.0 - yf) * ad.log(1.0 - p)
    return -ad.mean(ll * Tensor(w))


# --- pretraining ------------------------------------------------------------

def pixel_grid_rows(pixels, width: int) -> np.ndarray:
    return pixels[:, 1] * width + pixels[:, 0]


def scene_losses(encoders: Encoders, scene: ScenePair, rng, with_bce: bool = True):
    """Circle loss on sampled frustum anchors plus the weighted BCE."""
    c = encoders.config
    pe = encoders.embed_points(scene.points, scene.intensities)
    ie = encoders.embed_image(scene.image)
    idx = sample_frustum_points(scene, c.n_anchors, rng)
    uv, _, _ = project_points(scene.points[idx], scene.intrinsics, scene.gt_pose)
    pix = pixel_indices(uv)
    flat_img = ad.reshape(ie, (-1, c.f))
    anchors = ad.take_rows(pe, idx)
    pixels = ad.take_rows(flat_img, pixel_grid_rows(pix, scene.intrinsics.width))
    lc = circle_loss(anchors, pixels, pix, pix, c.r, c.circle_scale, c.margin_pos, c.margin_neg)
    lb = None
    if with_bce:
        lb = weighted_bce(encoders.classify_frustum(pe, ie, scene.image > 0), scene.gt_frustum_labels)
    return lc, lb, pe, ie


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 25
    lr: float = 3e-3
    beta1: float = 0.9
    final_lr_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or not 0 <= self.beta1 < 1:
            raise ValueError("need epochs >= 1, lr > 0 and beta1 in [0, 1)")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must lie in (0, 1]")


def pretrain_encoders(
    encoders: Encoders,
    scenes,
    epochs: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    beta1: float = 0.98,
    callback=None,
    final_lr_fraction: float = 1.0,
):
    """Joint circle-loss + weighted-BCE training; returns per-epoch means.

    The step size follows a cosine from ``lr`` down to ``lr * final_lr_fraction``
    (constant with the default fraction of 1).
    """
    rng = np.random.default_rng(seed)
    history = []
    total_steps = max(epochs * len(scenes) - 1, 1)
    step = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lcs, lbs = [], []
        for i in rng.permutation(len(scenes)):
            encoders.store.zero_grad()
            lc, lb, _, _ = scene_losses(encoders, scenes[i], rng)
            loss = lc + lb
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}, scene {i}")
            loss.backward()
            decay = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            ad.adam_step(encoders.store, lr=lr * (final_lr_fraction + (1.0 - final_lr_fraction) * decay), beta1=beta1)
            step += 1
            lcs.append(lc.item())
            lbs.append(lb.item())
        row = dict(epoch=epoch, circle=float(np.mean(lcs)), bce=float(np.mean(lbs)), seconds=time.perf_counter() - t0)
        log.info("pretrain epoch %d: circle %.4f bce %.4f (%.1fs)", epoch, row["circle"], row["bce"], row["seconds"])
        history.append(row)
        if callback is not None:
            callback(row)
    return history


def frustum_accuracy(encoders: Encoders, scenes) -> float:
    correct = total = 0
    with ad.no_grad():
        for s in scenes:
            pred = encoders.classify_frustum(
                encoders.embed_points(s.points, s.intensities), encoders.embed_image(s.image), s.image > 0
            ).data
            correct += int(((pred > 0.5) == s.gt_frustum_labels).sum())
            total += s.n_points
    return correct / total


def alignment_margin(encoders: Encoders, scenes, n: int = 256, seed: int = 0) -> tuple[float, float]:
    """Mean feature distance of true point/pixel pairs and of non-matching
    pairs (pixels further than ``r`` apart) on the given scenes."""
    rng = np.random.default_rng(seed)
    pos, neg = [], []
    with ad.no_grad():
        for s in scenes:
            pe = encoders.embed_points(s.points, s.intensities).data
            ie = encoders.embed_image(s.image).data.reshape(-1, encoders.config.f)
            idx = sample_frustum_points(s, n, rng)
            pix = pixel_indices(project_points(s.points[idx], s.intrinsics, s.gt_pose)[0])
            a = pe[idx]
            b = ie[pixel_grid_rows(pix, s.intrinsics.width)]
            d = np.linalg.norm(a[:, None] - b[None], axis=2)
            far = np.linalg.norm(pix[:, None] - pix[None], axis=2) > encoders.config.r
            pos.append(np.diag(d))
            neg.append(d[far])
    return float(np.mean(np.concatenate(pos))), float(np.mean(np.concatenate(neg)))
