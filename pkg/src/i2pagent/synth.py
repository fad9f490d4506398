"""Synthetic LiDAR-scan-like scenes, pose perturbation and sample files.

A scene imitates a single LiDAR sweep: the sensor sits at the world origin,
the ground is the plane ``Y = -sensor_height`` and boxes and walls stand
around the sensor. Every point carries an albedo; the camera image is the
albedo of the nearest point per pixel seen from the ground-truth camera
(empty pixels are 0).

Sample file layout (little-endian)::

    magic    8 bytes  b"I2PSCENE"
    version  u32      SAMPLE_VERSION
    count    u32      number of sections
    table    count x (tag: 4 ASCII bytes, offset: u64, length: u64)
    payloads, in table order

    PNTS  u32 N, then N*3 f64 (x, y, z in metres)
    INTS  u32 N, then N f32 albedo in [0, 1]
    IMAG  u32 H, u32 W, then H*W f32 row-major
    INTR  f64 fx, fy, cx, cy, near, far, then u32 W, u32 H
    POSE  9 f64 rotation (row-major), 3 f64 translation
    LABL  u32 N, then N u8 in-frustum labels
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Se3Pose,
    frustum_mask,
    level_camera_pose,
    yaw_rotation,
    zbuffer,
)

MIN_FRUSTUM_FRACTION = 0.05
MAX_ATTEMPTS = 100


class SceneGenerationError(RuntimeError):
    pass


class EmptyFrustumError(ValueError):
    pass


class SampleFormatError(ValueError):
    def __init__(self, section: str, message: str):
        super().__init__(f"[{section}] {message}")
        self.section = section


class SampleVersionError(SampleFormatError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 8192
    height: int = 80
    width: int = 256
    seed: int = 0
    sensor_height: float = 1.7
    ground_radius: float = 30.0
    ground_fraction: float = 0.4
    n_boxes: tuple[int, int] = (8, 14)
    box_size: tuple[float, float] = (1.0, 4.0)
    box_height: tuple[float, float] = (1.0, 4.5)
    n_walls: tuple[int, int] = (2, 4)
    wall_length: tuple[float, float] = (8.0, 20.0)
    wall_height: tuple[float, float] = (2.5, 6.0)
    object_distance: tuple[float, float] = (5.0, 24.0)
    camera_offset: float = 0.5

    def __post_init__(self):
        if self.n_points <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError("n_points and image size must be positive")
        for name in ("box_size", "box_height", "wall_length", "wall_height", "object_distance"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive range")
        if not 0.0 < self.ground_fraction < 1.0:
            raise ValueError("ground_fraction must be in (0, 1)")


@dataclass(frozen=True)
class PerturbSpec:
    max_yaw: float = 360.0
    max_planar_translation: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.max_yaw <= 360.0:
            raise ValueError("max_yaw must be in (0, 360]")
        if not self.max_planar_translation > 0.0:
            raise ValueError("max_planar_translation must be positive")


@dataclass(eq=False)
class ScenePair:
    points: np.ndarray
    intensities: np.ndarray
    image: np.ndarray
    intrinsics: CameraIntrinsics
    gt_pose: Se3Pose
    gt_frustum_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.gt_frustum_labels is None:
            self.gt_frustum_labels = frustum_mask(self.points, self.intrinsics, self.gt_pose)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def identical(self, other: ScenePair) -> bool:
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.intensities, other.intensities)
            and np.array_equal(self.image, other.image)
            and self.intrinsics == other.intrinsics
            and self.gt_pose == other.gt_pose
            and np.array_equal(self.gt_frustum_labels, other.gt_frustum_labels)
        )


# --- scene generation -------------------------------------------------------

def _texture(rng, coords):
    """Smooth random stripes over 1-D surface coordinates, in [-1, 1]."""
    k = rng.uniform(0.8, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(k * coords + phase)


def _sample_box(rng, n, center_xz, size_x, size_z, height, yaw, ground_y, albedo):
    """Surface points on the four sides and the top of a yawed box."""
    sx, sz, h = size_x, size_z, height
    areas = np.array([sx * h, sx * h, sz * h, sz * h, sx * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a = rng.uniform(-0.5, 0.5, n)
    b = rng.uniform(0.0, 1.0, n)
    local = np.zeros((n, 3))
    # faces 0/1: z = -/+ sz/2, faces 2/3: x = -/+ sx/2, face 4: top
    m = face <= 1
    local[m, 0] = a[m] * sx
    local[m, 1] = b[m] * h
    local[m, 2] = np.where(face[m] == 0, -sz / 2, sz / 2)
    m = (face == 2) | (face == 3)
    local[m, 2] = a[m] * sz
    local[m, 1] = b[m] * h
    local[m, 0] = np.where(face[m] == 2, -sx / 2, sx / 2)
    m = face == 4
    local[m, 0] = a[m] * sx
    local[m, 2] = rng.uniform(-0.5, 0.5, m.sum()) * sz
    local[m, 1] = h
    # stripes run along the perimeter so neighbouring faces differ
    along = np.where(face <= 1, local[:, 0], local[:, 2]) + face * 1.7
    tex = _texture(rng, along) * 0.12 + _texture(rng, local[:, 1]) * 0.06
    intensity = np.clip(albedo + tex, 0.05, 1.0)
    c, s = math.cos(yaw), math.sin(yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] + s * local[:, 2] + center_xz[0]
    world[:, 2] = -s * local[:, 0] + c * local[:, 2] + center_xz[1]
    world[:, 1] = local[:, 1] + ground_y
    return world, intensity


def _generate_once(config: SceneConfig, rng: np.random.Generator) -> ScenePair:
    K = CameraIntrinsics.default(config.height, config.width)
    ground_y = -config.sensor_height
    objects = []
    n_boxes = rng.integers(config.n_boxes[0], config.n_boxes[1] + 1)
    for _ in range(n_boxes):
        objects.append(
            dict(
                sx=rng.uniform(*config.box_size),
                sz=rng.uniform(*config.box_size),
                h=rng.uniform(*config.box_height),
            )
        )
    n_walls = rng.integers(config.n_walls[0], config.n_walls[1] + 1)
    for _ in range(n_walls):
        objects.append(
            dict(sx=rng.uniform(*config.wall_length), sz=rng.uniform(0.3, 0.6), h=rng.uniform(*config.wall_height))
        )
    for obj in objects:
        r = rng.uniform(*config.object_distance)
        az = rng.uniform(0, 2 * np.pi)
        obj["center"] = (r * math.sin(az), r * math.cos(az))
        obj["yaw"] = rng.uniform(0, np.pi)
        obj["albedo"] = rng.uniform(0.3, 0.95)

    n_ground = int(round(config.n_points * config.ground_fraction))
    n_obj_total = config.n_points - n_ground
    areas = np.array([2 * (o["sx"] + o["sz"]) * o["h"] + o["sx"] * o["sz"] for o in objects])
    counts = np.floor(areas / areas.sum() * n_obj_total).astype(int)
    counts[: n_obj_total - counts.sum()] += 1

    # ground: uniform in radius, like rings of a spinning LiDAR
    radius = rng.uniform(2.5, config.ground_radius, n_ground)
    az = rng.uniform(0, 2 * np.pi, n_ground)
    ground = np.stack([radius * np.sin(az), np.full(n_ground, ground_y), radius * np.cos(az)], axis=1)
    g_freq = rng.uniform(0.15, 0.5, size=(3, 2))
    g_phase = rng.uniform(0, 2 * np.pi, 3)
    g_tex = sum(
        np.sin(ground[:, 0] * g_freq[i, 0] + ground[:, 2] * g_freq[i, 1] + g_phase[i]) for i in range(3)
    )
    ground_int = np.clip(0.22 + 0.05 * g_tex, 0.05, 1.0)

    pts, ints = [ground], [ground_int]
    for obj, n in zip(objects, counts):
        if n == 0:
            continue
        p, i = _sample_box(rng, n, obj["center"], obj["sx"], obj["sz"], obj["h"], obj["yaw"], ground_y, obj["albedo"])
        pts.append(p)
        ints.append(i)
    points = np.concatenate(pts)
    intensities = np.concatenate(ints).astype(np.float32)

    offset = rng.uniform(-config.camera_offset, config.camera_offset, 3) * np.array([1.0, 0.2, 1.0])
    heading = rng.uniform(0.0, 360.0)
    gt = level_camera_pose(offset, heading)

    image = np.zeros(K.height * K.width, dtype=np.float32)
    flat, winners, _ = zbuffer(points, K, gt)
    image[flat] = intensities[winners]
    return ScenePair(points, intensities, image.reshape(K.height, K.width), K, gt)


def generate_scene(config: SceneConfig) -> ScenePair:
    """Deterministic scene for ``config.seed``.

    Scenes with fewer than 5% of points in the camera frustum are regenerated
    from derived seeds.
    """
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([config.seed, attempt])
        scene = _generate_once(config, rng)
        if scene.gt_frustum_labels.mean() >= MIN_FRUSTUM_FRACTION:
            return scene
    raise SceneGenerationError(
        f"seed {config.seed}: no scene with >= {MIN_FRUSTUM_FRACTION:.0%} in-frustum points after {MAX_ATTEMPTS} attempts"
    )


def generate_scenes(config: SceneConfig, seeds) -> list[ScenePair]:
    return [generate_scene(replace(config, seed=int(s))) for s in seeds]


# --- perturbation and sampling ----------------------------------------------

def perturbation(spec: PerturbSpec, rng: np.random.Generator | None = None) -> Se3Pose:
    """Random yaw plus planar translation (camera x/z plane)."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    yaw = rng.uniform(0.0, spec.max_yaw)
    mag = rng.uniform(0.0, spec.max_planar_translation)
    direction = rng.uniform(0.0, 2 * np.pi)
    t = np.array([mag * math.cos(direction), 0.0, mag * math.sin(direction)])
    return Se3Pose(yaw_rotation(yaw), t)


def perturb_pose(gt: Se3Pose, spec: PerturbSpec, rng: np.random.Generator | None = None) -> Se3Pose:
    """Initial estimate ``delta * gt``; the camera centre moves by at most
    ``max_planar_translation``."""
    return perturbation(spec, rng).compose(gt)


def sample_frustum_points(scene: ScenePair, n: int = 512, rng: np.random.Generator | None = None) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng(0)
    candidates = np.flatnonzero(scene.gt_frustum_labels)
    if len(candidates) == 0:
        raise EmptyFrustumError("scene has no point inside the ground-truth frustum")
    replace_ = len(candidates) < n
    return rng.choice(candidates, size=n, replace=replace_)


# --- sample files ----------------------------------------------------------

SAMPLE_MAGIC = b"I2PSCENE"
SAMPLE_VERSION = 1
_SECTIONS = ("PNTS", "INTS", "IMAG", "INTR", "POSE", "LABL")


def _encode_sections(scene: ScenePair) -> dict[str, bytes]:
    N = scene.n_points
    H, W = scene.image.shape
    K = scene.intrinsics
    return {
        "PNTS": struct.pack("<I", N) + np.ascontiguousarray(scene.points, dtype="<f8").tobytes(),
        "INTS": struct.pack("<I", N) + np.ascontiguousarray(scene.intensities, dtype="<f4").tobytes(),
        "IMAG": struct.pack("<II", H, W) + np.ascontiguousarray(scene.image, dtype="<f4").tobytes(),
        "INTR": struct.pack("<6d2I", K.fx, K.fy, K.cx, K.cy, K.near, K.far, K.width, K.height),
        "POSE": np.concatenate([scene.gt_pose.rotation.ravel(), scene.gt_pose.translation]).astype("<f8").tobytes(),
        "LABL": struct.pack("<I", N) + np.ascontiguousarray(scene.gt_frustum_labels, dtype=np.uint8).tobytes(),
    }


def save_sample(scene: ScenePair, path) -> None:
    sections = _encode_sections(scene)
    header_len = 8 + 4 + 4 + len(sections) * 20
    table = b""
    offset = header_len
    for tag in _SECTIONS:
        table += struct.pack("<4sQQ", tag.encode("ascii"), offset, len(sections[tag]))
        offset += len(sections[tag])
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC + struct.pack("<II", SAMPLE_VERSION, len(sections)) + table)
        for tag in _SECTIONS:
            fh.write(sections[tag])


def _need(buf: bytes, n: int, section: str):
    if len(buf) < n:
        raise SampleFormatError(section, f"truncated: need {n} bytes, have {len(buf)}")


def load_sample(path) -> ScenePair:
    data = Path(path).read_bytes()
    _need(data, 16, "header")
    if data[:8] != SAMPLE_MAGIC:
        raise SampleFormatError("header", f"bad magic {data[:8]!r}")
    version, count = struct.unpack_from("<II", data, 8)
    if version != SAMPLE_VERSION:
        raise SampleVersionError("header", f"unsupported version {version} (expected {SAMPLE_VERSION})")
    _need(data, 16 + 20 * count, "table")
    payload = {}
    for k in range(count):
        tag, offset, length = struct.unpack_from("<4sQQ", data, 16 + 20 * k)
        name = tag.decode("ascii", errors="replace")
        if offset + length > len(data):
            raise SampleFormatError(name, f"truncated: section ends at {offset + length}, file has {len(data)} bytes")
        payload[name] = data[offset : offset + length]
    for tag in _SECTIONS:
        if tag not in payload:
            raise SampleFormatError(tag, "missing section")

    def array(tag, header_fmt, dtype, per_item):
        buf = payload[tag]
        hsize = struct.calcsize(header_fmt)
        _need(buf, hsize, tag)
        dims = struct.unpack_from(header_fmt, buf)
        n = int(np.prod(dims)) * per_item
        itemsize = np.dtype(dtype).itemsize
        if len(buf) != hsize + n * itemsize:
            raise SampleFormatError(tag, f"expected {hsize + n * itemsize} bytes, got {len(buf)}")
        return dims, np.frombuffer(buf, dtype=dtype, offset=hsize, count=n)

    (N,), pts = array("PNTS", "<I", "<f8", 3)
    (Ni,), ints = array("INTS", "<I", "<f4", 1)
    (H, W), img = array("IMAG", "<II", "<f4", 1)
    (Nl,), lab = array("LABL", "<I", np.uint8, 1)
    if not N == Ni == Nl:
        raise SampleFormatError("INTS", f"point count mismatch: {N}, {Ni}, {Nl}")
    intr = payload["INTR"]
    if len(intr) != struct.calcsize("<6d2I"):
        raise SampleFormatError("INTR", f"expected {struct.calcsize('<6d2I')} bytes, got {len(intr)}")
    fx, fy, cx, cy, near, far, w, h = struct.unpack("<6d2I", intr)
    if (h, w) != (H, W):
        raise SampleFormatError("INTR", f"image size {W}x{H} disagrees with intrinsics {w}x{h}")
    pose = payload["POSE"]
    if len(pose) != 96:
        raise SampleFormatError("POSE", f"expected 96 bytes, got {len(pose)}")
    pv = np.frombuffer(pose, dtype="<f8")
    scene = ScenePair(
        points=pts.reshape(N, 3).astype(np.float64),
        intensities=ints.astype(np.float32),
        image=img.reshape(H, W).astype(np.float32),
        intrinsics=CameraIntrinsics(fx, fy, cx, cy, w, h, near, far),
        gt_pose=Se3Pose(pv[:9].reshape(3, 3), pv[9:]),
        gt_frustum_labels=lab.astype(bool),
    )
    if not np.array_equal(scene.gt_frustum_labels, frustum_mask(scene.points, scene.intrinsics, scene.gt_pose)):
        raise SampleFormatError("LABL", "labels disagree with the frustum of the stored pose")
    return scene
