"""Registration metrics, per-iteration evaluation, overlay images and the
command-line interface.

Usage::

    python -m i2pagent [--config FILE] [--seed N] [--out DIR] VERB [options]

Verbs: ``gen``, ``pretrain``, ``train``, ``eval``, ``demo``. Exit status is 0
on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import ActionSpec, Agent
from .autodiff import load_checkpoint, save_checkpoint
from .embed import EmbedConfig, Encoders, PretrainConfig, frustum_accuracy, pretrain_encoders
from .geometry import EMPTY_DEPTH, PoseError, Se3Pose, render_depth_map
from .state import EpisodeContext, StateConfig
from .synth import PerturbSpec, ScenePair, SceneConfig, generate_scenes, load_sample, perturb_pose, save_sample
from .train import GaeConfig, PpoConfig, RewardSpec, TrainConfig, rollout_episode, train_agent

log = logging.getLogger(__name__)

SAMPLE_SUFFIX = ".i2ps"
REPORT_HEADER = ("iteration", "rte_mean", "rte_std", "rre_mean", "rre_std", "rr", "time_ms")


# --- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class RecallSpec:
    tau_r: float = 10.0  # degrees
    tau_t: float = 5.0  # meters

    def __post_init__(self):
        if not (self.tau_r > 0 and self.tau_t > 0):
            raise ValueError("recall thresholds must be positive")


def registration_recall(errors, spec: RecallSpec = RecallSpec()) -> float:
    """Fraction of cases with rotation error below ``tau_r`` and translation
    error below ``tau_t``."""
    errors = list(errors)
    if not errors:
        raise ValueError("registration recall of an empty error list")
    hits = sum(1 for e in errors if e.rre < spec.tau_r and e.rte < spec.tau_t)
    return hits / len(errors)


@dataclass(frozen=True)
class EvalRow:
    iteration: int
    rte_mean: float
    rte_std: float
    rre_mean: float
    rre_std: float
    rr: float
    time_ms: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    errors: list[list[PoseError]] = field(default_factory=list)  # [scene][iteration]

    @property
    def rr_series(self) -> np.ndarray:
        return np.array([r.rr for r in self.rows])

    def row(self, iteration: int) -> EvalRow:
        return self.rows[iteration - 1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow(
                [r.iteration] + [f"{getattr(r, k):.6f}" for k in REPORT_HEADER[1:]]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def evaluate(
    agent: Agent,
    encoders: Encoders,
    scenes,
    iterations: int = 10,
    spec: RecallSpec = RecallSpec(),
    seed: int = 0,
    perturb: PerturbSpec = PerturbSpec(),
    policy: str = "agent",
    csv_path=None,
) -> EvalReport:
    """Greedy rollouts of ``iterations`` steps from a seeded perturbation of
    every scene; errors are aggregated per iteration index."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if len(scenes) == 0:
        raise ValueError("evaluation needs at least one scene")
    per_scene, seconds = [], []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, i])
        ep = rollout_episode(scene, encoders, agent, "greedy", rng, iterations, perturb, policy=policy)
        per_scene.append(ep.errors)
        seconds.append(ep.step_seconds)
    seconds = np.array(seconds)
    rows = []
    for k in range(iterations):
        errs = [e[k] for e in per_scene]
        rre = np.array([e.rre for e in errs])
        rte = np.array([e.rte for e in errs])
        rows.append(
            EvalRow(
                iteration=k + 1,
                rte_mean=float(rte.mean()),
                rte_std=float(rte.std()),
                rre_mean=float(rre.mean()),
                rre_std=float(rre.std()),
                rr=registration_recall(errs, spec),
                time_ms=float(seconds[:, k].mean() * 1e3),
            )
        )
    report = EvalReport(rows, per_scene)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


# --- overlay images ---------------------------------------------------------

def overlay_image(scene: ScenePair, pose: Se3Pose, alpha: float = 0.6) -> np.ndarray:
    """8-bit overlay of the scene image and the depth of the points projected
    with ``pose`` (near points bright, far points dark)."""
    depth = render_depth_map(scene.points, scene.intrinsics, pose).depth
    filled = depth != EMPTY_DEPTH
    K = scene.intrinsics
    shade = np.zeros_like(depth)
    shade[filled] = 1.0 - (depth[filled] - K.near) / (K.far - K.near)
    out = np.asarray(scene.image, dtype=np.float64).copy()
    out[filled] = (1.0 - alpha) * out[filled] + alpha * shade[filled]
    return np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1 :]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def render_overlay(scene: ScenePair, pose: Se3Pose, path, alpha: float = 0.6) -> np.ndarray:
    """Write the overlay for ``pose`` as a binary PGM and return its pixels."""
    if not pose.is_valid(1e-6):
        raise ValueError("overlay pose is not a rigid transform")
    pixels = overlay_image(scene, pose, alpha)
    write_pgm(path, pixels)
    return pixels


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    iterations: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


CONFIG_SECTIONS = {
    "scene": SceneConfig,
    "perturb": PerturbSpec,
    "embed": EmbedConfig,
    "pretrain": PretrainConfig,
    "state": StateConfig,
    "action": ActionSpec,
    "reward": RewardSpec,
    "gae": GaeConfig,
    "ppo": PpoConfig,
    "train": TrainConfig,
    "recall": RecallSpec,
    "eval": EvalConfig,
}


class ConfigError(ValueError):
    pass


def _scalar_fields(cls):
    """Fields configurable by a single value (nested configs have their own section)."""
    inst = cls()
    return [f for f in dataclasses.fields(cls) if not dataclasses.is_dataclass(getattr(inst, f.name))]


def _parse_value(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def default_config_text() -> str:
    """Every configurable default as ``section.key = value`` lines."""
    lines = []
    for section, cls in CONFIG_SECTIONS.items():
        inst = cls()
        lines.append(f"# {section}")
        for f in _scalar_fields(cls):
            v = getattr(inst, f.name)
            text = ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"{section}.{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str) -> dict:
    """``section.key = value`` lines into per-section override dicts."""
    overrides: dict[str, dict] = {s: {} for s in CONFIG_SECTIONS}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"line {n}: unknown section {section!r}")
        fields = {f.name: f for f in _scalar_fields(CONFIG_SECTIONS[section])}
        if name not in fields:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        default = getattr(CONFIG_SECTIONS[section](), name)
        overrides[section][name] = _parse_value(value, default, key)
    return overrides


@dataclass
class Settings:
    scene: SceneConfig
    perturb: PerturbSpec
    embed: EmbedConfig
    pretrain: PretrainConfig
    state: StateConfig
    action: ActionSpec
    reward: RewardSpec
    gae: GaeConfig
    ppo: PpoConfig
    train: TrainConfig
    recall: RecallSpec
    eval: EvalConfig


def build_settings(overrides: dict | None = None) -> Settings:
    overrides = overrides or {}
    made = {}
    for section, cls in CONFIG_SECTIONS.items():
        kw = dict(overrides.get(section, {}))
        if section == "train":
            kw.update(perturb=made["perturb"], reward=made["reward"])
        try:
            made[section] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    if made["state"].f != made["embed"].f:
        raise ConfigError("state.f must equal embed.f")
    return Settings(**made)


def load_settings(path) -> Settings:
    if path is None:
        return build_settings()
    return build_settings(parse_config(Path(path).read_text()))


# --- command line -----------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common_flags(default) -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=default, help="key = value configuration file")
    common.add_argument("--seed", type=int, default=default, help="base random seed")
    common.add_argument("--out", default=default, help="output directory")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="i2pagent", parents=[_common_flags(None)], description="Image-to-point-cloud registration agent")
    parser.add_argument("--print-config", action="store_true", help="print every default setting and exit")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    common = _common_flags(argparse.SUPPRESS)

    def data_flags(p):
        p.add_argument("--data", help="directory of sample files")
        p.add_argument("--count", type=int, default=10, help="scenes to generate when --data is absent")

    p = sub.add_parser("gen", parents=[common], help="write a dataset of synthetic sample files")
    p.add_argument("--count", type=int, default=10)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the point and image encoders")
    data_flags(p)

    p = sub.add_parser("train", parents=[common], help="train the agent with frozen encoders")
    data_flags(p)
    p.add_argument("--encoders", required=True, help="encoder checkpoint")
    p.add_argument("--val", help="directory of held-out sample files")

    p = sub.add_parser("eval", parents=[common], help="per-iteration evaluation report")
    data_flags(p)
    p.add_argument("--encoders", help="encoder checkpoint (random encoders when absent)")
    p.add_argument("--agent", help="agent checkpoint (random agent when absent)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--expert", action="store_true", help="run the expert instead of the agent")

    p = sub.add_parser("demo", parents=[common], help="overlay frames for every iteration on one scene")
    p.add_argument("--scene", help="sample file (generated from the seed when absent)")
    p.add_argument("--encoders")
    p.add_argument("--agent")
    p.add_argument("--iterations", type=int)
    return parser


def _scenes(args, settings: Settings, seed: int):
    if getattr(args, "data", None):
        files = sorted(Path(args.data).glob(f"*{SAMPLE_SUFFIX}"))
        if not files:
            raise FileNotFoundError(f"no {SAMPLE_SUFFIX} files in {args.data}")
        return [load_sample(f) for f in files]
    return generate_scenes(settings.scene, range(seed, seed + args.count))


def _encoders(path, settings: Settings, seed: int) -> Encoders:
    enc = Encoders(settings.embed, seed=seed)
    if path:
        load_checkpoint(enc.store, path)
    return enc


def _agent(path, settings: Settings, seed: int) -> Agent:
    agent = Agent(settings.action, settings.state, seed=seed)
    if path:
        load_checkpoint(agent.store, path)
    return agent


def _run(args, settings: Settings) -> None:
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    verb = args.verb
    if verb == "gen":
        if args.count < 1:
            raise UsageError("--count must be positive")
        for s in range(seed, seed + args.count):
            scene = generate_scenes(settings.scene, [s])[0]
            save_sample(scene, out / f"scene_{s:06d}{SAMPLE_SUFFIX}")
        print(f"wrote {args.count} samples to {out}")
    elif verb == "pretrain":
        scenes = _scenes(args, settings, seed)
        enc = Encoders(settings.embed, seed=seed)
        pc = settings.pretrain
        history = pretrain_encoders(enc, scenes, pc.epochs, pc.lr, pc.seed, pc.beta1, final_lr_fraction=pc.final_lr_fraction)
        save_checkpoint(enc.store, out / "encoders.ckpt")
        with open(out / "pretrain.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "circle", "bce"))
            for row in history:
                w.writerow((row["epoch"], f"{row['circle']:.6f}", f"{row['bce']:.6f}"))
        print(f"frustum accuracy on training scenes: {frustum_accuracy(enc, scenes):.3f}")
    elif verb == "train":
        scenes = _scenes(args, settings, seed)
        val = [load_sample(f) for f in sorted(Path(args.val).glob(f"*{SAMPLE_SUFFIX}"))] if args.val else []
        enc = _encoders(args.encoders, settings, seed)
        agent = Agent(settings.action, settings.state, seed=seed)
        train_agent(agent, enc, scenes, val, settings.train, settings.ppo, settings.gae, seed, out / "metrics.csv")
        save_checkpoint(agent.store, out / "agent.ckpt")
        print(f"wrote {out / 'agent.ckpt'} and {out / 'metrics.csv'}")
    elif verb == "eval":
        scenes = _scenes(args, settings, seed)
        iterations = args.iterations or settings.eval.iterations
        report = evaluate(
            _agent(args.agent, settings, seed),
            _encoders(args.encoders, settings, seed),
            scenes,
            iterations,
            settings.recall,
            seed,
            settings.perturb,
            "expert" if args.expert else "agent",
            out / "eval.csv",
        )
        print(report.to_csv(), end="")
    elif verb == "demo":
        scene = load_sample(args.scene) if args.scene else generate_scenes(settings.scene, [seed])[0]
        enc = _encoders(args.encoders, settings, seed)
        agent = _agent(args.agent, settings, seed)
        iterations = args.iterations or settings.eval.iterations
        rng = np.random.default_rng(seed)
        start = perturb_pose(scene.gt_pose, settings.perturb, rng)
        ep = rollout_episode(
            scene, enc, agent, "greedy", rng, iterations, initial_pose=start, context=EpisodeContext.from_scene(scene, enc)
        )
        for k, pose in enumerate(ep.poses):
            render_overlay(scene, pose, out / f"frame_{k:03d}.pgm")
        render_overlay(scene, scene.gt_pose, out / "ground_truth.pgm")
        for k, e in enumerate(ep.errors, 1):
            print(f"iteration {k}: rre {e.rre:.3f} deg, rte {e.rte:.3f} m")
    else:
        raise UsageError(build_parser().format_usage() + "i2pagent: error: a verb is required")


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_config:
            print(default_config_text(), end="")
            return 0
        settings = load_settings(args.config)
        if args.verb is None:
            raise UsageError(parser.format_usage() + "i2pagent: error: a verb is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"i2pagent: config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i2pagent: cannot read config: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        _run(args, settings)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # any failure of the pipeline itself
        print(f"i2pagent: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())
