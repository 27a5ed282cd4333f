"""Seeded synthetic moving-shape video benchmark.

Eight motion patterns define the eight classes; shape kind, colors and start
pose are per-clip nuisance variables. Two preset regimes reproduce opposite
stream orderings: "motion-favored" has clean motion and label-independent
appearance, "camera-noisy" adds global per-frame jitter (which corrupts flow
everywhere) and ties the foreground color to the class (which feeds the RGB
stream). Trajectories are centered on the middle frame, so a single middle
frame carries no positional class cue.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .flow import TvL1Params, flow_fields_for_clip, read_flow_cache, write_flow_cache
from .rng import Stream

CLIP_MAGIC = b"VCLP"

MOTION_PATTERNS = (
    "translate-left",
    "translate-right",
    "translate-up",
    "translate-down",
    "orbit-cw",
    "orbit-ccw",
    "expand",
    "contract",
)

SHAPE_KINDS = ("square", "disc", "triangle")

# fg colors used when the appearance cue ties color to class
PALETTE = np.array(
    [
        (0.90, 0.20, 0.20),
        (0.20, 0.90, 0.20),
        (0.25, 0.35, 0.95),
        (0.90, 0.90, 0.20),
        (0.90, 0.25, 0.90),
        (0.20, 0.90, 0.90),
        (0.95, 0.60, 0.15),
        (0.92, 0.92, 0.92),
    ],
    dtype=np.float32,
)

_SUPERSAMPLE = 4


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ActionClassSpec:
    class_id: int
    motion_pattern: str
    speed: float = 2.0

    def __post_init__(self):
        if self.motion_pattern not in MOTION_PATTERNS:
            raise DataError(f"unknown motion pattern {self.motion_pattern!r}")


@dataclass(frozen=True)
class SceneConfig:
    camera_noise_sigma: float = 0.0
    appearance_cue: bool = False

    def __post_init__(self):
        if self.camera_noise_sigma < 0:
            raise DataError("camera_noise_sigma must be >= 0")


@dataclass(frozen=True)
class DatasetParams:
    seed: int = 0
    num_classes: int = 8
    clips_per_class: int = 20
    clip_t: int = 8
    clip_h: int = 32
    clip_w: int = 32
    camera_noise_sigma: float = 0.0
    appearance_cue: bool = False
    train_fraction: float = 0.8
    speed: float = 2.0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(MOTION_PATTERNS):
            raise DataError(f"num_classes must be in [2, {len(MOTION_PATTERNS)}]")
        if self.clips_per_class < 2:
            raise DataError("need at least 2 clips per class")
        if not 0 < self.train_fraction < 1:
            raise DataError("train_fraction must be in (0, 1)")

    @property
    def clip_shape(self) -> tuple[int, int, int]:
        return (self.clip_t, self.clip_h, self.clip_w)

    def scene(self) -> SceneConfig:
        return SceneConfig(self.camera_noise_sigma, self.appearance_cue)

    def class_spec(self, class_id: int) -> ActionClassSpec:
        return ActionClassSpec(class_id, MOTION_PATTERNS[class_id], self.speed)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: int
    class_id: int
    split: str
    render_seed: int


@dataclass(frozen=True)
class DatasetManifest:
    params: DatasetParams
    clips: tuple[ClipRecord, ...]


def make_regime(regime: str, seed: int = 0, **overrides) -> DatasetParams:
    """Preset inputs for the two benchmark regimes."""
    if regime == "motion-favored":
        base = DatasetParams(seed=seed, camera_noise_sigma=0.0, appearance_cue=False)
    elif regime == "camera-noisy":
        base = DatasetParams(seed=seed, camera_noise_sigma=3.0, appearance_cue=True)
    else:
        raise DataError(f"unknown regime {regime!r} (motion-favored or camera-noisy)")
    return replace(base, **overrides) if overrides else base


def sample_camera_shifts(sigma: float, n: int, stream: Stream) -> np.ndarray:
    """n integer-rounded (dx, dy) global shifts drawn from the render stream."""
    normals = stream.normal((n, 2))
    return np.rint(sigma * normals).astype(np.int64)


def _coverage(kind: str, cx: float, cy: float, radius: float, h: int, w: int) -> np.ndarray:
    """Anti-aliased occupancy in [0, 1] via subpixel supersampling."""
    ss = _SUPERSAMPLE
    xs = (np.arange(w * ss) + 0.5) / ss - 0.5
    ys = (np.arange(h * ss) + 0.5) / ss - 0.5
    gx, gy = np.meshgrid(xs, ys)
    dx = gx - cx
    dy = gy - cy
    if kind == "square":
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= 0.9 * radius
    elif kind == "disc":
        inside = dx * dx + dy * dy <= radius * radius
    elif kind == "triangle":
        circ = 1.3 * radius
        angles = np.deg2rad([-90.0, 30.0, 150.0])
        vx = cx + circ * np.cos(angles)
        vy = cy + circ * np.sin(angles)
        orient = (vx[1] - vx[0]) * (vy[2] - vy[0]) - (vy[1] - vy[0]) * (vx[2] - vx[0])
        inside = np.ones_like(gx, dtype=bool)
        for a in range(3):
            b = (a + 1) % 3
            cross = (vx[b] - vx[a]) * (gy - vy[a]) - (vy[b] - vy[a]) * (gx - vx[a])
            inside &= (cross * orient) >= 0
    else:
        raise DataError(f"unknown shape kind {kind!r}")
    return inside.reshape(h, ss, w, ss).mean(axis=(1, 3)).astype(np.float32)


def render_clip(class_spec: ActionClassSpec, scene: SceneConfig,
                t: int, h: int, w: int, render_seed: int) -> np.ndarray:
    """One RGB clip (3, T, H, W) with values in [0, 1], pure in render_seed."""
    if min(h, w) < 16:
        raise DataError(f"frame size {h}x{w} is degenerate (minimum 16 px)")
    stream = Stream(render_seed, "render")
    kind = SHAPE_KINDS[int(stream.integers(1, len(SHAPE_KINDS))[0])]
    fg = (0.55 + 0.40 * stream.uniform(3)).astype(np.float32)
    if scene.appearance_cue:
        fg = PALETTE[class_spec.class_id].copy()
    bg = (0.05 + 0.30 * stream.uniform(3)).astype(np.float32)
    jitter = 6.0 * stream.uniform(2) - 3.0
    size_u = float(stream.uniform(1)[0])
    phase = float(stream.uniform(1)[0]) * 2.0 * np.pi
    texture = (0.05 * (2.0 * stream.uniform(h * w) - 1.0)).reshape(h, w).astype(np.float32)
    shifts = sample_camera_shifts(scene.camera_noise_sigma, t, stream)

    scale_px = min(h, w) / 32.0
    radius0 = (4.5 + 2.0 * size_u) * scale_px
    speed = class_spec.speed * scale_px
    ccx, ccy = (w - 1) / 2.0, (h - 1) / 2.0
    mid = (t - 1) / 2.0
    pattern = class_spec.motion_pattern

    background = np.clip(bg[:, None, None] + texture[None], 0.0, 1.0)
    frames = np.empty((t, h, w, 3), dtype=np.float32)
    for ti in range(t):
        dt = ti - mid
        radius = radius0
        if pattern.startswith("translate-"):
            direction = {
                "translate-left": (-1.0, 0.0),
                "translate-right": (1.0, 0.0),
                "translate-up": (0.0, -1.0),
                "translate-down": (0.0, 1.0),
            }[pattern]
            cx = ccx + jitter[0] + direction[0] * speed * dt
            cy = ccy + jitter[1] + direction[1] * speed * dt
        elif pattern.startswith("orbit-"):
            orbit_r = 0.22 * min(h, w)
            omega = speed / orbit_r
            sign = 1.0 if pattern == "orbit-cw" else -1.0
            angle = phase + sign * omega * dt
            cx = ccx + orbit_r * np.cos(angle)
            cy = ccy + orbit_r * np.sin(angle)
        else:  # expand / contract
            rate = 0.55 * speed
            sign = 1.0 if pattern == "expand" else -1.0
            radius = float(np.clip(radius0 + sign * rate * dt, 1.5, 0.35 * min(h, w)))
            cx = ccx + jitter[0]
            cy = ccy + jitter[1]
        cx = float(np.clip(cx, radius, w - 1 - radius))
        cy = float(np.clip(cy, radius, h - 1 - radius))
        cov = _coverage(kind, cx, cy, radius, h, w)
        frame = background * (1.0 - cov[None]) + fg[:, None, None] * cov[None]
        frame = np.moveaxis(frame, 0, 2)
        dx, dy = int(shifts[ti, 0]), int(shifts[ti, 1])
        if dx or dy:
            frame = np.roll(frame, (dy, dx), axis=(0, 1))
        frames[ti] = frame
    clip = np.moveaxis(frames, 3, 0)
    return np.ascontiguousarray(np.clip(clip, 0.0, 1.0), dtype=np.float32)


def write_clip(path, clip: np.ndarray) -> None:
    """VCLP clip file: magic, u32 C/T/H/W, then f32 LE data."""
    if clip.ndim != 4:
        raise DataError(f"clip must be 4-d, got {clip.ndim}-d")
    blob = CLIP_MAGIC + struct.pack("<IIII", *clip.shape)
    blob += np.ascontiguousarray(clip, dtype="<f4").tobytes()
    Path(path).write_bytes(blob)


def read_clip(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != CLIP_MAGIC:
        raise DataError(f"not a clip file: {path}")
    c, t, h, w = struct.unpack("<IIII", raw[4:20])
    n = c * t * h * w
    if len(raw) != 20 + 4 * n:
        raise DataError(f"clip file has wrong length: {path}")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(c, t, h, w).astype(np.float32)


_BOOL_NAMES = {"true": True, "false": False}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def manifest_to_text(manifest: DatasetManifest) -> str:
    lines = []
    for f in fields(DatasetParams):
        lines.append(f"{f.name} = {_format_value(getattr(manifest.params, f.name))}")
    for rec in manifest.clips:
        lines.append(f"clip {rec.clip_id} {rec.class_id} {rec.split} {rec.render_seed}")
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> DatasetManifest:
    globals_: dict = {}
    clips: list[ClipRecord] = []
    field_types = {f.name: f.type for f in fields(DatasetParams)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("clip "):
            parts = line.split()
            if len(parts) != 5 or parts[3] not in ("train", "test"):
                raise DataError(f"manifest line {lineno}: bad clip record {line!r}")
            clips.append(ClipRecord(int(parts[1]), int(parts[2]), parts[3], int(parts[4])))
            continue
        if "=" not in line:
            raise DataError(f"manifest line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in field_types:
            raise DataError(f"manifest line {lineno}: unknown key {key!r}")
        kind = field_types[key]
        if kind == "bool":
            if value not in _BOOL_NAMES:
                raise DataError(f"manifest line {lineno}: bad bool {value!r}")
            globals_[key] = _BOOL_NAMES[value]
        elif kind == "int":
            globals_[key] = int(value)
        else:
            globals_[key] = float(value)
    return DatasetManifest(params=DatasetParams(**globals_), clips=tuple(clips))


def build_manifest(params: DatasetParams) -> DatasetManifest:
    seed_stream = Stream(params.seed, "render-seeds")
    n_train = int(params.clips_per_class * params.train_fraction)
    clips = []
    for class_id in range(params.num_classes):
        for k in range(params.clips_per_class):
            clip_id = class_id * params.clips_per_class + k
            split = "train" if k < n_train else "test"
            clips.append(ClipRecord(clip_id, class_id, split, seed_stream.randint64()))
    return DatasetManifest(params=params, clips=tuple(clips))


def clip_filename(clip_id: int) -> str:
    return f"clip_{clip_id:05d}"


def generate_dataset(params: DatasetParams, out_dir) -> DatasetManifest:
    """Render every clip and write the manifest; pure function of params."""
    root = Path(out_dir)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(params)
    scene = params.scene()
    for rec in manifest.clips:
        clip = render_clip(params.class_spec(rec.class_id), scene,
                           params.clip_t, params.clip_h, params.clip_w, rec.render_seed)
        write_clip(root / "clips" / f"{clip_filename(rec.clip_id)}.vclp", clip)
    (root / "manifest.txt").write_text(manifest_to_text(manifest), encoding="utf-8")
    return manifest


def load_manifest(root) -> DatasetManifest:
    return manifest_from_text((Path(root) / "manifest.txt").read_text(encoding="utf-8"))


class ClipDataset:
    """Read access to a generated dataset plus the per-clip flow cache."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.params = self.manifest.params
        self.records = {rec.clip_id: rec for rec in self.manifest.clips}
        self.train_ids = sorted(r.clip_id for r in self.manifest.clips if r.split == "train")
        self.test_ids = sorted(r.clip_id for r in self.manifest.clips if r.split == "test")

    def ids(self, split: str) -> list[int]:
        if split == "train":
            return list(self.train_ids)
        if split == "test":
            return list(self.test_ids)
        raise DataError(f"unknown split {split!r}")

    def label(self, clip_id: int) -> int:
        return self.records[clip_id].class_id

    def labels(self, ids) -> np.ndarray:
        return np.array([self.label(i) for i in ids], dtype=np.int64)

    def rgb_clip(self, clip_id: int) -> np.ndarray:
        return read_clip(self.root / "clips" / f"{clip_filename(clip_id)}.vclp")

    def flow_cache_path(self, clip_id: int) -> Path:
        return self.root / "flow" / f"{clip_filename(clip_id)}.flo3"

    def flow_clip(self, clip_id: int, tvl1: TvL1Params | None = None) -> np.ndarray:
        tvl1 = tvl1 or TvL1Params()
        cache = self.flow_cache_path(clip_id)
        if cache.exists():
            u, v = read_flow_cache(cache)
        else:
            u, v = flow_fields_for_clip(self.rgb_clip(clip_id), tvl1)
            cache.parent.mkdir(parents=True, exist_ok=True)
            write_flow_cache(cache, u, v)
        return np.ascontiguousarray(np.stack([u, v]) / np.float32(tvl1.clip_limit))

    def precompute_flow(self, tvl1: TvL1Params | None = None) -> int:
        """Fill the flow cache for every clip; returns how many were computed."""
        tvl1 = tvl1 or TvL1Params()
        computed = 0
        for rec in self.manifest.clips:
            if not self.flow_cache_path(rec.clip_id).exists():
                self.flow_clip(rec.clip_id, tvl1)
                computed += 1
        return computed

    def rgb_batch(self, ids) -> np.ndarray:
        return np.stack([self.rgb_clip(i) for i in ids])

    def flow_batch(self, ids, tvl1: TvL1Params | None = None) -> np.ndarray:
        return np.stack([self.flow_clip(i, tvl1) for i in ids])
