"""Synthetic moving-shapes videos with analytically exact optical flow.

A scene is a single rigid shape (square, disk, or bar) translating over a
static background. Because the motion is closed-form, the per-frame flow is
known exactly: every pixel inside the shape at frame t carries the shape's
displacement from t to t+1, every other pixel carries (0, 0). That makes
the dataset its own flow oracle, standing in for real videos plus an
optical-flow estimator.

Class labels encode the motion kind only (linear / oscillate / circular);
appearance varies freely, so representation probes on these labels test
motion sensitivity specifically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import core
from . import fileio

MOTION_KINDS = ("linear", "oscillate", "circular")
SHAPE_KINDS = ("square", "disk", "bar")

MIN_FRAMES = 32  # clips shorter than this are not valid training material


class SceneSpecError(ValueError):
    """Raised when a scene description is inconsistent or escapes the canvas."""


@dataclass(frozen=True)
class MotionSpec:
    """Closed-form trajectory of the shape center.

    linear:    center(t) = start + velocity * t
    oscillate: center(t) = start + amplitude * sin(2*pi*(t + phase_frames)/period) * direction
    circular:  center(t) = start + radius * (cos(angle0 + rate*t), sin(angle0 + rate*t))
               (``start`` is the circle center)
    """

    kind: str
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy) px/frame
    amplitude: float = 0.0
    period: float = 30.0
    phase_frames: float = 0.0
    direction: tuple[float, float] = (1.0, 0.0)
    radius: float = 0.0
    rate: float = 0.0  # radians/frame
    angle0: float = 0.0
    class_label: int = field(default=-1)

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise SceneSpecError(f"unknown motion kind {self.kind!r}, expected one of {MOTION_KINDS}")
        if self.class_label < 0:
            object.__setattr__(self, "class_label", MOTION_KINDS.index(self.kind))

    def position(self, start, t):
        x0, y0 = start
        if self.kind == "linear":
            return (x0 + self.velocity[0] * t, y0 + self.velocity[1] * t)
        if self.kind == "oscillate":
            s = self.amplitude * math.sin(2.0 * math.pi * (t + self.phase_frames) / self.period)
            return (x0 + s * self.direction[0], y0 + s * self.direction[1])
        a = self.angle0 + self.rate * t
        return (x0 + self.radius * math.cos(a), y0 + self.radius * math.sin(a))

    def displacement(self, start, t):
        """Shape displacement from frame t to t+1, in pixels."""
        x1, y1 = self.position(start, t)
        x2, y2 = self.position(start, t + 1)
        return (x2 - x1, y2 - y1)


@dataclass(frozen=True)
class BackgroundSpec:
    """Flat color or a vertical two-color gradient, values in [-1, 1]."""

    kind: str = "flat"  # "flat" | "vgradient"
    color: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    color2: tuple[float, float, float] = (0.5, 0.5, 0.5)  # bottom color for "vgradient"

    def render(self, canvas):
        h, w = canvas
        top = np.asarray(self.color, dtype=np.float32)
        if self.kind == "flat":
            return np.broadcast_to(top, (h, w, 3)).copy()
        if self.kind == "vgradient":
            bottom = np.asarray(self.color2, dtype=np.float32)
            ramp = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
            return (top * (1.0 - ramp) + bottom * ramp) * np.ones((1, w, 1), dtype=np.float32)
        raise SceneSpecError(f"unknown background kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    shape_kind: str
    size_px: int
    color: tuple[float, float, float]
    background: BackgroundSpec
    motion: MotionSpec
    start: tuple[float, float]  # (x, y) in pixels
    n_frames: int = 32
    canvas: tuple[int, int] = (76, 76)  # (H, W)

    def half_extent(self):
        """Conservative (hx, hy) half-size of the shape around its center."""
        if self.shape_kind == "bar":
            return (self.size_px / 2.0, self.size_px / 6.0)
        return (self.size_px / 2.0, self.size_px / 2.0)

    def validate(self):
        if self.shape_kind not in SHAPE_KINDS:
            raise SceneSpecError(f"unknown shape kind {self.shape_kind!r}, expected one of {SHAPE_KINDS}")
        if self.size_px < 3:
            raise SceneSpecError(f"size_px must be >= 3, got {self.size_px}")
        if self.n_frames < MIN_FRAMES:
            raise SceneSpecError(f"n_frames must be >= {MIN_FRAMES}, got {self.n_frames}")
        h, w = self.canvas
        hx, hy = self.half_extent()
        for t in range(self.n_frames):
            cx, cy = self.motion.position(self.start, t)
            if cx - hx < 0 or cx + hx > w - 1 or cy - hy < 0 or cy + hy > h - 1:
                raise SceneSpecError(
                    f"shape escapes canvas at frame {t}: center ({cx:.2f}, {cy:.2f}), "
                    f"half extent ({hx}, {hy}), canvas {self.canvas}"
                )
        for t in range(self.n_frames - 1):
            dx, dy = self.motion.displacement(self.start, t)
            if math.hypot(dx, dy) > core.FLOW_SCALE:
                raise SceneSpecError(
                    f"displacement {math.hypot(dx, dy):.2f} px at frame {t} exceeds "
                    f"the flow scale {core.FLOW_SCALE}"
                )
        return self


@dataclass
class Sample:
    """One clip: video [T, H, W, 3], flow [T, H, W, 2], motion-class label."""

    video: np.ndarray
    flow: np.ndarray
    label: int


def _membership(shape_kind, size_px, center, canvas):
    h, w = canvas
    cx, cy = center
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if shape_kind == "square":
        return (np.abs(jj - cx) <= size_px / 2.0) & (np.abs(ii - cy) <= size_px / 2.0)
    if shape_kind == "disk":
        return (jj - cx) ** 2 + (ii - cy) ** 2 <= (size_px / 2.0) ** 2
    if shape_kind == "bar":
        return (np.abs(jj - cx) <= size_px / 2.0) & (np.abs(ii - cy) <= size_px / 6.0)
    raise SceneSpecError(f"unknown shape kind {shape_kind!r}")


def shape_mask(spec: SceneSpec, t: int):
    """Boolean [H, W] membership of the shape at frame t (pixel centers)."""
    return _membership(spec.shape_kind, spec.size_px, spec.motion.position(spec.start, t), spec.canvas)


def analytic_flow(spec: SceneSpec, t: int):
    """Exact flow frame [H, W, 2]: the frame-t displacement inside the shape, zero outside.

    The final frame duplicates the one before it so the flow volume has the
    same length as the video.
    """
    if t < 0 or t >= spec.n_frames:
        raise ValueError(f"frame index {t} out of range [0, {spec.n_frames})")
    if t == spec.n_frames - 1:
        t = spec.n_frames - 2
    out = np.zeros(spec.canvas + (2,), dtype=np.float32)
    member = shape_mask(spec, t)
    dx, dy = spec.motion.displacement(spec.start, t)
    out[member] = (dx, dy)
    return out


def render_scene(spec: SceneSpec) -> Sample:
    """Rasterize a scene to (video, flow, label). Deterministic in the spec."""
    spec.validate()
    h, w = spec.canvas
    t_total = spec.n_frames
    bg = spec.background.render(spec.canvas)
    color = np.asarray(spec.color, dtype=np.float32)
    video = np.empty((t_total, h, w, 3), dtype=np.float32)
    flow = np.empty((t_total, h, w, 2), dtype=np.float32)
    for t in range(t_total):
        member = shape_mask(spec, t)
        video[t] = np.where(member[..., None], color, bg)
        flow[t] = analytic_flow(spec, t)
    return Sample(video=video, flow=flow, label=spec.motion.class_label)


def crop_sample(sample: Sample, oy: int, ox: int, out_hw) -> Sample:
    """Crop one window, shared by every frame of both video and flow."""
    ch, cw = out_hw
    h, w = sample.video.shape[1:3]
    if ch > h or cw > w:
        raise ValueError(f"crop {out_hw} larger than input ({h}, {w})")
    if oy < 0 or ox < 0 or oy + ch > h or ox + cw > w:
        raise ValueError(f"crop offset ({oy}, {ox}) with size {out_hw} falls outside ({h}, {w})")
    return Sample(
        video=sample.video[:, oy:oy + ch, ox:ox + cw].copy(),
        flow=sample.flow[:, oy:oy + ch, ox:ox + cw].copy(),
        label=sample.label,
    )


def hflip_sample(sample: Sample) -> Sample:
    """Mirror left-right; the horizontal flow component changes sign."""
    flow = sample.flow[:, :, ::-1].copy()
    flow[..., 0] = -flow[..., 0]
    return Sample(
        video=np.ascontiguousarray(sample.video[:, :, ::-1]),
        flow=flow,
        label=sample.label,
    )


def augment(sample: Sample, seed: int, out_hw=(64, 64)) -> Sample:
    """Training augmentation: one random crop for all frames, then a coin-flip mirror."""
    rng = np.random.default_rng(seed)
    h, w = sample.video.shape[1:3]
    ch, cw = out_hw
    if ch > h or cw > w:
        raise ValueError(f"crop {out_hw} larger than input ({h}, {w})")
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    out = crop_sample(sample, oy, ox, out_hw)
    if rng.random() < 0.5:
        out = hflip_sample(out)
    return out


@dataclass(frozen=True)
class DatasetConfig:
    clips_per_class: int = 100
    classes: tuple[str, ...] = MOTION_KINDS
    canvas: tuple[int, int] = (76, 76)
    n_frames: int = 32
    size_min: int = 10
    size_max: int = 20
    speed_min: float = 0.6
    speed_max: float = 2.0

    @property
    def n_classes(self):
        return len(self.classes)


def _sample_color_pair(rng):
    # Keep foreground and background visually distinct.
    while True:
        fg = rng.uniform(-1.0, 1.0, size=3)
        bg = rng.uniform(-1.0, 1.0, size=3)
        if np.abs(fg - bg).max() > 0.5:
            return tuple(float(c) for c in fg), tuple(float(c) for c in bg)


def sample_scene_spec(rng: np.random.Generator, kind: str, config: DatasetConfig) -> SceneSpec:
    """Draw one scene of the given motion kind that provably fits the canvas."""
    h, w = config.canvas
    size = int(rng.integers(config.size_min, config.size_max + 1))
    shape = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
    fg, bg = _sample_color_pair(rng)
    if rng.random() < 0.5:
        background = BackgroundSpec(kind="flat", color=bg)
    else:
        _, bg2 = _sample_color_pair(rng)
        background = BackgroundSpec(kind="vgradient", color=bg, color2=bg2)

    half = size / 2.0
    margin = half + 1.0
    span_x = (w - 1) - 2.0 * margin  # free room for the trajectory
    span_y = (h - 1) - 2.0 * margin

    if kind == "linear":
        angle = rng.uniform(0.0, 2.0 * math.pi)
        smax = min(config.speed_max, 0.9 * min(span_x, span_y) / (config.n_frames - 1))
        speed = rng.uniform(min(config.speed_min, smax), smax)
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        drift_x, drift_y = vx * (config.n_frames - 1), vy * (config.n_frames - 1)
        x0 = margin + rng.uniform(0.0, span_x - abs(drift_x)) + max(0.0, -drift_x)
        y0 = margin + rng.uniform(0.0, span_y - abs(drift_y)) + max(0.0, -drift_y)
        motion = MotionSpec(kind="linear", velocity=(vx, vy))
    elif kind == "oscillate":
        period = rng.uniform(12.0, 30.0)
        # Peak per-frame displacement of a sinusoid is 2*A*sin(pi/period);
        # keep it safely inside the flow scale.
        amp_hi = min(0.45 * min(span_x, span_y),
                     0.95 * core.FLOW_SCALE / (2.0 * math.sin(math.pi / period)))
        amp = rng.uniform(min(4.0, 0.5 * amp_hi), amp_hi)
        phase = rng.uniform(0.0, period)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        direction = (math.cos(angle), math.sin(angle))
        x0 = margin + amp * abs(direction[0]) + rng.uniform(0.0, span_x - 2 * amp * abs(direction[0]))
        y0 = margin + amp * abs(direction[1]) + rng.uniform(0.0, span_y - 2 * amp * abs(direction[1]))
        motion = MotionSpec(kind="oscillate", amplitude=amp, period=period,
                            phase_frames=phase, direction=direction)
    elif kind == "circular":
        rate = rng.uniform(0.15, 0.4) * (1.0 if rng.random() < 0.5 else -1.0)
        # Chord length per frame is 2*r*sin(|rate|/2); cap it like above.
        rad_hi = min(0.45 * min(span_x, span_y),
                     0.95 * core.FLOW_SCALE / (2.0 * math.sin(abs(rate) / 2.0)))
        radius = rng.uniform(min(4.0, 0.5 * rad_hi), rad_hi)
        angle0 = rng.uniform(0.0, 2.0 * math.pi)
        x0 = margin + radius + rng.uniform(0.0, span_x - 2 * radius)
        y0 = margin + radius + rng.uniform(0.0, span_y - 2 * radius)
        motion = MotionSpec(kind="circular", radius=radius, rate=rate, angle0=angle0)
    else:
        raise SceneSpecError(f"unknown motion kind {kind!r}")

    spec = SceneSpec(
        shape_kind=shape, size_px=size, color=fg, background=background,
        motion=motion, start=(x0, y0), n_frames=config.n_frames, canvas=config.canvas,
    )
    return spec.validate()


def generate_scene_specs(config: DatasetConfig, seed: int):
    """Deterministic list of (SceneSpec, label), class-major order."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = []
    for label, kind in enumerate(config.classes):
        for _ in range(config.clips_per_class):
            out.append((sample_scene_spec(rng, kind, config), label))
    return out


class SyntheticDataset:
    """In-memory dataset of scene specs, rasterized on demand."""

    def __init__(self, specs_labels):
        self.specs_labels = list(specs_labels)

    @classmethod
    def generate(cls, config: DatasetConfig, seed: int):
        return cls(generate_scene_specs(config, seed))

    def __len__(self):
        return len(self.specs_labels)

    def spec(self, i) -> SceneSpec:
        return self.specs_labels[i][0]

    def label(self, i) -> int:
        return self.specs_labels[i][1]

    def sample(self, i) -> Sample:
        return render_scene(self.specs_labels[i][0])


def make_dataset(config: DatasetConfig, seed: int, out_dir) -> Path:
    """Write the dataset to disk: manifest.json plus one video/flow clip pair per sample.

    Output bytes are a pure function of (config, seed); clips are ordered by
    index, class-major.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = generate_scene_specs(config, seed)
    entries = []
    for i, (spec, label) in enumerate(specs):
        sample = render_scene(spec)
        video_name = f"clip_{i:05d}_video.ftc"
        flow_name = f"clip_{i:05d}_flow.ftc"
        fileio.save_clip(out_dir / video_name, sample.video, label=label)
        fileio.save_clip(out_dir / flow_name, sample.flow, label=label)
        entries.append({"index": i, "label": label, "video": video_name, "flow": flow_name,
                        "motion": spec.motion.kind})
    manifest = {
        "format": "flowtex-dataset",
        "version": 1,
        "seed": seed,
        "config": asdict(config),
        "clips": entries,
    }
    path = out_dir / "manifest.json"
    fileio.atomic_write_text(path, json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return path


class ClipDataset:
    """Dataset backed by an on-disk directory written by :func:`make_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != "flowtex-dataset":
            raise ValueError(f"{manifest_path} is not a dataset manifest")
        self.manifest = manifest
        self.clips = manifest["clips"]

    def __len__(self):
        return len(self.clips)

    def label(self, i) -> int:
        return int(self.clips[i]["label"])

    def sample(self, i) -> Sample:
        entry = self.clips[i]
        video, label = fileio.load_clip(self.root / entry["video"])
        flow, _ = fileio.load_clip(self.root / entry["flow"])
        return Sample(video=video, flow=flow, label=int(label))
