"""Deterministic synthetic videos: moving shapes with exact ground truth.

Each scene spec is a seeded recipe; realizing it draws concrete target and
distractor shapes, colors, sizes, trajectories, and an optional occluder
bar, all guaranteed to keep the target fully inside the canvas.  Ground
truth is the analytic box of the target geometry, so box kinematics are
exact and the rasterized support stays within one pixel of the box edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import COLORS, SHAPES
from .errors import DataError
from .heads_losses import Box

COLOR_RGB = {
    "red": (220, 45, 45),
    "green": (45, 200, 75),
    "blue": (55, 95, 230),
    "yellow": (235, 220, 55),
    "orange": (240, 150, 45),
    "purple": (160, 65, 205),
    "cyan": (60, 210, 220),
    "magenta": (225, 70, 185),
}
BACKGROUND_RGB = (70, 70, 70)
OCCLUDER_RGB = (130, 130, 130)


@dataclass
class SceneSpec:
    """Seeded recipe for one clip."""

    canvas: int = 256
    clip_len: int = 16
    seed: int = 0
    target_shape: str = "square"
    target_color: str = "red"
    size_range: tuple = (24.0, 48.0)
    motion_kind: str = "linear"  # linear | sinusoidal | still
    speed_range: tuple = (0.5, 3.0)
    n_distractors: int = 2
    occluder: bool = False
    background: str = "flat"  # flat | noise


@dataclass
class VideoClip:
    """Frames plus exact per-frame ground truth and the language query."""

    frames: np.ndarray  # (T, H, W, 3) uint8
    gt_boxes: list
    query: str
    clip_id: str = ""
    split: str = "train"

    def __post_init__(self):
        if len(self.frames) != len(self.gt_boxes):
            raise DataError(
                f"clip {self.clip_id}: {len(self.frames)} frames vs {len(self.gt_boxes)} boxes"
            )

    @property
    def length(self):
        return len(self.frames)

    def window(self, start, length):
        """A contiguous sub-clip; id notes the offset for provider seeding."""
        if start < 0 or start + length > self.length:
            raise DataError(f"window [{start}, {start + length}) outside clip of {self.length}")
        cid = self.clip_id if start == 0 else f"{self.clip_id}+{start}"
        return VideoClip(
            frames=self.frames[start : start + length],
            gt_boxes=self.gt_boxes[start : start + length],
            query=self.query,
            clip_id=cid,
            split=self.split,
        )


@dataclass
class _Motion:
    kind: str
    vx: float = 0.0
    vy: float = 0.0
    amp_x: float = 0.0
    amp_y: float = 0.0
    period: float = 16.0
    phase: float = 0.0

    def displacement(self, t):
        if self.kind == "linear":
            return self.vx * t, self.vy * t
        if self.kind == "sinusoidal":
            w = 2.0 * math.pi / self.period
            base = math.sin(self.phase)
            s = math.sin(w * t + self.phase)
            return self.amp_x * (s - base), self.amp_y * (s - base)
        return 0.0, 0.0


@dataclass
class _Object:
    shape: str
    color: str
    w: float
    h: float
    start: tuple
    motion: _Motion

    def center(self, t):
        dx, dy = self.motion.displacement(t)
        return self.start[0] + dx, self.start[1] + dy


@dataclass
class _Scene:
    spec: SceneSpec
    target: _Object
    distractors: list
    occluder_x0: float = -1.0
    occluder_speed: float = 0.0
    occluder_width: float = 16.0
    noise_field: np.ndarray | None = None


def _draw_motion(spec, rng):
    if spec.motion_kind == "still":
        return _Motion("still")
    speeds = rng.uniform(spec.speed_range[0], spec.speed_range[1], 2)
    signs = rng.choice([-1.0, 1.0], 2)
    if spec.motion_kind == "linear":
        return _Motion("linear", vx=speeds[0] * signs[0], vy=speeds[1] * signs[1])
    if spec.motion_kind == "sinusoidal":
        period = float(rng.uniform(spec.clip_len * 0.6, spec.clip_len * 1.5))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        # amplitude scaled so peak speed matches the drawn per-axis speed
        w = 2.0 * math.pi / period
        return _Motion(
            "sinusoidal",
            amp_x=speeds[0] * signs[0] / w,
            amp_y=speeds[1] * signs[1] / w,
            period=period,
            phase=phase,
        )
    raise DataError(f"unknown motion kind {spec.motion_kind!r}")


def _place(spec, motion, w, h, rng):
    """Start position keeping the whole trajectory inside the canvas."""
    ts = np.arange(spec.clip_len)
    disp = np.array([motion.displacement(t) for t in ts])
    margin_x, margin_y = w / 2.0 + 1.0, h / 2.0 + 1.0
    lo_x = margin_x - disp[:, 0].min()
    hi_x = spec.canvas - margin_x - disp[:, 0].max()
    lo_y = margin_y - disp[:, 1].min()
    hi_y = spec.canvas - margin_y - disp[:, 1].max()
    if lo_x > hi_x or lo_y > hi_y:
        raise DataError(
            f"scene seed {spec.seed}: trajectory cannot stay inside {spec.canvas}px canvas"
        )
    return float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))


def realize(spec):
    """Draw the concrete scene for a spec; pure function of the spec."""
    if spec.target_color not in COLOR_RGB or spec.target_shape not in SHAPES:
        raise DataError(
            f"unknown target {spec.target_color!r} {spec.target_shape!r}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF]))
    size = float(rng.uniform(*spec.size_range))
    motion = _draw_motion(spec, rng)
    start = _place(spec, motion, size, size, rng)
    target = _Object(spec.target_shape, spec.target_color, size, size, start, motion)

    distractors = []
    pairs = [(s, c) for s in SHAPES for c in COLOR_RGB if (s, c) != (spec.target_shape, spec.target_color)]
    for _ in range(spec.n_distractors):
        shape, color = pairs[int(rng.integers(len(pairs)))]
        dsize = float(rng.uniform(*spec.size_range))
        dmotion = _draw_motion(spec, rng)
        dstart = _place(spec, dmotion, dsize, dsize, rng)
        distractors.append(_Object(shape, color, dsize, dsize, dstart, dmotion))

    scene = _Scene(spec, target, distractors)
    if spec.occluder:
        scene.occluder_width = float(rng.uniform(12.0, 24.0))
        scene.occluder_speed = (spec.canvas + scene.occluder_width) / max(spec.clip_len - 1, 1)
        scene.occluder_x0 = -scene.occluder_width
    if spec.background == "noise":
        low = rng.uniform(-18.0, 18.0, (8, 8, 3))
        reps = int(np.ceil(spec.canvas / 8))
        scene.noise_field = np.repeat(np.repeat(low, reps, 0), reps, 1)[
            : spec.canvas, : spec.canvas
        ]
    return scene


def _object_mask(obj, t, canvas, grids):
    xs, ys = grids
    cx, cy = obj.center(t)
    in_box = (np.abs(xs - cx) <= obj.w / 2.0) & (np.abs(ys - cy) <= obj.h / 2.0)
    if obj.shape == "square":
        return in_box
    if obj.shape == "circle":
        r = obj.w / 2.0
        disk = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        # thin cardinal cross keeps the raster touching all four box edges
        cross = in_box & ((np.abs(xs - cx) <= 0.51) | (np.abs(ys - cy) <= 0.51))
        return disk | cross
    # upward isoceles triangle: apex on top, base at the bottom edge; the
    # taper completes one pixel above the base and the apex keeps a
    # half-pixel width so the raster reaches every box edge
    top = cy - obj.h / 2.0
    frac = np.clip((ys - top) / max(obj.h - 1.0, 1.0), 0.0, 1.0)
    half_w = np.maximum(frac * obj.w / 2.0, 0.51)
    return in_box & (np.abs(xs - cx) <= half_w)


def target_mask(scene, t):
    """Raster support of the target before any occluder overlay."""
    canvas = scene.spec.canvas
    coords = np.arange(canvas, dtype=np.float64) + 0.5
    xs, ys = np.meshgrid(coords, coords)
    return _object_mask(scene.target, t, canvas, (xs, ys))


def render_frame(scene, t):
    canvas = scene.spec.canvas
    coords = np.arange(canvas, dtype=np.float64) + 0.5
    xs, ys = np.meshgrid(coords, coords)
    frame = np.empty((canvas, canvas, 3), dtype=np.float64)
    frame[:] = BACKGROUND_RGB
    if scene.noise_field is not None:
        frame += scene.noise_field
    for obj in scene.distractors:
        frame[_object_mask(obj, t, canvas, (xs, ys))] = COLOR_RGB[obj.color]
    frame[_object_mask(scene.target, t, canvas, (xs, ys))] = COLOR_RGB[scene.target.color]
    if scene.occluder_x0 > -1.0 or scene.spec.occluder:
        x = scene.occluder_x0 + scene.occluder_speed * t
        bar = (xs >= x) & (xs <= x + scene.occluder_width)
        frame[bar] = OCCLUDER_RGB
    return np.clip(frame, 0, 255).astype(np.uint8)


def gt_box(scene, t):
    cx, cy = scene.target.center(t)
    canvas = scene.spec.canvas
    return Box(cx / canvas, cy / canvas, scene.target.w / canvas, scene.target.h / canvas)


def describe(spec):
    """Templated description; identifies the target uniquely by color+shape."""
    scene = realize(spec)
    t_last = spec.clip_len - 1
    dx, dy = scene.target.motion.displacement(t_last)
    if max(abs(dx), abs(dy)) < 1.0:
        tail = "staying still"
    elif abs(dx) >= abs(dy):
        tail = "moving right" if dx > 0 else "moving left"
    else:
        tail = "moving down" if dy > 0 else "moving up"
    return f"the {spec.target_color} {spec.target_shape} {tail}"


def generate_clip(spec, clip_id="", split="train"):
    """Rasterize a spec into frames + exact boxes; fully determined by the seed."""
    scene = realize(spec)
    frames = np.stack([render_frame(scene, t) for t in range(spec.clip_len)])
    boxes = [gt_box(scene, t) for t in range(spec.clip_len)]
    return VideoClip(frames, boxes, describe(spec), clip_id=clip_id, split=split)


@dataclass
class DifficultyProfile:
    """Corpus-level draw ranges for scene specs."""

    name: str = "standard"
    distractor_range: tuple = (1, 3)
    occluder_prob: float = 0.15
    sinusoidal_prob: float = 0.3
    still_prob: float = 0.1
    noise_background_prob: float = 0.3
    speed_range: tuple = (0.5, 3.0)
    size_range: tuple = (24.0, 48.0)
    canvas: int = 256
    clip_len: int = 16


PROFILES = {
    "easy": DifficultyProfile(
        name="easy", distractor_range=(0, 2), occluder_prob=0.0,
        sinusoidal_prob=0.2, still_prob=0.15, noise_background_prob=0.2,
        speed_range=(0.3, 2.0), size_range=(28.0, 52.0),
    ),
    "standard": DifficultyProfile(),
    "hard": DifficultyProfile(
        name="hard", distractor_range=(2, 5), occluder_prob=0.35,
        sinusoidal_prob=0.4, still_prob=0.05, noise_background_prob=0.5,
        speed_range=(1.0, 4.0), size_range=(20.0, 44.0),
    ),
}


def draw_spec(profile, seed_sequence, canvas=None, clip_len=None):
    rng = np.random.default_rng(seed_sequence)
    u = rng.uniform()
    if u < profile.still_prob:
        kind = "still"
    elif u < profile.still_prob + profile.sinusoidal_prob:
        kind = "sinusoidal"
    else:
        kind = "linear"
    return SceneSpec(
        canvas=canvas or profile.canvas,
        clip_len=clip_len or profile.clip_len,
        seed=int(rng.integers(0, 2**32)),
        target_shape=SHAPES[int(rng.integers(len(SHAPES)))],
        target_color=list(COLOR_RGB)[int(rng.integers(len(COLOR_RGB)))],
        size_range=profile.size_range,
        motion_kind=kind,
        speed_range=profile.speed_range,
        n_distractors=int(rng.integers(profile.distractor_range[0], profile.distractor_range[1] + 1)),
        occluder=bool(rng.uniform() < profile.occluder_prob),
        background="noise" if rng.uniform() < profile.noise_background_prob else "flat",
    )


def make_clips(profile, count, split, seed, canvas=None, clip_len=None):
    """In-memory corpus half; ids embed the seed so corpora never collide."""
    split_idx = {"train": 0, "eval": 1}[split]
    clips = []
    for i in range(count):
        spec = draw_spec(
            profile, np.random.SeedSequence([seed & 0xFFFFFFFF, split_idx, i]),
            canvas=canvas, clip_len=clip_len,
        )
        cid = f"clip_{seed & 0xFFFFFFFF:08x}_{split}_{i:04d}"
        clips.append(generate_clip(spec, clip_id=cid, split=split))
    return clips


def build_corpus(out_dir, n_train, n_eval, profile, seed, canvas=None, clip_len=None):
    """Generate disjoint train/eval clips and write them with a manifest."""
    from .formats import write_corpus

    clips = make_clips(profile, n_train, "train", seed, canvas=canvas, clip_len=clip_len)
    clips += make_clips(profile, n_eval, "eval", seed, canvas=canvas, clip_len=clip_len)
    return write_corpus(clips, out_dir), clips
