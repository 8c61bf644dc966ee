"""Procedural stereo scenes with view-dependent rain.

Scenes are flat-shaded primitives placed at known depths, so clean images,
label maps, disparity and per-view rain layers all exist by construction.
Pixel ``j`` covers ``[j, j + 1)``; geometry is sampled at pixel centres.
A point at depth ``d`` in the canonical mid view lands at ``x + D/2`` in the
left view and ``x - D/2`` in the right view, with ``D = focal * baseline / d``.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("rect", "ellipse", "triangle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CameraRig:
    focal_length_px: float = 100.0
    baseline: float = 1.0
    image_width: int = 128
    image_height: int = 128

    def __post_init__(self):
        if self.focal_length_px <= 0:
            raise ConfigError(f"focal_length_px must be > 0, got {self.focal_length_px}")
        # baseline 0 is allowed as the degenerate rig (identical views)
        if self.baseline < 0:
            raise ConfigError(f"baseline must be >= 0, got {self.baseline}")
        if self.image_width < 16 or self.image_height < 16:
            raise ConfigError("image width and height must be >= 16")

    def disparity(self, depth):
        return self.focal_length_px * self.baseline / np.asarray(depth, dtype=np.float64)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    cx: float
    cy: float
    half_w: float
    half_h: float
    rotation: float
    depth: float
    class_id: int
    albedo: tuple


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    background_class: int
    background_albedo: tuple
    num_classes: int
    seed: int


@dataclass(frozen=True)
class Streak:
    x: float
    y: float
    depth: float
    length: float
    angle: float
    width: float
    intensity: float


@dataclass(frozen=True)
class RainSpec:
    streaks: tuple
    seed: int


@dataclass
class SceneConfig:
    num_classes: int = 8
    min_objects: int = 3
    max_objects: int = 6
    depth_min: float = 10.0
    depth_max: float = 100.0
    size_min: float = 0.12
    size_max: float = 0.35
    albedo_jitter: float = 0.03
    background_class: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"bad object-count range [{self.min_objects}, {self.max_objects}]")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError(f"empty depth range [{self.depth_min}, {self.depth_max}]")
        if not 0 < self.size_min <= self.size_max:
            raise ConfigError("bad object size range")
        if not 0 <= self.background_class < self.num_classes:
            raise ConfigError("background class out of range")


@dataclass
class RainConfig:
    min_streaks: int = 20
    max_streaks: int = 60
    depth_min: float = 2.0
    depth_max: float = 8.0
    length_min: float = 8.0
    length_max: float = 24.0
    width_min: float = 1.0
    width_max: float = 2.0
    intensity_min: float = 0.15
    intensity_max: float = 0.45
    # every streak in a sample shares a fall direction up to this spread
    angle_max: float = 0.35
    angle_spread: float = 0.05

    def validate(self):
        if not 0 <= self.min_streaks <= self.max_streaks:
            raise ConfigError(f"bad streak-count range [{self.min_streaks}, {self.max_streaks}]")
        if not 0 < self.depth_min <= self.depth_max:
            raise ConfigError("bad rain depth range")
        if not 0 < self.intensity_min <= self.intensity_max <= 1:
            raise ConfigError("rain intensity must lie in (0, 1]")


@dataclass
class SynthConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rain: RainConfig = field(default_factory=RainConfig)
    rig: CameraRig = field(default_factory=CameraRig)


@dataclass
class StereoSample:
    sample_id: str
    rainy_left: np.ndarray
    rainy_right: np.ndarray
    clean_left: np.ndarray
    clean_right: np.ndarray
    rain_left: np.ndarray
    rain_right: np.ndarray
    labels_left: np.ndarray
    labels_right: np.ndarray
    disparity: np.ndarray

    ARRAYS = ("rainy_left", "rainy_right", "clean_left", "clean_right", "rain_left",
              "rain_right", "labels_left", "labels_right", "disparity")

    def view(self, side):
        """(rainy, clean, labels) for ``"left"`` or ``"right"``."""
        return (getattr(self, f"rainy_{side}"), getattr(self, f"clean_{side}"),
                getattr(self, f"labels_{side}"))


def class_palette(num_classes):
    """Fixed, well separated mid-range albedo per class."""
    colors = []
    for c in range(num_classes):
        hue = (c * 0.61803398875) % 1.0
        value = 0.35 + 0.3 * ((c * 3) % 5) / 4
        colors.append(colorsys.hsv_to_rgb(hue, 0.55, value))
    return np.asarray(colors, dtype=np.float64)


def generate_scene(seed, config=None, rig=None):
    config = config or SceneConfig()
    rig = rig or CameraRig()
    config.validate()
    rng = np.random.default_rng(seed)
    palette = class_palette(config.num_classes)
    W, H = rig.image_width, rig.image_height
    size = min(W, H)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    foreground = [c for c in range(config.num_classes) if c != config.background_class]
    objects = []
    for _ in range(n):
        cls = int(rng.choice(foreground))
        albedo = np.clip(palette[cls] + rng.uniform(-config.albedo_jitter, config.albedo_jitter, 3), 0, 1)
        objects.append(SceneObject(
            shape=SHAPES[cls % len(SHAPES)],
            cx=float(rng.uniform(0, W)),
            cy=float(rng.uniform(0, H)),
            half_w=float(rng.uniform(config.size_min, config.size_max) * size / 2),
            half_h=float(rng.uniform(config.size_min, config.size_max) * size / 2),
            rotation=float(rng.uniform(-np.pi / 6, np.pi / 6)),
            depth=float(rng.uniform(config.depth_min, config.depth_max)),
            class_id=cls,
            albedo=tuple(float(v) for v in albedo),
        ))
    bg = palette[config.background_class]
    return SceneSpec(objects=tuple(objects), background_class=config.background_class,
                     background_albedo=tuple(float(v) for v in bg),
                     num_classes=config.num_classes, seed=seed)


def _inside(obj, px, py):
    dx, dy = px - obj.cx, py - obj.cy
    c, s = np.cos(obj.rotation), np.sin(obj.rotation)
    u = (c * dx + s * dy) / obj.half_w
    v = (-s * dx + c * dy) / obj.half_h
    if obj.shape == "rect":
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if obj.shape == "ellipse":
        return u * u + v * v <= 1
    # isoceles triangle, apex up
    return (v <= 1) & (v >= -1) & (np.abs(u) <= (v + 1) / 2)


def render_stereo_clean(scene, rig):
    W, H = rig.image_width, rig.image_height
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    order = sorted(scene.objects, key=lambda o: -o.depth)
    views = []
    for sign in (+1, -1):
        img = np.empty((H, W, 3), dtype=np.float64)
        img[:] = scene.background_albedo
        labels = np.full((H, W), scene.background_class, dtype=np.int64)
        disp = np.zeros((H, W), dtype=np.float64)
        for obj in order:
            d = float(rig.disparity(obj.depth))
            mask = _inside(obj, xs - sign * d / 2, ys)
            img[mask] = obj.albedo
            labels[mask] = obj.class_id
            disp[mask] = d
        views.append((img.astype(np.float32), labels, disp))
    (cl, ll, dl), (cr, lr, _) = views
    # disparity is reported in the left view's frame
    return cl, cr, ll, lr, dl.astype(np.float32)


def generate_rain(seed, config=None, rig=None):
    config = config or RainConfig()
    rig = rig or CameraRig()
    config.validate()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_streaks, config.max_streaks + 1))
    max_disp = float(rig.disparity(config.depth_min))
    base_angle = rng.uniform(-config.angle_max, config.angle_max)
    streaks = []
    for _ in range(n):
        streaks.append(Streak(
            x=float(rng.uniform(-max_disp / 2, rig.image_width + max_disp / 2)),
            y=float(rng.uniform(0, rig.image_height)),
            depth=float(rng.uniform(config.depth_min, config.depth_max)),
            length=float(rng.uniform(config.length_min, config.length_max)),
            angle=float(base_angle + rng.uniform(-config.angle_spread, config.angle_spread)),
            width=float(rng.uniform(config.width_min, config.width_max)),
            intensity=float(rng.uniform(config.intensity_min, config.intensity_max)),
        ))
    return RainSpec(streaks=tuple(streaks), seed=seed)


def _draw_streak(layer, cx, cy, streak):
    """Add one Gaussian-profile segment centred at (cx, cy); clipped to the frame."""
    H, W = layer.shape
    sigma = streak.width / 2
    half = streak.length / 2
    ux, uy = np.sin(streak.angle), np.cos(streak.angle)
    reach = half + 3 * sigma
    x0, x1 = max(int(np.floor(cx - reach)), 0), min(int(np.ceil(cx + reach)) + 1, W)
    y0, y1 = max(int(np.floor(cy - reach)), 0), min(int(np.ceil(cy + reach)) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    t = np.clip(dx * ux + dy * uy, -half, half)
    dist2 = (dx - t * ux) ** 2 + (dy - t * uy) ** 2
    profile = streak.intensity * np.exp(-dist2 / (2 * sigma * sigma))
    profile[dist2 > (3 * sigma) ** 2] = 0.0
    layer[y0:y1, x0:x1] += profile


def render_rain_layers(rain, rig):
    W, H = rig.image_width, rig.image_height
    left = np.zeros((H, W), dtype=np.float64)
    right = np.zeros((H, W), dtype=np.float64)
    for s in rain.streaks:
        d = float(rig.disparity(s.depth))
        _draw_streak(left, s.x + d / 2, s.y, s)
        _draw_streak(right, s.x - d / 2, s.y, s)
    rl = np.repeat(left[..., None], 3, axis=2).astype(np.float32)
    rr = np.repeat(right[..., None], 3, axis=2).astype(np.float32)
    return rl, rr


def composite(clean, rain):
    clean = np.asarray(clean)
    rain = np.asarray(rain)
    if clean.shape != rain.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs rain {rain.shape}")
    if np.any(rain < 0):
        raise ValueError("rain layer must be nonnegative")
    return np.clip(clean + rain, 0.0, 1.0).astype(clean.dtype)


def generate_sample(seed, config=None, sample_id=None):
    config = config or SynthConfig()
    scene_seed, rain_seed = np.random.SeedSequence(seed).generate_state(2)
    scene = generate_scene(int(scene_seed), config.scene, config.rig)
    rain = generate_rain(int(rain_seed), config.rain, config.rig)
    cl, cr, ll, lr, disp = render_stereo_clean(scene, config.rig)
    rl, rr = render_rain_layers(rain, config.rig)
    return StereoSample(
        sample_id=sample_id if sample_id is not None else f"{seed:06d}",
        rainy_left=composite(cl, rl), rainy_right=composite(cr, rr),
        clean_left=cl, clean_right=cr, rain_left=rl, rain_right=rr,
        labels_left=ll, labels_right=lr, disparity=disp,
    )


def generate_samples(count, seed, config=None):
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_sample(int(s), config, sample_id=f"{i:05d}") for i, s in enumerate(seeds)]
