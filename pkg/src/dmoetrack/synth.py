"""Deterministic synthetic multimodal tracking sequences.

A soft-edged target disc moves over a static textured background together
with a few distractor discs that move in the same speed band. The auxiliary modality renders the same geometry
through a modality-specific transform. All intensities are returned in
normalized space ([0, 1] mapped to [-1, 1]) so that 0 means "no signal".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

# px/frame at a 32 px frame; scaled linearly with image size
SPEED_BANDS = {
    "slow": (0.0, 1.0),
    "middle": (1.0, 2.0),
    "fast": (2.0, 4.0),
    "extreme": (4.0, 8.0),
}
SPEEDS = tuple(SPEED_BANDS)

MODALITIES = ("rgb", "rgbt", "rgbd", "rgbe", "heldout")
TRAIN_MODALITIES = MODALITIES[:4]

CHANNELS = 3
_BLUR_SAMPLES = 5
# fraction of the inter-frame interval the virtual shutter stays open (ending at t)
_SHUTTER = 0.5


@dataclass(frozen=True)
class SimConfig:
    image_size: int = 32
    num_frames: int = 32
    radius_range: tuple[float, float] = (3.0, 5.0)
    speed: str = "middle"
    modality: str = "rgb"
    noise_sigma: float = 0.03
    clutter: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.speed not in SPEED_BANDS:
            raise ConfigError(f"unknown speed level {self.speed!r}; expected one of {SPEEDS}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        r_lo, r_hi = self.radius_range
        if not 0 < r_lo <= r_hi:
            raise ConfigError(f"bad radius range {self.radius_range}")
        if self.image_size < 4 * r_hi:
            raise ConfigError(f"image size {self.image_size} must be at least 4x the max radius {r_hi}")
        _, hi = self.displacement_band
        if self.image_size - 2 * r_hi < 2 * hi:
            raise ConfigError("image too small for the configured speed band")
        if self.num_frames < 1 or self.clutter < 0 or self.noise_sigma < 0:
            raise ConfigError("num_frames must be >= 1; clutter and noise_sigma must be >= 0")

    @property
    def displacement_band(self) -> tuple[float, float]:
        lo, hi = SPEED_BANDS[self.speed]
        scale = self.image_size / 32.0
        return lo * scale, hi * scale


@dataclass
class SyntheticSequence:
    rgb: np.ndarray  # N x C x H x W
    x: np.ndarray  # N x C x H x W
    boxes: np.ndarray  # N x 4, normalized (cx, cy, w, h)
    modality: str
    speed: str
    seed: int
    config: SimConfig = field(repr=False, default_factory=SimConfig)

    @property
    def num_frames(self) -> int:
        return self.rgb.shape[0]

    @property
    def image_size(self) -> int:
        return self.rgb.shape[-1]

    def centers_px(self) -> np.ndarray:
        return self.boxes[:, :2] * self.image_size


def _soft_disc(yy, xx, cx, cy, r):
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _trajectory(cfg: SimConfig, rng: np.random.Generator, radius: float) -> np.ndarray:
    size = cfg.image_size
    lo_b, hi_b = radius, size - radius
    lo, hi = cfg.displacement_band
    pos = rng.uniform(lo_b + 0.25 * (hi_b - lo_b), hi_b - 0.25 * (hi_b - lo_b), size=2)
    heading = rng.uniform(0.0, 2 * math.pi)
    out = np.empty((cfg.num_frames, 2))
    out[0] = pos
    for t in range(1, cfg.num_frames):
        heading += rng.normal(0.0, 0.4)
        u = rng.random()
        # slow covers [0, hi]; the other bands are (lo, hi]
        step = u * hi if cfg.speed == "slow" else hi - u * (hi - lo)
        v = np.array([math.cos(heading), math.sin(heading)]) * step
        for a in range(2):
            if not lo_b <= pos[a] + v[a] <= hi_b:
                v[a] = -v[a]
        heading = math.atan2(v[1], v[0])
        pos = pos + v
        out[t] = pos
    return out


class Scene:
    """Trajectory and appearance of one sequence; frames render lazily and deterministically."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        size = cfg.image_size
        self.radius = rng.uniform(*cfg.radius_range)
        self.centers = _trajectory(cfg, rng, self.radius)
        self.yy, self.xx = np.mgrid[0:size, 0:size] + 0.5

        # static background: base colour, linear ramp, low-frequency texture
        base = rng.uniform(0.2, 0.6, size=CHANNELS)
        ramp = rng.normal(0.0, 0.15, size=(CHANNELS, 2))
        tex = np.zeros((size, size))
        for _ in range(3):
            f = rng.uniform(0.5, 2.5, size=2) * 2 * math.pi / size
            tex += math.sqrt(1 / 3) * np.sin(f[0] * self.xx + f[1] * self.yy + rng.uniform(0, 2 * math.pi))
        u, w = (self.xx / size - 0.5), (self.yy / size - 0.5)
        self.texture = tex
        self.background = np.clip(
            base[:, None, None] + ramp[:, 0, None, None] * u + ramp[:, 1, None, None] * w + 0.08 * tex, 0, 1)

        self.target_color = rng.uniform(0.0, 1.0, size=CHANNELS)
        self.target_color[rng.integers(CHANNELS)] = rng.choice([0.05, 0.95])
        # distractors get their own trajectories from a separate stream
        clutter_rng = np.random.default_rng([cfg.seed, 4])
        self.clutter = []
        for _ in range(cfg.clutter):
            r = clutter_rng.uniform(*cfg.radius_range)
            path = _trajectory(cfg, clutter_rng, r)
            if cfg.modality == "rgbd":
                colour = np.clip(self.target_color + clutter_rng.normal(0.0, 0.08, size=CHANNELS), 0, 1)
            else:
                colour = clutter_rng.uniform(0.0, 1.0, size=CHANNELS)
            self.clutter.append((path, r, colour))
        r_img = np.sqrt(u ** 2 + w ** 2) / math.sqrt(0.5)
        self.depth_background = 0.55 + 0.45 * r_img

    def _blurred_disc(self, path: np.ndarray, radius: float, t: int) -> np.ndarray:
        cur = path[t]
        prev = path[t - 1] if t > 0 else cur
        acc = np.zeros_like(self.xx)
        for s in np.linspace(1.0 - _SHUTTER, 1.0, _BLUR_SAMPLES):
            c = prev + s * (cur - prev)
            acc += _soft_disc(self.yy, self.xx, c[0], c[1], radius)
        return acc / _BLUR_SAMPLES

    def target_alpha(self, t: int) -> np.ndarray:
        return self._blurred_disc(self.centers, self.radius, t)

    def clutter_alphas(self, t: int) -> list[np.ndarray]:
        return [self._blurred_disc(path, r, t) for path, r, _ in self.clutter]

    def clean_rgb(self, t: int) -> np.ndarray:
        img = self.background.copy()
        for (_, _, colour), a in zip(self.clutter, self.clutter_alphas(t)):
            img = img * (1 - a) + colour[:, None, None] * a
        a = self.target_alpha(t)
        return img * (1 - a) + self.target_color[:, None, None] * a

    def clean_aux(self, t: int) -> np.ndarray:
        """Single-channel auxiliary image in [0, 1]."""
        mod = self.cfg.modality
        a_t = self.target_alpha(t)
        a_c = np.zeros_like(a_t)
        for a in self.clutter_alphas(t):
            a_c = np.maximum(a_c, a)
        if mod == "rgbt":
            heat = 0.15 + 0.05 * self.texture
            heat = heat * (1 - a_c) + 0.55 * a_c
            heat = heat * (1 - a_t) + 1.0 * a_t
            # inverted, with everything below the threshold treated as cold
            return np.where(heat > 0.3, 1.0 - heat, 1.0)
        if mod in ("rgbd", "heldout"):
            depth = self.depth_background * (1 - a_c) + 0.45 * a_c
            depth = depth * (1 - a_t) + 0.15 * a_t
            return depth if mod == "rgbd" else 1.0 - depth
        if mod == "rgbe":
            if t == 0:
                return np.zeros_like(a_t)
            diff = np.abs(self.clean_rgb(t) - self.clean_rgb(t - 1)).mean(axis=0)
            return np.clip(3.0 * diff, 0.0, 1.0)
        raise ValueError(mod)

    def frame(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Normalized (rgb, x) pair for frame ``t``."""
        cfg = self.cfg
        noise = np.random.default_rng([cfg.seed, 1, t])
        rgb = self.clean_rgb(t)
        if cfg.modality == "rgbt":
            rgb = 0.3 * rgb + 0.35  # low-light visible channel
        rgb = rgb * 2.0 - 1.0 + noise.normal(0.0, cfg.noise_sigma, size=rgb.shape)
        if cfg.modality == "rgb":
            return rgb, rgb.copy()
        aux = np.repeat(self.clean_aux(t)[None], CHANNELS, axis=0) * 2.0 - 1.0
        aux = aux + noise.normal(0.0, cfg.noise_sigma, size=aux.shape)
        return rgb, aux

    def box(self, t: int) -> np.ndarray:
        size = self.cfg.image_size
        cx, cy = self.centers[t]
        d = 2 * self.radius
        return np.array([cx / size, cy / size, d / size, d / size])


def generate_sequence(cfg: SimConfig) -> SyntheticSequence:
    scene = Scene(cfg)
    frames = [scene.frame(t) for t in range(cfg.num_frames)]
    rgb = np.stack([f[0] for f in frames])
    x = np.stack([f[1] for f in frames])
    boxes = np.stack([scene.box(t) for t in range(cfg.num_frames)])
    return SyntheticSequence(rgb, x, boxes, cfg.modality, cfg.speed, cfg.seed, cfg)


def corrupt_missing(seq: SyntheticSequence, which: str) -> SyntheticSequence:
    if which == "rgb":
        return replace(seq, rgb=np.zeros_like(seq.rgb), x=seq.x.copy(), boxes=seq.boxes.copy())
    if which == "x":
        return replace(seq, rgb=seq.rgb.copy(), x=np.zeros_like(seq.x), boxes=seq.boxes.copy())
    raise ValidationError(f"which must be 'rgb' or 'x', got {which!r}")


def mean_displacement(seq: SyntheticSequence) -> float:
    if seq.num_frames < 2:
        raise ValidationError("motion needs at least 2 frames")
    c = seq.centers_px()
    return float(np.linalg.norm(np.diff(c, axis=0), axis=1).mean())


def speed_from_displacement(disp: float, image_size: int = 32) -> str:
    d = disp * 32.0 / image_size
    for name, (_, hi) in SPEED_BANDS.items():
        if d <= hi:
            return name
    return SPEEDS[-1]


def motion_bin(seq: SyntheticSequence) -> str:
    return speed_from_displacement(mean_displacement(seq), seq.image_size)


def crop(image: np.ndarray, center: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded size x size crop of C x H x W ``image`` around ``center`` (px).

    Returns the crop and its integer top-left corner (x, y) in image pixels.
    """
    c, h, w = image.shape
    x0 = int(round(center[0] - size / 2))
    y0 = int(round(center[1] - size / 2))
    out = np.zeros((c, size, size), dtype=image.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[:, sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[:, sy0:sy1, sx0:sx1]
    return out, np.array([x0, y0], dtype=float)


# -- export ----------------------------------------------------------------------

def export_sequence(seq: SyntheticSequence, out_dir: str | Path) -> Path:
    """Write frames as raw little-endian float32 files plus a text manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq.rgb.astype("<f4").tofile(out / "rgb.f32")
    seq.x.astype("<f4").tofile(out / "x.f32")
    seq.boxes.astype("<f4").tofile(out / "boxes.f32")
    lines = [
        f"rgb.f32 = {' '.join(map(str, seq.rgb.shape))}",
        f"x.f32 = {' '.join(map(str, seq.x.shape))}",
        f"boxes.f32 = {' '.join(map(str, seq.boxes.shape))}",
        "box_format = cx cy w h (normalized)",
        f"seed = {seq.seed}",
        f"modality = {seq.modality}",
        f"speed = {seq.speed}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_exported(path: str | Path) -> SyntheticSequence:
    path = Path(path)
    meta = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()

    def read(name):
        shape = tuple(int(v) for v in meta[name].split())
        return np.fromfile(path / name, dtype="<f4").reshape(shape).astype(np.float64)

    return SyntheticSequence(read("rgb.f32"), read("x.f32"), read("boxes.f32"),
                             meta["modality"], meta["speed"], int(meta["seed"]))
