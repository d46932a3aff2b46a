"""
Synthetic moving-shapes videos, flip augmentation and frame metrics.

The generator is a stand-in for MovingMNIST: a few squares and crosses
drifting at constant velocity across a 64x64 canvas, bouncing off the
borders, composited by per-pixel max so overlaps stay visible. Clip `i`
depends only on `(seed, i)`, so any split can be regenerated alone.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import torch
import torch.nn.functional as F

from pyvptr.core import ConfigError, ShapeError, ValueRange, VideoBatch, as_tensor

SHAPE_KINDS = ("square", "cross")
PSNR_CAP = 100.0


@dataclass
class SyntheticDatasetSpec:
    """The `[data]` section: what `gen-data` generates."""

    seed: int = 0
    num_clips: int = 2000
    val_clips: int = 200
    test_clips: int = 200
    clip_length: int = 8
    canvas: int = 64
    shapes_per_clip: int = 2
    kinds: list = field(default_factory=lambda: list(SHAPE_KINDS))
    min_side: int = 8
    max_side: int = 12
    min_speed: int = 1
    max_speed: int = 3
    value_range: str = "unit"

    def __post_init__(self):
        if self.num_clips < 1:
            raise ConfigError(f"num_clips must be >= 1, got {self.num_clips}")
        if self.val_clips < 0 or self.test_clips < 0:
            raise ConfigError("val_clips and test_clips must be >= 0")
        if self.clip_length < 1 or self.shapes_per_clip < 1:
            raise ConfigError("clip_length and shapes_per_clip must be >= 1")
        if not 1 <= self.min_side <= self.max_side:
            raise ConfigError(f"Invalid side range {self.min_side}..{self.max_side}")
        if self.max_side >= self.canvas:
            raise ConfigError(f"Shapes of side {self.max_side} do not fit a {self.canvas}px canvas")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ConfigError(f"Invalid speed range {self.min_speed}..{self.max_speed}")
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown or not self.kinds:
            raise ConfigError(f"Unknown shape kinds {sorted(unknown)}, expected some of {SHAPE_KINDS}")
        ValueRange(self.value_range)

    def split_range(self, split):
        """Disjoint clip index ranges for train, val and test."""
        starts = {
            "train": (0, self.num_clips),
            "val": (self.num_clips, self.val_clips),
            "test": (self.num_clips + self.val_clips, self.test_clips),
        }
        if split not in starts:
            raise ConfigError(f"Unknown split {split!r}")
        start, count = starts[split]
        return range(start, start + count)


@dataclass
class Sprite:
    kind: str
    side: int
    position: tuple
    velocity: tuple


def reflect(position, limit):
    """Fold an unbounded coordinate into `[0, limit]` by elastic reflection."""
    if limit == 0:
        return 0
    period = 2 * limit
    folded = position % period
    return limit - abs(limit - folded)


def trajectory(start, velocity, limit, length):
    return [reflect(start + velocity * t, limit) for t in range(length)]


def sample_sprites(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    sprites = []
    for _ in range(spec.shapes_per_clip):
        kind = spec.kinds[rng.integers(len(spec.kinds))]
        side = int(rng.integers(spec.min_side, spec.max_side + 1))
        limit = spec.canvas - side
        position = (int(rng.integers(0, limit + 1)), int(rng.integers(0, limit + 1)))
        speeds = rng.integers(spec.min_speed, spec.max_speed + 1, size=2)
        signs = rng.choice([-1, 1], size=2)
        sprites.append(Sprite(kind, side, position, (int(speeds[0] * signs[0]), int(speeds[1] * signs[1]))))
    return sprites


def sprite_mask(kind, side):
    if kind == "square":
        return np.ones((side, side), dtype=np.float32)
    mask = np.zeros((side, side), dtype=np.float32)
    bar = max(2, side // 4)
    low = (side - bar) // 2
    mask[low : low + bar, :] = 1
    mask[:, low : low + bar] = 1
    return mask


def render_clip(spec, sprites):
    frames = np.zeros((spec.clip_length, 1, spec.canvas, spec.canvas), dtype=np.float32)
    for sprite in sprites:
        mask = sprite_mask(sprite.kind, sprite.side)
        limit = spec.canvas - sprite.side
        rows = trajectory(sprite.position[0], sprite.velocity[0], limit, spec.clip_length)
        cols = trajectory(sprite.position[1], sprite.velocity[1], limit, spec.clip_length)
        for t, (row, col) in enumerate(zip(rows, cols)):
            window = frames[t, 0, row : row + sprite.side, col : col + sprite.side]
            np.maximum(window, mask, out=window)
    if ValueRange(spec.value_range) is ValueRange.signed:
        frames = frames * 2 - 1
    return torch.from_numpy(frames)


def generate_clip(spec, index):
    return render_clip(spec, sample_sprites(spec, index))


def gen_moving_shapes(spec, indices=None):
    indices = range(spec.num_clips) if indices is None else indices
    for index in indices:
        yield VideoBatch(generate_clip(spec, index)[None], ValueRange(spec.value_range))


def build_split(spec, split):
    indices = spec.split_range(split)
    if not len(indices):
        shape = (0, spec.clip_length, 1, spec.canvas, spec.canvas)
        return torch.zeros(shape)
    return torch.stack([generate_clip(spec, index) for index in indices])


def augment_flips(clip, generator=None):
    """Flip a whole clip `[T, C, H, W]` horizontally and/or vertically, each with probability 1/2."""
    horizontal, vertical = (torch.rand(2, generator=generator) < 0.5).tolist()
    return flip_clip(clip, horizontal, vertical)


def flip_clip(clip, horizontal=False, vertical=False):
    dims = [d for d, flag in ((-1, horizontal), (-2, vertical)) if flag]
    return clip.flip(dims) if dims else clip


def copy_last_frame(past, steps):
    past = as_tensor(past)
    return past[:, -1:].expand(-1, steps, *past.shape[2:]).clone()


@dataclass
class EvalConfig:
    mode: str = "rip"
    steps: int = 4
    batch_size: int = 16
    bench_repeats: int = 20
    bench_warmup: int = 3
    frame_format: str = "pgm"

    def __post_init__(self):
        if self.mode not in ("rip", "ril", "block"):
            raise ConfigError(f"Unknown inference mode {self.mode!r}")
        if self.bench_repeats < 20:
            raise ConfigError(f"bench_repeats must be >= 20, got {self.bench_repeats}")
        if self.frame_format not in ("pgm", "png"):
            raise ConfigError(f"Unknown frame format {self.frame_format!r}")


def _frames(x):
    """`[..., C, H, W]` -> `[F, C, H, W]` float64."""
    x = as_tensor(x)
    return x.reshape(-1, *x.shape[-3:]).to(torch.float64)


def _check_pair(x, x_hat):
    if x.shape != x_hat.shape:
        raise ShapeError(f"Metric inputs differ in shape: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def mse(x, x_hat):
    _check_pair(as_tensor(x), as_tensor(x_hat))
    lead = as_tensor(x).shape[:-3]
    return ((_frames(x) - _frames(x_hat)) ** 2).mean(dim=(1, 2, 3)).reshape(lead)


def psnr(x, x_hat, peak=1.0):
    """Per-frame PSNR in dB, capped at 100 for exact matches."""
    error = mse(x, x_hat)
    safe = error.clamp_min(torch.finfo(torch.float64).tiny)
    value = 10 * torch.log10(peak**2 / safe)
    return torch.where(error > 0, value.clamp_max(PSNR_CAP), torch.full_like(value, PSNR_CAP))


def gaussian_window(size=11, sigma=1.5):
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, x_hat, peak=1.0, size=11, sigma=1.5):
    """Per-frame SSIM: Gaussian 11x11 window, sigma 1.5, mean over valid windows and channels."""
    _check_pair(as_tensor(x), as_tensor(x_hat))
    lead = as_tensor(x).shape[:-3]
    a, b = _frames(x), _frames(x_hat)
    if a.shape[-1] < size or a.shape[-2] < size:
        raise ShapeError(f"SSIM needs frames of at least {size}x{size}, got {tuple(a.shape[-2:])}")
    channels = a.shape[1]
    kernel = gaussian_window(size, sigma).expand(channels, 1, size, size)

    def blur(img):
        return F.conv2d(img, kernel, groups=channels)

    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return ssim_map.mean(dim=(1, 2, 3)).reshape(lead)


@dataclass
class MetricReport:
    """Per-clip, per-step `[clips, steps]` arrays of mse, psnr and ssim."""

    mse: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray

    METRICS = ("mse", "psnr", "ssim")

    @property
    def steps(self):
        return self.mse.shape[1]

    def means(self):
        return {name: float(getattr(self, name).mean()) for name in self.METRICS}


def evaluate(prediction, truth, value_range=ValueRange.unit):
    prediction, truth = as_tensor(prediction), as_tensor(truth)
    if prediction.ndim != 5:
        raise ShapeError(f"evaluate expects [N, S, C, H, W], got {tuple(prediction.shape)}")
    _check_pair(truth, prediction)
    peak = ValueRange(value_range).peak
    return MetricReport(
        mse=mse(truth, prediction).numpy(),
        psnr=psnr(truth, prediction, peak).numpy(),
        ssim=ssim(truth, prediction, peak).numpy(),
    )


CURVE_HEADER = ("step", "mse_mean", "mse_std", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std")


def per_step_curves(report, truth=None, value_range=ValueRange.unit):
    """One row per future step: mean and (population) std across clips of every metric.

    `report` may also be a prediction tensor, in which case `truth` is
    required and it is scored first over `value_range`.
    """
    if not isinstance(report, MetricReport):
        if truth is None:
            raise ShapeError("per_step_curves needs ground truth when given raw predictions")
        if as_tensor(report).shape[1] != as_tensor(truth).shape[1]:
            raise ShapeError(
                f"Prediction horizon {as_tensor(report).shape[1]} differs from ground truth {as_tensor(truth).shape[1]}"
            )
        report = evaluate(report, truth, value_range)
    rows = []
    for step in range(report.steps):
        row = {"step": step + 1}
        for name in MetricReport.METRICS:
            values = getattr(report, name)[:, step]
            row[f"{name}_mean"] = float(values.mean())
            row[f"{name}_std"] = float(values.std())
        rows.append(row)
    return rows


def curve_slope(rows, metric="psnr_mean", first=None, last=None):
    """Least-squares slope of a curve column over steps `first..last` (1-based, inclusive)."""
    selected = [row for row in rows if (first is None or row["step"] >= first) and (last is None or row["step"] <= last)]
    if len(selected) < 2:
        raise ShapeError("A slope needs at least two steps")
    steps = np.array([row["step"] for row in selected], dtype=np.float64)
    values = np.array([row[metric] for row in selected], dtype=np.float64)
    return float(np.polyfit(steps, values, 1)[0])


def temporal_variance(prediction):
    prediction = as_tensor(prediction).to(torch.float64)
    return float(prediction.var(dim=1, unbiased=False).mean())


def finite_or_cap(value):
    return PSNR_CAP if math.isinf(value) else value
