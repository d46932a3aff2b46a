"""
Skip-free convolutional frame autoencoder.

64x64 frames go through three stride-2 conv stages (C -> D/4 -> D/2 -> D)
and two residual blocks to an 8x8xD feature map; the decoder mirrors
that with transposed convolutions. Nothing from the encoder reaches the
decoder except the feature map, so predicted features can be decoded on
their own.

Frames are processed independently: time is folded into the batch.
"""

from dataclasses import dataclass

from einops import rearrange
from loguru import logger
import torch
from torch import nn

from pyvptr.checkpoint import load_bundle, save_bundle
from pyvptr.core import ShapeError, ConfigError, ValueRange, as_tensor
from pyvptr.losses import reconstruction_loss, l2_loss
from pyvptr.training import fit

FRAME_SIZE = 64
FEATURE_SIZE = 8


@dataclass
class AutoencoderConfig:
    """The `[autoencoder]` section."""

    channels: int = 1
    d_model: int = 64
    value_range: str = "unit"
    res_blocks: int = 2
    epochs: int = 50
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 0.0
    alpha: float = 1.0
    target_mse: float = 5e-3
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % 4:
            raise ConfigError(f"autoencoder d_model must be divisible by 4, got {self.d_model}")
        if self.lambda1 != 0:
            raise ConfigError("lambda1 weights the adversarial term, which is not implemented; it must be 0")
        ValueRange(self.value_range)


class ChannelNorm(nn.Module):
    """Layer norm over the channels of each pixel of `[B, C, H, W]`."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        x = rearrange(x, "b c h w -> b h w c")
        return rearrange(self.norm(x), "b h w c -> b c h w")


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            ChannelNorm(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            ChannelNorm(channels),
        )

    def forward(self, x):
        return x + self.net(x)


def down_stage(c_in, c_out):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), ChannelNorm(c_out), nn.ReLU())


def up_stage(c_in, c_out):
    return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), ChannelNorm(c_out), nn.ReLU())


class Encoder(nn.Module):
    def __init__(self, channels=1, d_model=64, res_blocks=2):
        super().__init__()
        self.channels = channels
        self.stages = nn.Sequential(
            down_stage(channels, d_model // 4),
            down_stage(d_model // 4, d_model // 2),
            down_stage(d_model // 2, d_model),
        )
        self.bottleneck = nn.Sequential(*[ResBlock(d_model) for _ in range(res_blocks)])

    def forward(self, x):
        """`[N, T, C, 64, 64]` -> `[N, T, 8, 8, D]`"""
        x = as_tensor(x)
        if x.ndim != 5 or tuple(x.shape[2:]) != (self.channels, FRAME_SIZE, FRAME_SIZE):
            raise ShapeError(
                f"Encoder expects [N, T, {self.channels}, {FRAME_SIZE}, {FRAME_SIZE}], got {tuple(x.shape)}"
            )
        batch = x.shape[0]
        frames = rearrange(x, "n t c h w -> (n t) c h w")
        features = self.bottleneck(self.stages(frames))
        return rearrange(features, "(n t) d h w -> n t h w d", n=batch)


class Decoder(nn.Module):
    def __init__(self, channels=1, d_model=64, res_blocks=2, value_range="unit"):
        super().__init__()
        self.d_model = d_model
        self.value_range = ValueRange(value_range)
        self.bottleneck = nn.Sequential(*[ResBlock(d_model) for _ in range(res_blocks)])
        self.stages = nn.Sequential(
            up_stage(d_model, d_model // 2),
            up_stage(d_model // 2, d_model // 4),
            up_stage(d_model // 4, d_model // 4),
        )
        self.head = nn.Conv2d(d_model // 4, channels, 3, padding=1)
        self.activation = nn.Tanh() if self.value_range is ValueRange.signed else nn.Sigmoid()

    def forward(self, z):
        """`[N, T, 8, 8, D]` -> `[N, T, C, 64, 64]`"""
        z = as_tensor(z)
        if z.ndim != 5 or tuple(z.shape[2:]) != (FEATURE_SIZE, FEATURE_SIZE, self.d_model):
            raise ShapeError(
                f"Decoder expects [N, T, {FEATURE_SIZE}, {FEATURE_SIZE}, {self.d_model}], got {tuple(z.shape)}"
            )
        batch = z.shape[0]
        features = rearrange(z, "n t h w d -> (n t) d h w").contiguous()
        frames = self.activation(self.head(self.stages(self.bottleneck(features))))
        return rearrange(frames, "(n t) c h w -> n t c h w", n=batch)


class Autoencoder(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or AutoencoderConfig()
        cfg = self.config
        self.encoder = Encoder(cfg.channels, cfg.d_model, cfg.res_blocks)
        self.decoder = Decoder(cfg.channels, cfg.d_model, cfg.res_blocks, cfg.value_range)

    @property
    def value_range(self):
        return ValueRange(self.config.value_range)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


def encode(x, encoder):
    return encoder(x)


def decode(z, decoder):
    return decoder(z)


@torch.no_grad()
def reconstruction_mse(autoencoder, clips, batch_size=16):
    """Mean squared reconstruction error over `clips`, in fixed batch order."""
    total, count = 0.0, 0
    for start in range(0, clips.shape[0], batch_size):
        batch = clips[start : start + batch_size]
        total += l2_loss(batch, autoencoder(batch)).item()
        count += batch.numel()
    return total / count


def train_autoencoder(train_clips, config=None, val_clips=None):
    """Stage one: fit encoder and decoder as a plain autoencoder.

    Returns `(autoencoder, history)`; when `val_clips` is given the last
    history entry gains `val_mse` and `target_met`.
    """
    config = config or AutoencoderConfig()
    torch.manual_seed(config.seed)
    autoencoder = Autoencoder(config)
    optimizer = torch.optim.Adam(autoencoder.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))

    def step(batch):
        reconstructed = autoencoder(batch)
        objective = reconstruction_loss(batch, reconstructed, config.alpha)
        logged = reconstruction_loss(batch, reconstructed, config.alpha, reduction="mean")
        return objective, logged

    history = fit(
        step,
        autoencoder.parameters(),
        optimizer,
        as_tensor(train_clips),
        config.epochs,
        config.batch_size,
        seed=config.seed,
        augment=config.augment,
        stage="autoencoder",
    )
    autoencoder.eval()
    if val_clips is not None:
        mse = reconstruction_mse(autoencoder, as_tensor(val_clips), config.batch_size)
        history[-1]["val_mse"] = mse
        history[-1]["target_met"] = mse < config.target_mse
        if mse < config.target_mse:
            logger.info(f"Held-out reconstruction MSE {mse:.6f} (target {config.target_mse})")
        else:
            logger.warning(f"Held-out reconstruction MSE {mse:.6f} misses target {config.target_mse}")
    return autoencoder, history


def save_autoencoder(directory, autoencoder, **extra):
    return save_bundle(directory, autoencoder, "autoencoder", autoencoder.config, **extra)


def load_autoencoder(directory):
    """Load a stage-one bundle frozen for inference; returns `(autoencoder, manifest)`."""
    autoencoder, manifest = load_bundle(
        directory, lambda m: Autoencoder(AutoencoderConfig(**m["config"])), kind="autoencoder"
    )
    autoencoder.eval()
    autoencoder.requires_grad_(False)
    return autoencoder, manifest
