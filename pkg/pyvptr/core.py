"""
Shared array types, shape algebra and the `.vtn` tensor container.

Everything in the package passes plain `torch.Tensor` objects around. The
`VideoBatch` and `FeatureSeq` wrappers exist for the boundaries (dataset
I/O, metrics, inference results) where the shape and value contracts
are worth checking once.

Layout conventions, used everywhere:

 * pixels are `[N, T, C, H, W]`
 * features are channels-last `[N, T, Hf, Wf, D]`
 * batch and time fold as `(n t)`, batch outer
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
import struct

from einops import rearrange
import numpy as np
import torch


class VPTRError(Exception):
    pass


class ShapeError(VPTRError, ValueError):
    pass


class MaskError(VPTRError, ValueError):
    pass


class ConfigError(VPTRError, ValueError):
    pass


class ModeError(VPTRError, ValueError):
    pass


class DivergenceError(VPTRError):
    pass


class CheckpointError(VPTRError):
    pass


class TensorFileError(VPTRError):
    pass


class BadMagicError(TensorFileError):
    pass


class UnsupportedFormatError(TensorFileError):
    pass


class ValueRange(Enum):
    signed = "signed"
    unit = "unit"

    @property
    def bounds(self):
        return (-1.0, 1.0) if self is ValueRange.signed else (0.0, 1.0)

    @property
    def peak(self):
        low, high = self.bounds
        return high - low


class Variant(Enum):
    far = "far"
    par = "par"
    nar = "nar"


@dataclass(frozen=True)
class VideoBatch:
    """Pixel clips `[N, T, C, H, W]` within a declared value range."""

    data: torch.Tensor
    value_range: ValueRange = ValueRange.unit

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"VideoBatch needs rank 5 [N, T, C, H, W], got {tuple(self.data.shape)}")
        if 0 in self.data.shape:
            raise ShapeError(f"VideoBatch dims must be >= 1, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("VideoBatch contains non-finite values")
        low, high = self.value_range.bounds
        if self.data.min() < low or self.data.max() > high:
            raise ValueError(
                f"VideoBatch values [{self.data.min():.4g}, {self.data.max():.4g}] "
                f"outside {self.value_range.value} range [{low}, {high}]"
            )

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass(frozen=True)
class FeatureSeq:
    """Latent sequences `[N, T, Hf, Wf, D]`."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"FeatureSeq needs rank 5 [N, T, Hf, Wf, D], got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("FeatureSeq contains non-finite values")

    def check_window(self, window):
        _, _, height, width, _ = self.data.shape
        if (height * width) % (window * window):
            raise ShapeError(f"Hf*Wf={height * width} is not divisible by K^2={window * window}")
        return self


def as_tensor(x):
    if isinstance(x, (VideoBatch, FeatureSeq)):
        return x.data
    return x


def window_partition(z, window):
    """Split `[NT, Hf, Wf, D]` into `[NT*P, K*K, D]` non-overlapping tiles.

    Tiles are enumerated row-major per frame, and so are the positions
    inside a tile.
    """
    if z.ndim != 4:
        raise ShapeError(f"window_partition expects [NT, Hf, Wf, D], got {tuple(z.shape)}")
    _, height, width, _ = z.shape
    if height % window or width % window:
        raise ShapeError(f"Window size {window} does not divide feature map {height}x{width}")
    return rearrange(z, "b (h k1) (w k2) d -> (b h w) (k1 k2) d", k1=window, k2=window)


def window_merge(patches, window, height, width):
    """Inverse of `window_partition`."""
    if height % window or width % window:
        raise ShapeError(f"Window size {window} does not divide feature map {height}x{width}")
    rows, cols = height // window, width // window
    if patches.ndim != 3 or patches.shape[1] != window * window or patches.shape[0] % (rows * cols):
        raise ShapeError(
            f"Cannot merge patches {tuple(patches.shape)} into {height}x{width} with window {window}"
        )
    return rearrange(
        patches, "(b h w) (k1 k2) d -> b (h k1) (w k2) d", h=rows, w=cols, k1=window, k2=window
    )


def fold_spatial(z):
    """`[N, T, Hf, Wf, D]` -> `[(N T), Hf, Wf, D]`"""
    return rearrange(z, "n t h w d -> (n t) h w d")


def unfold_spatial(z, batch):
    return rearrange(z, "(n t) h w d -> n t h w d", n=batch)


def fold_temporal(z):
    """`[N, T, Hf, Wf, D]` -> `[(N Hf Wf), T, D]`, one sequence per location."""
    return rearrange(z, "n t h w d -> (n h w) t d")


def unfold_temporal(z, batch, height, width):
    return rearrange(z, "(n h w) t d -> n t h w d", n=batch, h=height, w=width)


MAGIC = b"VPTR"
VERSION = 1
# dtype code -> little-endian numpy dtype
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBB")


def _dtype_code(array):
    for code, dtype in DTYPES.items():
        if array.dtype == dtype.newbyteorder("="):
            return code
    raise UnsupportedFormatError(f"Unsupported dtype {array.dtype}, only float32/float64 can be stored")


def save_tensor(path, x):
    """Write `x` as a `.vtn` TensorFile: header, u32 dims, dtype byte, payload."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    array = np.asarray(x)
    code = _dtype_code(array)
    if array.ndim > 255:
        raise UnsupportedFormatError(f"Rank {array.ndim} does not fit the header")
    header = _HEADER.pack(MAGIC, VERSION, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes(order="C")
    Path(path).write_bytes(header + dims + bytes([code]) + payload)
    return Path(path)


def load_tensor(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFileError(f"{path} is too short to be a TensorFile")
    magic, version, rank = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path} has bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedFormatError(f"{path} has unsupported TensorFile version {version}")
    offset = _HEADER.size
    if len(raw) < offset + 4 * rank + 1:
        raise TensorFileError(f"{path} header is truncated")
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    code = raw[offset]
    offset += 1
    if code not in DTYPES:
        raise UnsupportedFormatError(f"{path} has unsupported dtype code {code}")
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise TensorFileError(f"{path} payload is {len(raw) - offset} bytes, header says {expected}")
    array = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)
    return torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True))
