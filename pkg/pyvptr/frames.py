"""
Frame images on disk: binary PGM always, PNG when Pillow is installed.

Frames are single-channel `[1, H, W]` tensors in either value range;
they are quantised to 8 bits on export.
"""

from pathlib import Path

from loguru import logger
import numpy as np
import torch

from pyvptr.core import ConfigError, ShapeError, ValueRange, VideoBatch
from pyvptr.autoencoder import FRAME_SIZE

try:
    from PIL import Image
except ImportError:  # pragma: no cover
    Image = None

SUFFIXES = {"pgm": ".pgm", "png": ".png"}


def to_bytes(frame, value_range=ValueRange.unit):
    frame = torch.as_tensor(frame).detach().cpu().to(torch.float64)
    if frame.ndim == 3:
        if frame.shape[0] != 1:
            raise ShapeError(f"Only grayscale frames can be exported, got {frame.shape[0]} channels")
        frame = frame[0]
    if frame.ndim != 2:
        raise ShapeError(f"Expected a [1, H, W] frame, got {tuple(frame.shape)}")
    low, high = ValueRange(value_range).bounds
    unit = ((frame - low) / (high - low)).clamp(0, 1)
    return np.rint(unit.numpy() * 255).astype(np.uint8)


def from_bytes(pixels, value_range=ValueRange.unit):
    low, high = ValueRange(value_range).bounds
    unit = torch.from_numpy(np.asarray(pixels, dtype=np.float32) / 255)
    return (unit * (high - low) + low)[None]


def write_pgm(path, pixels):
    height, width = pixels.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    fields, offset = [], 0
    # magic, width, height, maxval; whitespace and comments in between
    while len(fields) < 4:
        while offset < len(raw) and raw[offset : offset + 1].isspace():
            offset += 1
        if raw[offset : offset + 1] == b"#":
            offset = raw.index(b"\n", offset) + 1
            continue
        end = offset
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == offset:
            raise ConfigError(f"{path} is not a binary PGM file")
        fields.append(raw[offset:end])
        offset = end
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5" or maxval != 255:
        raise ConfigError(f"{path} is not an 8-bit binary PGM file")
    data = raw[offset + 1 : offset + 1 + width * height]
    if len(data) != width * height:
        raise ConfigError(f"{path} is truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def write_frame(path, frame, value_range=ValueRange.unit, fmt="pgm"):
    pixels = to_bytes(frame, value_range)
    if fmt == "pgm":
        write_pgm(path, pixels)
    elif fmt == "png":
        if Image is None:
            raise ConfigError("PNG export needs Pillow; install pyvptr[png] or use pgm")
        Image.fromarray(pixels, mode="L").save(path)
    else:
        raise ConfigError(f"Unknown frame format {fmt!r}")
    return Path(path)


def read_frame(path, value_range=ValueRange.unit):
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        pixels = read_pgm(path)
    elif path.suffix.lower() == ".png":
        if Image is None:
            raise ConfigError(f"Reading {path} needs Pillow")
        pixels = np.asarray(Image.open(path).convert("L"))
    else:
        raise ConfigError(f"Unsupported frame file {path}")
    return from_bytes(pixels, value_range)


def export_clips(directory, clips, value_range=ValueRange.unit, fmt="pgm", prefix="clip"):
    """Write `[N, T, 1, H, W]` as `<prefix>_<n>/frame_<t>.<fmt>` and return the written paths."""
    if clips.ndim != 5:
        raise ShapeError(f"Expected clips [N, T, 1, H, W], got {tuple(clips.shape)}")
    directory = Path(directory)
    written = []
    for n, clip in enumerate(clips):
        clip_dir = directory / f"{prefix}_{n:04d}"
        clip_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(clip):
            written.append(write_frame(clip_dir / f"frame_{t:03d}{SUFFIXES[fmt]}", frame, value_range, fmt))
    logger.info(f"Wrote {len(written)} frames to {directory}")
    return written


def import_frames(directory, value_range=ValueRange.unit):
    """Read one sub-directory of frames per clip into a `[N, T, 1, 64, 64]` batch.

    Frames sort by file name; every clip must have the same length.
    """
    directory = Path(directory)
    clip_dirs = sorted(p for p in directory.iterdir() if p.is_dir()) if directory.is_dir() else []
    if not clip_dirs:
        raise ConfigError(f"No clip directories under {directory}")
    clips = []
    for clip_dir in clip_dirs:
        files = sorted(p for p in clip_dir.iterdir() if p.suffix.lower() in SUFFIXES.values())
        if not files:
            raise ConfigError(f"No frames in {clip_dir}")
        frames = [read_frame(path, value_range) for path in files]
        for path, frame in zip(files, frames):
            if tuple(frame.shape[1:]) != (FRAME_SIZE, FRAME_SIZE):
                raise ShapeError(f"{path} is {frame.shape[2]}x{frame.shape[1]}, expected {FRAME_SIZE}x{FRAME_SIZE}")
        clips.append(torch.stack(frames))
    lengths = {clip.shape[0] for clip in clips}
    if len(lengths) > 1:
        raise ShapeError(f"Clips have different lengths {sorted(lengths)}")
    logger.info(f"Imported {len(clips)} clips of {clips[0].shape[0]} frames from {directory}")
    return VideoBatch(torch.stack(clips), ValueRange(value_range))
