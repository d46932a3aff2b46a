import numpy as np
import pytest
import torch

from pyvptr.core import ConfigError, ShapeError, ValueRange
from pyvptr.frames import (
    export_clips,
    from_bytes,
    import_frames,
    read_frame,
    read_pgm,
    to_bytes,
    write_frame,
    write_pgm,
)


def test_quantisation():
    frame = torch.tensor([[[0.0, 0.5, 1.0, 1.2]]])
    assert to_bytes(frame).tolist() == [[0, 128, 255, 255]]
    assert to_bytes(frame * 2 - 1, ValueRange.signed).tolist() == [[0, 128, 255, 255]]
    restored = from_bytes(np.array([[0, 255]], dtype=np.uint8), "signed")
    assert restored.shape == (1, 1, 2)
    assert restored.flatten().tolist() == [-1.0, 1.0]
    with pytest.raises(ShapeError):
        to_bytes(torch.zeros(3, 4, 4))


def test_pgm_round_trip_with_comments(tmp_path):
    pixels = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "a.pgm"
    write_pgm(path, pixels)
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
    assert np.array_equal(read_pgm(path), pixels)

    commented = tmp_path / "b.pgm"
    commented.write_bytes(b"P5\n# made elsewhere\n4 3\n255\n" + pixels.tobytes())
    assert np.array_equal(read_pgm(commented), pixels)


def test_bad_pgm_files(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ConfigError):
        read_pgm(path)
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(3))
    with pytest.raises(ConfigError):
        read_pgm(path)
    with pytest.raises(ConfigError):
        read_frame(tmp_path / "x.bmp")


def test_png_frames(tmp_path):
    pytest.importorskip("PIL")
    frame = (torch.rand(1, 8, 8) > 0.5).float()
    path = write_frame(tmp_path / "f.png", frame, fmt="png")
    assert torch.equal(read_frame(path), frame)


def test_export_then_import(tmp_path):
    clips = torch.rand(2, 3, 1, 64, 64)
    written = export_clips(tmp_path, clips, prefix="clip")
    assert len(written) == 6
    assert written[4].relative_to(tmp_path).as_posix() == "clip_0001/frame_001.pgm"
    batch = import_frames(tmp_path)
    assert batch.shape == (2, 3, 1, 64, 64)
    assert (batch.data - clips).abs().max() <= 0.5 / 255 + 1e-6


def test_import_checks_sizes_and_lengths(tmp_path):
    export_clips(tmp_path / "short", torch.zeros(1, 2, 1, 64, 64))
    export_clips(tmp_path / "short", torch.zeros(1, 3, 1, 64, 64), prefix="more")
    with pytest.raises(ShapeError):
        import_frames(tmp_path / "short")
    export_clips(tmp_path / "small", torch.zeros(1, 2, 1, 32, 32))
    with pytest.raises(ShapeError):
        import_frames(tmp_path / "small")
    with pytest.raises(ConfigError):
        import_frames(tmp_path / "missing")
