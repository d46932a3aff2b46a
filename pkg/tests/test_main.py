import csv
import json

from click.testing import CliRunner
import pytest
import torch

from pyvptr.autoencoder import load_autoencoder, save_autoencoder
from pyvptr.core import load_tensor
from pyvptr.evalsuite import CURVE_HEADER
from pyvptr.frames import export_clips
from pyvptr.main import cli

TINY_RUN = """
[data]
num_clips = 10
val_clips = 2
test_clips = 2
clip_length = 6

[autoencoder]
d_model = 16
res_blocks = 1
epochs = 1
batch_size = 5
augment = false

[model]
past = 2
future = 2
layers_far = 1
layers_enc = 1
layers_dec = 1
d_model = 16
heads = 2

[train]
epochs = 1
batch_size = 5

[eval]
steps = 2
bench_repeats = 20
bench_warmup = 0
"""


@pytest.fixture
def run_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_RUN)
    return path


def invoke(*args):
    return CliRunner().invoke(cli, [str(arg) for arg in args])


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_gen_data_writes_splits_reproducibly(tmp_path, run_file):
    first = invoke("--run-dir", tmp_path, "gen-data", "--spec", run_file, "--out", tmp_path / "a")
    assert first.exit_code == 0, first.output
    invoke("--run-dir", tmp_path, "gen-data", "--spec", run_file, "--out", tmp_path / "b")
    train = load_tensor(tmp_path / "a" / "train.vtn")
    assert tuple(train.shape) == (10, 6, 1, 64, 64)
    assert tuple(load_tensor(tmp_path / "a" / "test.vtn").shape) == (2, 6, 1, 64, 64)
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.vtn").read_bytes() == (tmp_path / "b" / f"{split}.vtn").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["splits"]["val"] == [2, 6, 1, 64, 64]
    assert "num_clips = 10" in manifest["config"]


def test_gen_data_defaults_to_the_run_dir(tmp_path, run_file):
    result = invoke("--run-dir", tmp_path, "--config", run_file, "gen-data")
    assert result.exit_code == 0, result.output
    assert (tmp_path / "data" / "train.vtn").is_file()


def test_missing_spec_names_the_path(tmp_path):
    missing = tmp_path / "nowhere.cfg"
    result = invoke("--run-dir", tmp_path, "gen-data", "--spec", missing)
    assert result.exit_code != 0
    assert "nowhere.cfg" in result.output


def test_bad_config_is_a_usage_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[model]\nheads = 5\n")
    result = invoke("--run-dir", tmp_path, "--config", path, "flops")
    assert result.exit_code == 2
    assert "heads=5" in result.output


def test_train_vptr_requires_an_autoencoder(tmp_path):
    result = invoke("--run-dir", tmp_path, "train-vptr", "--variant", "nar", "--data", tmp_path)
    assert result.exit_code == 2
    assert "--ae-ckpt" in result.output


@pytest.mark.parametrize("command", ["predict", "eval"])
def test_mode_clash_is_rejected_before_loading(tmp_path, command):
    empty = tmp_path / "empty"
    empty.mkdir()
    args = ["--ae-ckpt", empty, "--model-ckpt", empty, "--data", empty]
    result = invoke("--run-dir", tmp_path, command, *args, "--mode", "block", "--variant", "far")
    assert result.exit_code == 2
    assert "block" in result.output


def test_flops_ordering_for_the_published_sizes(tmp_path):
    result = invoke("--run-dir", tmp_path, "--profile", "full", "flops", "--out", tmp_path / "flops")
    assert result.exit_code == 0, result.output
    totals = {}
    for variant in ("far", "par", "nar"):
        rows = dict(read_rows(tmp_path / "flops" / f"flops_{variant}.csv")[1:])
        totals[variant] = float(rows["total"])
        assert float(rows["autoencoder"]) == 0
    assert totals["far"] > totals["par"] > totals["nar"]


def test_flops_with_autoencoder(tmp_path):
    result = invoke(
        "--run-dir", tmp_path, "flops", "--variant", "nar", "--include-autoencoder", "--out", tmp_path / "f"
    )
    assert result.exit_code == 0, result.output
    rows = dict(read_rows(tmp_path / "f" / "flops_nar.csv")[1:])
    assert float(rows["autoencoder"]) > 0
    assert not (tmp_path / "f" / "flops_far.csv").exists()


def test_import_frames(tmp_path):
    clips = (torch.rand(2, 3, 1, 64, 64) > 0.5).float()
    export_clips(tmp_path / "frames", clips)
    result = invoke("--run-dir", tmp_path, "import", "--frames", tmp_path / "frames", "--split", "val")
    assert result.exit_code == 0, result.output
    assert torch.equal(load_tensor(tmp_path / "data" / "val.vtn"), clips)


def test_import_rejects_empty_directories(tmp_path):
    (tmp_path / "frames").mkdir()
    result = invoke("--run-dir", tmp_path, "import", "--frames", tmp_path / "frames")
    assert result.exit_code == 1
    assert "No clip directories" in result.output


def test_pipeline(tmp_path, run_file):
    base = ["--run-dir", tmp_path, "--config", run_file]
    assert invoke(*base, "gen-data").exit_code == 0
    data = tmp_path / "data"

    result = invoke(*base, "train-ae", "--data", data)
    assert result.exit_code == 0, result.output
    ae = tmp_path / "autoencoder"
    history = read_rows(ae / "loss_history.csv")
    assert history[0][0] == "epoch" and "val_mse" in history[0]
    assert "target_met" in json.loads((ae / "manifest.json").read_text())

    result = invoke(*base, "train-vptr", "--variant", "nar", "--ae-ckpt", ae, "--data", data)
    assert result.exit_code == 0, result.output
    model = tmp_path / "vptr-nar"

    other = tmp_path / "other.cfg"
    other.write_text(TINY_RUN.replace("res_blocks = 1", "res_blocks = 2"))
    args = ["--variant", "nar", "--ae-ckpt", ae, "--data", data, "--out", tmp_path / "never"]
    result = invoke("--run-dir", tmp_path, "--config", other, "train-vptr", *args)
    assert result.exit_code == 1
    assert "different [autoencoder] section (res_blocks)" in result.output

    result = invoke(*base, "eval", "--ae-ckpt", ae, "--model-ckpt", model, "--data", data, "--out", tmp_path / "ev")
    assert result.exit_code == 0, result.output
    metrics = read_rows(tmp_path / "ev" / "metrics.csv")
    assert tuple(metrics[0]) == CURVE_HEADER
    assert [row[0] for row in metrics[1:]] == ["1", "2"]
    summary = read_rows(tmp_path / "ev" / "summary.csv")
    assert [row[0] for row in summary[1:]] == ["mse", "psnr", "ssim"]
    manifest = json.loads((tmp_path / "ev" / "manifest.json").read_text())
    assert manifest["options"]["mode"] == "block" and set(manifest["baseline"]) == {"mse", "psnr", "ssim"}

    result = invoke(
        *base, "predict", "--ae-ckpt", ae, "--model-ckpt", model, "--data", data, "--steps", "3", "--out", tmp_path / "p"
    )
    assert result.exit_code == 0, result.output
    assert tuple(load_tensor(tmp_path / "p" / "predictions.vtn").shape) == (2, 3, 1, 64, 64)
    assert len(list((tmp_path / "p" / "frames").glob("clip_*/frame_*.pgm"))) == 6

    result = invoke(*base, "predict", "--ae-ckpt", ae, "--model-ckpt", model, "--data", data, "--mode", "rip")
    assert result.exit_code == 2

    autoencoder, _ = load_autoencoder(ae)
    with torch.no_grad():
        next(autoencoder.parameters()).add_(1.0)
    save_autoencoder(tmp_path / "other-ae", autoencoder)
    result = invoke(*base, "eval", "--ae-ckpt", tmp_path / "other-ae", "--model-ckpt", model, "--data", data)
    assert result.exit_code == 1
    assert "trained against" in result.output


def test_bench_writes_timings(tmp_path, run_file):
    result = invoke("--run-dir", tmp_path, "--config", run_file, "bench", "--variant", "nar", "--out", tmp_path / "b")
    assert result.exit_code == 0, result.output
    rows = read_rows(tmp_path / "b" / "bench.csv")
    assert rows[0] == ["variant", "mode", "repeats", "mean_seconds", "std_seconds"]
    assert rows[1][:3] == ["nar", "block", "20"]
    assert float(rows[1][3]) > 0
