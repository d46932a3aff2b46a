"""
The `pyvptr` command line.

Every command writes its outputs, plus a `manifest.json` recording the
command, its options and the full configuration, into one directory
under the run directory (`--run-dir`, `$VPTR_RUN_DIR`, or the per-user
data directory).
"""

import csv
import dataclasses
import functools
import json
from pathlib import Path
import sys
import time

import click
from loguru import logger
import numpy as np
import torch

from pyvptr.autoencoder import FRAME_SIZE, Autoencoder, load_autoencoder, save_autoencoder, train_autoencoder
from pyvptr.block import flops_estimate
from pyvptr.checkpoint import state_digest
from pyvptr.config import RunConfig, default_run_dir
from pyvptr.core import (
    CheckpointError,
    ConfigError,
    ModeError,
    ValueRange,
    Variant,
    VPTRError,
    load_tensor,
    save_tensor,
)
from pyvptr.evalsuite import CURVE_HEADER, build_split, copy_last_frame, evaluate, per_step_curves
from pyvptr.frames import export_clips, import_frames
from pyvptr.models import build_model, check_mode, load_model, predict, save_model, train_stage2

SPLITS = ("train", "val", "test")
_sink = None


def configure_logging(level):
    global _sink
    if _sink is None:
        try:
            logger.remove(0)
        except ValueError:
            pass
    else:
        logger.remove(_sink)
    _sink = logger.add(sys.stderr, level=level.upper())


def reports_errors(func):
    """Turn library errors into click errors: mode clashes are usage errors, the rest exit 1."""

    @functools.wraps(func)
    def wrapped(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ModeError as err:
            raise click.UsageError(str(err)) from err
        except VPTRError as err:
            logger.error(str(err))
            raise click.ClickException(str(err)) from err

    return wrapped


def write_manifest(out, command, options, config, **extra):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "options": {key: str(value) if isinstance(value, Path) else value for key, value in options.items()},
        "config": config.dumps(),
        "config_digest": config.digest(),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def write_csv(path, header, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[key] for key in header] if isinstance(row, dict) else row)
    logger.info(f"Wrote {path}")


def write_history(path, history):
    header = sorted({key for entry in history for key in entry}, key=lambda k: (k != "epoch", k))
    write_csv(path, header, [{key: entry.get(key, "") for key in header} for entry in history])


def load_split(data_dir, split):
    path = Path(data_dir) / f"{split}.vtn"
    if not path.is_file():
        raise ConfigError(f"No {split} split at {path}; run gen-data first")
    return load_tensor(path)


def run_config(ctx):
    return ctx.obj["config"]


def out_dir(ctx, out, default):
    return Path(out) if out else ctx.obj["run_dir"] / default


@click.group()
@click.option("--run-dir", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output root.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--profile", type=click.Choice(["desk", "full"]), default="desk", show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=None, help="torch intra-op threads; 1 is bit-exact.")
@click.option(
    "--log-level",
    type=click.Choice(["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
@click.pass_context
def cli(ctx, run_dir, config_path, profile, threads, log_level):
    """Video prediction transformers: data, training, prediction and cost reports."""
    configure_logging(log_level)
    if threads:
        torch.set_num_threads(threads)
    base = RunConfig.profile(profile)
    try:
        config = RunConfig.load(config_path, base) if config_path else base
    except ConfigError as err:
        raise click.BadParameter(str(err), param_hint="--config") from err
    ctx.obj = {"config": config, "run_dir": run_dir or default_run_dir(), "profile": profile}


@cli.command("gen-data")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@reports_errors
def gen_data(ctx, spec_path, out):
    """Generate the synthetic moving-shapes splits."""
    config = RunConfig.load(spec_path, run_config(ctx)) if spec_path else run_config(ctx)
    out = out_dir(ctx, out, "data")
    out.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for split in SPLITS:
        clips = build_split(config.data, split)
        if clips.shape[0]:
            save_tensor(out / f"{split}.vtn", clips)
        shapes[split] = list(clips.shape)
        logger.info(f"{split}: {shapes[split][0]} clips")
    write_manifest(out, "gen-data", {"spec": spec_path, "out": out}, config, splits=shapes)
    click.echo(str(out))


@cli.command("train-ae")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@reports_errors
def train_ae(ctx, data_dir, out):
    """Stage one: train the frame autoencoder."""
    config = run_config(ctx)
    out = out_dir(ctx, out, "autoencoder")
    train = load_split(data_dir, "train")
    val = load_split(data_dir, "val") if (Path(data_dir) / "val.vtn").is_file() else None
    autoencoder, history = train_autoencoder(train, config.autoencoder, val)
    result = {key: history[-1][key] for key in ("val_mse", "target_met") if key in history[-1]}
    save_autoencoder(out, autoencoder, config_digest=config.digest(), **result)
    write_history(out / "loss_history.csv", history)
    write_manifest(out, "train-ae", {"data": data_dir, "out": out}, config, **result)
    click.echo(str(out))


def check_autoencoder_config(manifest, config, ae_ckpt):
    stored = manifest.get("config") or {}
    expected = dataclasses.asdict(config.autoencoder)
    if stored == expected:
        return
    changed = sorted(key for key in set(stored) | set(expected) if stored.get(key) != expected.get(key))
    raise CheckpointError(
        f"Autoencoder at {ae_ckpt} was trained with a different [autoencoder] section ({', '.join(changed)}); "
        "run with the config it was trained with"
    )


@cli.command("train-vptr")
@click.option("--variant", type=click.Choice([v.value for v in Variant]), required=True)
@click.option("--ae-ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@reports_errors
def train_vptr(ctx, variant, ae_ckpt, data_dir, out):
    """Stage two: train a predictor on frozen autoencoder features."""
    config = run_config(ctx)
    model_config = dataclasses.replace(config.model, variant=variant)
    autoencoder, manifest = load_autoencoder(ae_ckpt)
    check_autoencoder_config(manifest, config, ae_ckpt)
    if autoencoder.config.d_model != model_config.d_model:
        raise ConfigError(
            f"Autoencoder at {ae_ckpt} has d_model={autoencoder.config.d_model}, model expects {model_config.d_model}"
        )
    out = out_dir(ctx, out, f"vptr-{variant}")
    model, history = train_stage2(variant, autoencoder, load_split(data_dir, "train"), model_config, config.train)
    save_model(out, model, state_digest(autoencoder), config_digest=config.digest())
    write_history(out / "loss_history.csv", history)
    write_manifest(out, "train-vptr", {"variant": variant, "ae_ckpt": ae_ckpt, "data": data_dir, "out": out}, config)
    click.echo(str(out))


def load_pair(ae_ckpt, model_ckpt):
    autoencoder, _ = load_autoencoder(ae_ckpt)
    model, _ = load_model(model_ckpt, state_digest(autoencoder))
    return autoencoder, model


def checkpoint_options(func):
    func = click.option("--ae-ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)(func)
    func = click.option("--model-ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)(func)
    func = click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)(func)
    func = click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)(func)
    func = click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)(func)
    return func


def mode_options(func):
    func = click.option("--mode", type=click.Choice(["rip", "ril", "block"]), default=None)(func)
    func = click.option("--steps", type=click.IntRange(min=1), default=None)(func)
    func = click.option("--variant", type=click.Choice([v.value for v in Variant]), default=None)(func)
    return func


def resolve_mode(variant, mode):
    """Reject a mode/variant clash before anything is loaded."""
    if variant and mode:
        check_mode(variant, mode)
    return mode


def default_mode(variant, config):
    if variant is Variant.nar:
        return "block"
    return config.eval.mode if config.eval.mode != "block" else "rip"


def run_prediction(ae_ckpt, model_ckpt, data_dir, split, variant, mode, steps, config):
    autoencoder, model = load_pair(ae_ckpt, model_ckpt)
    if variant and model.variant is not Variant(variant):
        raise ModeError(f"--variant {variant} does not match the {model.variant.value} checkpoint at {model_ckpt}")
    mode = mode or default_mode(model.variant, config)
    clips = load_split(data_dir, split)
    past = model.config.past
    steps = steps or model.config.future
    prediction = predict(clips[:, :past], autoencoder, model, mode, steps)
    return clips, prediction, autoencoder, model, mode


@cli.command("predict")
@checkpoint_options
@mode_options
@click.option("--format", "fmt", type=click.Choice(["pgm", "png"]), default=None)
@click.pass_context
@reports_errors
def predict_cmd(ctx, ae_ckpt, model_ckpt, data_dir, split, out, mode, steps, variant, fmt):
    """Predict future frames and export them as images."""
    config = run_config(ctx)
    resolve_mode(variant, mode)
    clips, prediction, autoencoder, model, mode = run_prediction(
        ae_ckpt, model_ckpt, data_dir, split, variant, mode, steps, config
    )
    out = out_dir(ctx, out, f"predict-{model.variant.value}-{mode}")
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "predictions.vtn", prediction)
    export_clips(out / "frames", prediction, autoencoder.value_range, fmt or config.eval.frame_format)
    options = dict(ae_ckpt=ae_ckpt, model_ckpt=model_ckpt, data=data_dir, split=split, mode=mode, steps=prediction.shape[1])
    write_manifest(out, "predict", options, config)
    click.echo(str(out))


@cli.command("eval")
@checkpoint_options
@mode_options
@click.pass_context
@reports_errors
def eval_cmd(ctx, ae_ckpt, model_ckpt, data_dir, split, out, mode, steps, variant):
    """Score predictions per future step against ground truth and the copy-last-frame baseline."""
    config = run_config(ctx)
    resolve_mode(variant, mode)
    clips, prediction, autoencoder, model, mode = run_prediction(
        ae_ckpt, model_ckpt, data_dir, split, variant, mode, steps, config
    )
    past, steps = model.config.past, prediction.shape[1]
    truth = clips[:, past : past + steps]
    if truth.shape[1] < steps:
        raise ConfigError(f"Clips of {clips.shape[1]} frames cannot score {steps} steps after {past} past frames")
    out = out_dir(ctx, out, f"eval-{model.variant.value}-{mode}")
    out.mkdir(parents=True, exist_ok=True)
    value_range = autoencoder.value_range
    report = evaluate(prediction, truth, value_range)
    baseline = evaluate(copy_last_frame(clips[:, :past], steps), truth, value_range)
    write_csv(out / "metrics.csv", CURVE_HEADER, per_step_curves(report))
    write_csv(out / "baseline.csv", CURVE_HEADER, per_step_curves(baseline))
    model_means, baseline_means = report.means(), baseline.means()
    write_csv(
        out / "summary.csv",
        ("metric", "model", "baseline"),
        [(name, model_means[name], baseline_means[name]) for name in model_means],
    )
    options = dict(ae_ckpt=ae_ckpt, model_ckpt=model_ckpt, data=data_dir, split=split, mode=mode, steps=steps)
    write_manifest(out, "eval", options, config, means=model_means, baseline=baseline_means)
    for name in model_means:
        click.echo(f"{name}: {model_means[name]:.6g} (baseline {baseline_means[name]:.6g})")


@cli.command("flops")
@click.option("--variant", "variants", type=click.Choice([v.value for v in Variant]), multiple=True)
@click.option("--mode", type=click.Choice(["rip", "ril", "block"]), default="rip", show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--include-autoencoder", is_flag=True, help="Count the frame encoder and decoder as well.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@reports_errors
def flops_cmd(ctx, variants, mode, batch, include_autoencoder, out):
    """Analytic inference FLOPs per component; needs no weights."""
    config = run_config(ctx)
    out = out_dir(ctx, out, f"flops-{ctx.obj['profile']}")
    out.mkdir(parents=True, exist_ok=True)
    totals = {}
    ae = (config.autoencoder.channels, config.autoencoder.d_model, config.autoencoder.res_blocks)
    for variant in variants or [v.value for v in Variant]:
        model_config = dataclasses.replace(config.model, variant=variant)
        report = flops_estimate(model_config, batch, mode, include_autoencoder=include_autoencoder, autoencoder=ae)
        write_csv(out / f"flops_{variant}.csv", ("component", "flops"), report.rows())
        totals[variant] = report.total
        click.echo(f"{variant}: {report.total:.4g} FLOPs")
    options = dict(variants=list(variants), mode=mode, batch=batch, include_autoencoder=include_autoencoder)
    write_manifest(out, "flops", options, config, totals=totals)


def time_inference(run, repeats, warmup):
    for _ in range(warmup):
        run()
    seconds = []
    for _ in range(repeats):
        start = time.perf_counter()
        run()
        seconds.append(time.perf_counter() - start)
    return np.array(seconds)


@cli.command("bench")
@click.option("--variant", "variants", type=click.Choice([v.value for v in Variant]), multiple=True)
@click.option("--batch", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--repeats", type=click.IntRange(min=20), default=None, help="At least 20.")
@click.option("--ae-ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@reports_errors
def bench(ctx, variants, batch, repeats, ae_ckpt, out):
    """Wall-clock inference time (prediction plus decoding) per variant.

    Timing does not depend on trained weights, so models are freshly
    initialised from the configuration.
    """
    config = run_config(ctx)
    repeats = repeats or config.eval.bench_repeats
    out = out_dir(ctx, out, "bench")
    out.mkdir(parents=True, exist_ok=True)
    if ae_ckpt:
        autoencoder, _ = load_autoencoder(ae_ckpt)
    else:
        torch.manual_seed(config.model.seed)
        autoencoder = Autoencoder(config.autoencoder).eval()
    generator = torch.Generator().manual_seed(config.data.seed)
    shape = (batch, config.model.past, config.autoencoder.channels, FRAME_SIZE, FRAME_SIZE)
    low, high = ValueRange(config.autoencoder.value_range).bounds
    past = torch.rand(shape, generator=generator) * (high - low) + low
    rows = []
    for variant in variants or [v.value for v in Variant]:
        model = build_model(dataclasses.replace(config.model, variant=variant)).eval()
        mode = "block" if variant == "nar" else "rip"
        seconds = time_inference(
            lambda: predict(past, autoencoder, model, mode, config.model.future), repeats, config.eval.bench_warmup
        )
        rows.append((variant, mode, repeats, float(seconds.mean()), float(seconds.std())))
        click.echo(f"{variant}: {seconds.mean() * 1000:.2f} ms per prediction")
    write_csv(out / "bench.csv", ("variant", "mode", "repeats", "mean_seconds", "std_seconds"), rows)
    write_manifest(out, "bench", dict(variants=list(variants), batch=batch, repeats=repeats), config)


@cli.command("import")
@click.option("--frames", "frames_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--split", type=click.Choice(SPLITS), default="train", show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@reports_errors
def import_cmd(ctx, frames_dir, split, out):
    """Convert directories of 64x64 grayscale frames (one per clip) into a dataset split."""
    config = run_config(ctx)
    out = out_dir(ctx, out, "data")
    out.mkdir(parents=True, exist_ok=True)
    batch = import_frames(frames_dir, config.data.value_range)
    save_tensor(out / f"{split}.vtn", batch.data)
    write_manifest(out, "import", {"frames": frames_dir, "split": split}, config, shape=list(batch.shape))
    click.echo(str(out / f"{split}.vtn"))


@logger.catch(reraise=True)
def main():
    cli()


if __name__ == "__main__":
    main()
