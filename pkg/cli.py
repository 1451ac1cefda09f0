"""Command-line interface: data generation, training, evaluation, verification, tracing."""

# == IMPORTS ===================================================================================== #

import csv
import logging
import os
import sys

from contextlib import nullcontext
from dataclasses import replace
from typing import *

import click
import numpy as np

from click.core import ParameterSource

from ctc import DIGITS, LabelSequence, ctc_brute_force, ctc_loss
from data_synth import MANIFEST_NAME, Distortion, generate_dataset, load_dataset
from model import DEFORMABLE_DOMAIN, ModelConfig, build, load
from nn_ops import ConvLayer, trace_sampling_locations
from settings import ConfigError, parse_int_list, parse_size, read_settings
from tensor_core import Tensor
from train_eval import (
    COMPONENT_GRID, PLACEMENT_GRID, TrainConfig, compare_predictions, evaluate, grad_check,
    run_ablation, train
)

# == GLOBALS ===================================================================================== #

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

MODEL_KEYS = (
    "input_size", "input_channels", "conv_widths", "deformable_set", "use_residual",
    "use_adaptive_pool", "charset", "hidden", "seed", "dtype"
)
TRAIN_KEYS = (
    "learning_rate", "batch_size", "epochs", "steps", "seed", "momentum", "grad_clip",
    "eval_every", "log_every", "case_insensitive"
)

# == CONFIGURATION =============================================================================== #

def parse_config(
    config_file: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> Tuple[ModelConfig, TrainConfig]:
    """Merges defaults, a settings file, and already-parsed overrides, in that precedence.

    Parameters
    ==========
    config_file: `Optional[str]` = `None`
        A `key = value` settings file; see `settings.read_settings`.

    overrides: `Optional[Mapping[str, Any]]` = `None`
        Typed values (usually from command-line flags) that beat the file.

    Returns
    =======
    `(ModelConfig, TrainConfig)`
        Both validated. `seed` applies to both.
    """

    settings = read_settings(config_file) if config_file is not None else {}
    overrides = dict(overrides or {})

    unknown = sorted(
        (set(settings) | set(overrides)) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    )
    if len(unknown) > 0:
        raise ConfigError('\n'.join(f"Unknown setting '{key}'." for key in unknown))

    model_cfg = ModelConfig.from_settings({ k: v for k, v in settings.items() if k in MODEL_KEYS })
    train_cfg = TrainConfig.from_settings({ k: v for k, v in settings.items() if k in TRAIN_KEYS })

    model_cfg = replace(model_cfg, **{ k: v for k, v in overrides.items() if k in MODEL_KEYS })
    train_cfg = replace(train_cfg, **{ k: v for k, v in overrides.items() if k in TRAIN_KEYS })

    return model_cfg.validate(), train_cfg.validate()

def _explicit(ctx: click.Context, mapping: Mapping[str, str]) -> Dict[str, Any]:
    """Settings keys for the options the user actually passed on the command line."""

    return {
        key: ctx.params[option]
        for option, key in mapping.items()
        if ctx.get_parameter_source(option) == ParameterSource.COMMANDLINE
    }

def _deform_option(ctx, param, value):
    if value is None:
        return None

    try:
        indices = frozenset(parse_int_list(value))
    except ValueError as e:
        raise click.BadParameter(str(e))

    if not indices <= DEFORMABLE_DOMAIN:
        raise click.BadParameter("indices must be within {3,4,5}.")

    return indices

def _size_option(ctx, param, value):
    if value is None:
        return None

    try:
        return parse_size(value)
    except ValueError as e:
        raise click.BadParameter(str(e))

def _widths_option(ctx, param, value):
    if value is None:
        return None

    try:
        return parse_int_list(value)
    except ValueError as e:
        raise click.BadParameter(str(e))

def _manifest(path: str) -> str:
    return os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path

# ---- Shared options ---------------------------------------------------------------------------- #

_MODEL_OPTIONS = {
    "deform": "deformable_set",
    "residual": "use_residual",
    "adaptive_pool": "use_adaptive_pool",
    "input_size": "input_size",
    "channels": "input_channels",
    "widths": "conv_widths",
    "hidden": "hidden",
    "charset": "charset",
    "dtype": "dtype",
    "seed": "seed"
}

_TRAIN_OPTIONS = {
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "steps": "steps",
    "momentum": "momentum",
    "grad_clip": "grad_clip",
    "eval_every": "eval_every",
    "log_every": "log_every",
    "case_insensitive": "case_insensitive",
    "seed": "seed"
}

def model_options(fn):
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
            help="Settings file (key = value lines)."),
        click.option("--deform", callback=_deform_option,
            help="Comma list of deformable conv indices within {3,4,5}, e.g. 4,5."),
        click.option("--residual/--no-residual", default=False,
            help="Insert residual blocks after convs 3 and 5."),
        click.option("--adaptive-pool/--no-adaptive-pool", default=True,
            help="Final adaptive max pooling to height 1."),
        click.option("--input", "input_size", callback=_size_option,
            help="Input size WxH, e.g. 200x64."),
        click.option("--channels", type=click.Choice(["1", "3"]), default=None,
            callback=lambda ctx, param, v: None if v is None else int(v),
            help="Input channels."),
        click.option("--widths", callback=_widths_option,
            help="Comma list of conv widths (1 to 7 entries)."),
        click.option("--hidden", type=click.IntRange(min=1), help="BiLSTM width."),
        click.option("--charset", help="Recognized symbols, in class order."),
        click.option("--dtype", type=click.Choice(["float32", "float64"]), help="Precision."),
        click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn

def train_options(fn):
    options = [
        click.option("--lr", type=float, help="Learning rate (default 0.00005)."),
        click.option("--batch-size", type=click.IntRange(min=1), help="Batch size."),
        click.option("--epochs", type=click.IntRange(min=0), help="Epochs."),
        click.option("--steps", type=click.IntRange(min=0), help="Step budget; overrides epochs."),
        click.option("--momentum", type=float, help="SGD momentum."),
        click.option("--grad-clip", type=float, help="Global L2 clip threshold."),
        click.option("--eval-every", type=click.IntRange(min=0), help="Evaluation cadence."),
        click.option("--log-every", type=click.IntRange(min=0), help="Logging cadence."),
        click.option("--case-insensitive/--case-sensitive", default=False,
            help="Fold labels and predictions to lower case.")
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn

def _configs(ctx: click.Context) -> Tuple[ModelConfig, TrainConfig]:
    overrides = _explicit(ctx, _MODEL_OPTIONS)
    overrides.update(_explicit(ctx, { k: v for k, v in _TRAIN_OPTIONS.items() if k in ctx.params }))
    return parse_config(ctx.params.get("config_file"), overrides)

# == COMMANDS ==================================================================================== #

@click.group(context_settings={ "help_option_names": ["-h", "--help"] })
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings and errors only.")
def cli(verbose: bool, quiet: bool):
    """Deformable-convolution text recognizer."""

    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level = level,
        format = "%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream = sys.stderr,
        force = True
    )

@cli.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
    help="Output directory.")
@click.option("--regular", type=click.IntRange(min=0), default=0, help="Regular samples.")
@click.option("--curved", type=click.IntRange(min=0), default=0, help="Curved samples.")
@click.option("--tilted", type=click.IntRange(min=0), default=0, help="Tilted samples.")
@click.option("--charset", default=DIGITS, show_default=True, help="Label symbols.")
@click.option("--canvas", default="100x32", show_default=True, callback=_size_option,
    help="Canvas size WxH.")
@click.option("--channels", type=click.Choice(["1", "3"]), default="1", show_default=True,
    help="1 = PGM grayscale, 3 = PPM colour.")
@click.option("--min-length", type=click.IntRange(1, 12), default=1, show_default=True)
@click.option("--max-length", type=click.IntRange(1, 12), default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
@click.option("--progress/--no-progress", default=False, help="Show a progress bar.")
def gen_data_command(out_dir, regular, curved, tilted, charset, canvas, channels,
    min_length, max_length, seed, progress
):
    """Render a synthetic dataset with its manifest."""

    if min_length > max_length:
        raise click.BadParameter("--min-length exceeds --max-length.")

    manifest = generate_dataset(
        { Distortion.REGULAR: regular, Distortion.CURVED: curved, Distortion.TILTED: tilted },
        charset, seed, out_dir,
        canvas = canvas,
        channels = int(channels),
        lengths = (min_length, max_length),
        progress = progress
    )
    click.echo(f"{len(manifest)} samples -> {manifest.path}")

@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True),
    help="Dataset directory or manifest.")
@click.option("--out", "out_dir", default="run", show_default=True,
    type=click.Path(file_okay=False), help="Directory for checkpoints and loss.csv.")
@click.option("--eval-data", type=click.Path(exists=True), help="Held-out dataset.")
@click.option("--progress/--no-progress", default=False, help="Show a progress bar.")
@model_options
@train_options
@click.pass_context
def train_command(ctx, data, out_dir, eval_data, progress, **_):
    """Train a model on a generated dataset."""

    model_cfg, train_cfg = _configs(ctx)
    logger.info("Model: %s", model_cfg.to_text().strip().replace("\n", "; "))

    def read(path: str) -> list:
        return list(load_dataset(_manifest(path), model_cfg.input_size, model_cfg.charset,
            model_cfg.input_channels, model_cfg.dtype, train_cfg.case_insensitive))

    dataset = read(data)
    eval_set = read(eval_data) if eval_data is not None else None

    model = build(model_cfg)
    result = train(model, dataset, train_cfg, out_dir, eval_set, progress)

    final = f"{result.losses[-1]:.5f}" if result.losses else "n/a"
    click.echo(
        f"{len(result.losses)} steps, final loss {final}, skipped {result.skipped_samples} "
        f"samples -> {result.checkpoint}"
    )

@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True),
    help="Dataset directory or manifest.")
@click.option("--compare", "compare_checkpoint", type=click.Path(exists=True, dir_okay=False),
    help="Second checkpoint to compare predictions with.")
@click.option("--report-csv", type=click.Path(dir_okay=False), help="Per-sample CSV report.")
@click.option("--case-insensitive/--case-sensitive", default=False)
def eval_command(checkpoint, data, compare_checkpoint, report_csv, case_insensitive):
    """Evaluate a checkpoint: accuracy and edit distance per distortion."""

    def score(path: str):
        model = load(path)
        dataset = load_dataset(_manifest(data), model.config.input_size, model.config.charset,
            model.config.input_channels, model.config.dtype, case_insensitive)
        return evaluate(model, list(dataset), case_insensitive)

    report = score(checkpoint)
    click.echo(report.to_text(), nl=False)
    if report_csv is not None:
        report.write_csv(report_csv)

    if compare_checkpoint is not None:
        other = score(compare_checkpoint)
        click.echo(f"compared with {compare_checkpoint} (accuracy {other.accuracy:.4f}):")
        for row in compare_predictions(report, other):
            marks = "".join("+" if ok else "-" for ok in (row.correct_a, row.correct_b))
            click.echo(
                f"  #{row.index} [{row.tag}] '{row.label}': '{row.prediction_a}' vs "
                f"'{row.prediction_b}' {marks}"
            )

@cli.command("gradcheck")
@click.option("--tolerance", type=float, default=1e-2, show_default=True)
@click.option("--probes", type=click.IntRange(min=1), default=4, show_default=True,
    help="Entries probed per parameter tensor.")
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
def gradcheck_command(tolerance, probes, seed):
    """Finite-difference check of every parameter group of the shipped tiny model."""

    report = grad_check(tolerance=tolerance, probes=probes, seed=seed)
    click.echo(report.to_text(), nl=False)
    click.echo("all passed" if report.passed else "FAILED")

    return EXIT_OK if report.passed else EXIT_FAILURE

@cli.command("ablate")
@click.option("--train-data", required=True, type=click.Path(exists=True))
@click.option("--test-data", required=True, type=click.Path(exists=True))
@click.option("--grid", type=click.Choice(["placement", "component"]), default="placement",
    show_default=True)
@click.option("--out", "out_csv", default="ablation.csv", show_default=True,
    type=click.Path(dir_okay=False))
@model_options
@train_options
@click.pass_context
def ablate_command(ctx, train_data, test_data, grid, out_csv, **_):
    """Train and evaluate each row of a deformable-placement or component sweep."""

    model_cfg, train_cfg = _configs(ctx)
    rows = PLACEMENT_GRID if grid == "placement" else COMPONENT_GRID

    results = run_ablation(rows, train_cfg, _manifest(train_data), _manifest(test_data),
        model_cfg, out_csv)

    for result in results:
        cells = ["-" if v is None else f"{v:.4f}" for v in result[1:5]]
        click.echo(f"{result.location:<28} " + "  ".join(cells))

    failed = [r.location for r in results if r.error is not None]
    if len(failed) > 0:
        click.echo(f"error: {len(failed)} row(s) failed: {', '.join(failed)}", err=True)
        return EXIT_FAILURE

@cli.command("trace")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True),
    help="Dataset directory or manifest; the sample at --index is traced.")
@click.option("--index", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--layer", help="Conv stage to trace from (e.g. conv5); last conv by default.")
@click.option("--unit", help="Output unit c,h,w; the centre of channel 0 by default.")
@click.option("--levels", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--out", "out_csv", type=click.Path(dir_okay=False),
    help="CSV destination (layer,tap,row,col); stdout when omitted.")
def trace_command(checkpoint, data, index, layer, unit, levels, out_csv):
    """Export the input-space sampling points of one output unit."""

    model = load(checkpoint)
    samples = load_dataset(_manifest(data), model.config.input_size, model.config.charset,
        model.config.input_channels, model.config.dtype)

    for position, (image, _, _) in enumerate(samples):
        if position == index:
            break
    else:
        raise click.BadParameter(f"--index {index} is beyond the dataset.")

    model.forward(Tensor(image.data[None]), "eval")
    names, stack = model.trace_stack()
    convs = [name for name, stage in zip(names, stack) if isinstance(stage, ConvLayer)]

    layer = layer or convs[-1]
    if layer not in convs:
        raise click.BadParameter(f"--layer must be one of {', '.join(convs)}.")
    stage = stack[names.index(layer)]

    if unit is None:
        _, _, height, width = stage.last_output_shape
        channel, row, col = 0, height // 2, width // 2
    else:
        try:
            channel, row, col = parse_int_list(unit)
        except ValueError:
            raise click.BadParameter("--unit must be three integers c,h,w.")

    points = trace_sampling_locations(stack, (names.index(layer), channel, row, col), levels)

    with (open(out_csv, 'w', newline="") if out_csv else nullcontext(sys.stdout)) as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "tap", "row", "col"])
        for point in points:
            writer.writerow([names[point.layer], point.tap, f"{point.row:.4f}", f"{point.col:.4f}"])

@cli.command("ctc-oracle")
@click.option("--instances", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--tolerance", type=float, default=1e-10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
def ctc_oracle_command(instances, tolerance, seed):
    """Compare CTC loss with brute-force path enumeration on random small instances."""

    rng = np.random.default_rng(seed)
    worst = 0.0

    for _ in range(instances):
        frames = int(rng.integers(1, 9))
        classes = int(rng.integers(1, 5))
        length = int(rng.integers(0, min(4, frames) + 1))

        label = LabelSequence(tuple(rng.integers(1, classes + 1, length)))
        while label.min_frames() > frames:
            label = LabelSequence(label.indices[:-1])

        logits = Tensor(rng.normal(0.0, 1.0, (frames, classes + 1)))
        worst = max(worst, abs(ctc_loss(logits, label).item() - ctc_brute_force(logits, label)))

    click.echo(f"{instances} instances, max |difference| {worst:.3e}")
    return EXIT_OK if worst <= tolerance else EXIT_FAILURE

# == ENTRY ======================================================================================= #

def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs the CLI and maps outcomes to exit codes: 0 ok, 1 usage error, 2 runtime failure."""

    try:
        result = cli.main(args=list(argv) if argv is not None else None,
            prog_name="deformtext", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ConfigError as e:
        click.echo(f"error: {' '.join(str(e).splitlines())}", err=True)
        return EXIT_USAGE
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        message = ' '.join(str(e).splitlines()) or type(e).__name__
        click.echo(f"error: {message}", err=True)
        return EXIT_FAILURE

    return result if isinstance(result, int) else EXIT_OK
