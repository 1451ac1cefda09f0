"""SGD training, evaluation, gradient checking, and ablation sweeps."""

# == IMPORTS ===================================================================================== #

import csv
import logging
import math
import os

from dataclasses import dataclass, field, replace
from typing import *

import numpy as np

from tqdm import tqdm

from ctc import Charset, CharsetError, LabelSequence, batch_ctc_loss, greedy_decode
from data_synth import Distortion, load_dataset
from model import LARGE_INPUT, Model, ModelConfig, build, gradcheck_config, save
from settings import ConfigError, parse_bool, parse_float, parse_int
from tensor_core import (
    Array, GradTape, ShapeError, Tensor, numeric_gradient, resolve_dtype
)

# == GLOBALS ===================================================================================== #

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 0.00005

LOSS_CURVE_NAME = "loss.csv"
FINAL_CHECKPOINT_NAME = "final.ckpt"

EVAL_BATCH_SIZE = 32

Sample = Tuple[Tensor, LabelSequence, str]

# == CONFIGURATION =============================================================================== #

@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    Parameters
    ==========
    learning_rate: `float` = `0.00005`

    batch_size: `int` = `16`
        Toy-scale default; the full-scale setting is 64.

    epochs: `int` = `1`

    steps: `int` = `0`
        Stop after this many steps when positive, looping over epochs as needed.

    seed: `int` = `0`
        Seeds the batch order.

    momentum: `float` = `0.0`

    grad_clip: `float` = `5.0`
        Global L2 norm threshold; 0 disables clipping.

    eval_every: `int` = `0`
        Evaluate on the held-out set every this many steps; 0 disables.

    log_every: `int` = `50`

    case_insensitive: `bool` = `False`
        Fold labels and predictions to lower case.
    """

    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = 16
    epochs: int = 1
    steps: int = 0
    seed: int = 0
    momentum: float = 0.0
    grad_clip: float = 5.0
    eval_every: int = 0
    log_every: int = 50
    case_insensitive: bool = False

    def validate(self) -> "TrainConfig":
        errors = []

        if not self.learning_rate > 0:
            errors.append(f"learning_rate must be positive; got {self.learning_rate}.")
        if self.batch_size < 1:
            errors.append(f"batch_size must be at least 1; got {self.batch_size}.")
        if self.epochs < 0 or self.steps < 0:
            errors.append("epochs and steps must be non-negative.")
        if not 0 <= self.momentum < 1:
            errors.append(f"momentum must be in [0, 1); got {self.momentum}.")
        if self.grad_clip < 0:
            errors.append(f"grad_clip must be non-negative; got {self.grad_clip}.")
        if self.eval_every < 0 or self.log_every < 0:
            errors.append("eval_every and log_every must be non-negative.")

        if len(errors) > 0:
            raise ConfigError('\n'.join(errors))

        return self

    @classmethod
    def from_settings(cls,
        settings: Mapping[str, str],
        base: Optional["TrainConfig"] = None
    ) -> "TrainConfig":
        parsers = {
            "learning_rate": parse_float,
            "batch_size": parse_int,
            "epochs": parse_int,
            "steps": parse_int,
            "seed": parse_int,
            "momentum": parse_float,
            "grad_clip": parse_float,
            "eval_every": parse_int,
            "log_every": parse_int,
            "case_insensitive": parse_bool
        }

        values = {}
        errors = []

        for key, raw in settings.items():
            if key not in parsers:
                errors.append(f"Unknown training setting '{key}'.")
                continue
            try:
                values[key] = parsers[key](raw)
            except ValueError as e:
                errors.append(f"{key}: {e}")

        if len(errors) > 0:
            raise ConfigError('\n'.join(errors))

        return replace(base if base is not None else cls(), **values).validate()

# == OPTIMIZER =================================================================================== #

class StepStats(NamedTuple):
    """Pre-clip global gradient norm and what the step did."""

    norm: float
    clipped: bool
    skipped: bool

def sgd_step(
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, Array]],
    cfg: TrainConfig,
    velocity: Optional[Dict[str, Array]] = None
) -> StepStats:
    """theta <- theta - lr * g in place, after clipping g to a global L2 norm of `grad_clip`.

    Parameters
    ==========
    grads: `Optional[Mapping[str, Array]]`
        Gradients by parameter name; each tensor's own `grad` buffer when omitted (missing
        buffers count as zero).

    velocity: `Optional[Dict[str, Array]]` = `None`
        Momentum buffers, updated in place (v <- momentum * v + g; theta <- theta - lr * v).
        Required only when `cfg.momentum` is non-zero.

    Returns
    =======
    `StepStats`
        The step is skipped, leaving every parameter untouched, when any gradient is
        non-finite.
    """

    if grads is None:
        grads = {
            name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            for name, tensor in params.items()
        }

    errors = []
    for name, tensor in params.items():
        if name not in grads:
            errors.append(f"No gradient for parameter '{name}'.")
        elif np.shape(grads[name]) != tensor.shape:
            errors.append(
                f"Gradient for '{name}' has shape {list(np.shape(grads[name]))}; parameter "
                f"has {list(tensor.shape)}."
            )

    if len(errors) > 0:
        raise ShapeError('\n'.join(errors))

    squares = sum(float(np.sum(np.square(grads[name], dtype=np.float64))) for name in params)
    norm = math.sqrt(squares) if math.isfinite(squares) else math.inf

    if not math.isfinite(norm):
        bad = [name for name in params if not np.all(np.isfinite(grads[name]))]
        logger.warning("Skipping SGD step: non-finite gradients in %s", ", ".join(bad))
        return StepStats(norm, False, True)

    clipped = cfg.grad_clip > 0 and norm > cfg.grad_clip
    factor = cfg.grad_clip / norm if clipped else 1.0

    for name, tensor in params.items():
        g = grads[name] * factor

        if cfg.momentum > 0:
            if velocity is None:
                raise ValueError("Momentum SGD needs a velocity buffer mapping.")
            if name not in velocity:
                velocity[name] = np.zeros_like(tensor.data)
            velocity[name] *= cfg.momentum
            velocity[name] += g
            g = velocity[name]

        tensor.data -= (cfg.learning_rate * g).astype(tensor.dtype)

    return StepStats(norm, clipped, False)

# == TRAINING ==================================================================================== #

@dataclass
class TrainResult:
    """Loss curve (one mean batch loss per update) and where the checkpoints went.

    `steps[i]` is the training step `losses[i]` was recorded at; skipped steps leave gaps.
    """

    losses: List[float] = field(default_factory=list)
    steps: List[int] = field(default_factory=list)
    skipped_samples: int = 0
    skipped_steps: int = 0
    checkpoint: Optional[str] = None
    evaluations: List[Tuple[int, "EvalReport"]] = field(default_factory=list)

def _unpack(sample: Sequence) -> Sample:
    image, label = sample[0], sample[1]
    tag = sample[2] if len(sample) > 2 else Distortion.REGULAR.value
    return image, label, tag

def _batch_images(images: Sequence[Tensor], dtype: np.dtype) -> Tensor:
    return Tensor(np.stack([image.data for image in images]).astype(dtype))

def _check_labels(model: Model, dataset: Sequence[Sample]) -> None:
    classes = len(model.config.charset)
    outside = sorted({ i for _, label, _ in dataset for i in label.indices if i > classes })
    if len(outside) > 0:
        raise CharsetError(
            f"Dataset labels use class indices {outside} beyond the model's {classes} symbols."
        )

def batch_loss(model: Model, images: Tensor, labels: Sequence[LabelSequence],
    mode: str = "train"
):
    """Forward pass and mean CTC loss of one batch."""

    return batch_ctc_loss(model.forward(images, mode), labels)

def train(
    model: Model,
    dataset: Sequence[Sequence],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    eval_set: Optional[Sequence[Sequence]] = None,
    progress: bool = False
) -> TrainResult:
    """Mini-batch SGD on mean CTC loss.

    Batches are drawn in a seeded permutation per epoch. Samples whose label cannot be aligned
    are skipped and counted. With `out_dir`, writes `loss.csv`, `epoch-<n>.ckpt` after each
    epoch, and `final.ckpt`.
    """

    cfg.validate()
    model.label_charset(cfg.case_insensitive)
    dataset = [_unpack(sample) for sample in dataset]
    _check_labels(model, dataset)

    result = TrainResult()
    if len(dataset) == 0:
        logger.warning("Training set is empty; nothing to do")
        return result

    dtype = resolve_dtype(model.config.dtype)
    rng = np.random.default_rng(cfg.seed)
    velocity: Dict[str, Array] = {}

    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.steps if cfg.steps > 0 else cfg.epochs * per_epoch

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    bar = tqdm(total=total, desc="train", unit="step", disable=not progress)
    step = 0
    epoch = 0

    while step < total:
        epoch += 1
        order = rng.permutation(len(dataset))

        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break

            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            images = _batch_images([image for image, _, _ in batch], dtype)
            labels = [label for _, label, _ in batch]

            model.zero_grad()
            with GradTape() as tape:
                outcome = batch_loss(model, images, labels)

            step += 1
            bar.update(1)

            if len(outcome.skipped) > 0:
                result.skipped_samples += len(outcome.skipped)
                logger.warning(
                    "Step %d: skipped %d sample(s) whose labels do not fit %d frames",
                    step, len(outcome.skipped), model.config.frames
                )

            if outcome.loss is None:
                result.skipped_steps += 1
                continue

            tape.backward(outcome.loss)
            stats = sgd_step(model.parameters(), None, cfg, velocity)

            if stats.skipped:
                result.skipped_steps += 1
                continue

            loss = outcome.loss.item()
            result.losses.append(loss)
            result.steps.append(step)
            model.step += 1
            bar.set_postfix(loss=f"{loss:.4f}")

            if cfg.log_every > 0 and step % cfg.log_every == 0:
                logger.info(
                    "step %d loss %.5f grad-norm %.3f%s skipped %d",
                    step, loss, stats.norm, " (clipped)" if stats.clipped else "",
                    result.skipped_samples
                )

            if eval_set is not None and cfg.eval_every > 0 and step % cfg.eval_every == 0:
                report = evaluate(model, eval_set, cfg.case_insensitive)
                result.evaluations.append((step, report))
                logger.info("step %d eval accuracy %.4f", step, report.accuracy)

        if out_dir is not None:
            path = os.path.join(out_dir, f"epoch-{epoch}.ckpt")
            save(model, path)
            logger.info("Epoch %d checkpoint: %s", epoch, path)

    bar.close()

    if out_dir is not None:
        result.checkpoint = os.path.join(out_dir, FINAL_CHECKPOINT_NAME)
        save(model, result.checkpoint)
        write_loss_curve(os.path.join(out_dir, LOSS_CURVE_NAME), result.steps, result.losses)
        logger.info("Final checkpoint: %s", result.checkpoint)

    return result

def write_loss_curve(curve_file: str, steps: Sequence[int], losses: Sequence[float]) -> None:
    with open(curve_file, 'w', newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in zip(steps, losses):
            writer.writerow([step, repr(float(loss))])

# == EVALUATION ================================================================================== #

def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance."""

    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (x != y)))
        previous = current

    return previous[-1]

def normalized_edit_distance(prediction: str, label: str) -> float:
    longest = max(len(prediction), len(label))
    return edit_distance(prediction, label) / longest if longest > 0 else 0.0

class Prediction(NamedTuple):
    index: int
    label: str
    prediction: str
    tag: str
    correct: bool
    distance: float

class TagStats(NamedTuple):
    count: int
    accuracy: float
    edit_distance: float

@dataclass
class EvalReport:
    """Sequence accuracy and mean normalized edit distance, overall and per distortion tag."""

    accuracy: float = 0.0
    edit_distance: float = 0.0
    breakdown: Dict[str, TagStats] = field(default_factory=dict)
    predictions: List[Prediction] = field(default_factory=list)

    def to_text(self, examples: int = 10) -> str:
        lines = [
            f"samples        {len(self.predictions)}",
            f"accuracy       {self.accuracy:.4f}",
            f"edit distance  {self.edit_distance:.4f}"
        ]
        for tag, stats in self.breakdown.items():
            lines.append(
                f"  {tag:<12} n={stats.count:<6} accuracy {stats.accuracy:.4f}  "
                f"edit distance {stats.edit_distance:.4f}"
            )

        wrong = [p for p in self.predictions if not p.correct][:examples]
        if len(wrong) > 0:
            lines.append("errors:")
            lines += [f"  #{p.index} [{p.tag}] '{p.label}' -> '{p.prediction}'" for p in wrong]

        return "\n".join(lines) + "\n"

    def write_csv(self, report_file: str) -> None:
        with open(report_file, 'w', newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "tag", "label", "prediction", "correct", "distance"])
            for p in self.predictions:
                writer.writerow([p.index, p.tag, p.label, p.prediction, int(p.correct), p.distance])

def _summarize(predictions: Sequence[Prediction]) -> Tuple[float, float]:
    if len(predictions) == 0:
        return 0.0, 0.0

    return (
        sum(p.correct for p in predictions) / len(predictions),
        sum(p.distance for p in predictions) / len(predictions)
    )

def report_from_pairs(
    pairs: Sequence[Tuple[str, str, str]],
    case_insensitive: bool = False
) -> EvalReport:
    """Builds a report from `(label, prediction, tag)` triples."""

    predictions = []
    for index, (label, prediction, tag) in enumerate(pairs):
        if case_insensitive:
            label, prediction = label.lower(), prediction.lower()
        predictions.append(Prediction(
            index, label, prediction, tag,
            label == prediction, normalized_edit_distance(prediction, label)
        ))

    accuracy, distance = _summarize(predictions)
    breakdown = {}
    for tag in dict.fromkeys(p.tag for p in predictions):
        group = [p for p in predictions if p.tag == tag]
        breakdown[tag] = TagStats(len(group), *_summarize(group))

    return EvalReport(accuracy, distance, breakdown, predictions)

def predict(
    model: Model,
    images: Sequence[Tensor],
    mode: str = "eval",
    charset: Optional[Charset] = None
) -> List[str]:
    """Greedy transcriptions of `images`, in batches, decoded with `charset` or the model's."""

    charset = charset or model.charset
    dtype = resolve_dtype(model.config.dtype)
    texts = []

    for start in range(0, len(images), EVAL_BATCH_SIZE):
        batch = _batch_images(images[start:start + EVAL_BATCH_SIZE], dtype)
        texts += [charset.decode(greedy_decode(logits)) for logits in model.forward(batch, mode)]

    return texts

def evaluate(
    model: Model,
    dataset: Sequence[Sequence],
    case_insensitive: bool = False
) -> EvalReport:
    """Greedy-decodes every sample and scores it against its label, grouped by tag."""

    dataset = [_unpack(sample) for sample in dataset]
    charset = model.label_charset(case_insensitive)
    texts = predict(model, [image for image, _, _ in dataset], charset=charset)

    return report_from_pairs(
        [(charset.decode(label), text, tag) for (_, label, tag), text in zip(dataset, texts)],
        case_insensitive
    )

class Comparison(NamedTuple):
    index: int
    label: str
    tag: str
    prediction_a: str
    prediction_b: str
    correct_a: bool
    correct_b: bool

def compare_predictions(report_a: EvalReport, report_b: EvalReport) -> List[Comparison]:
    """Samples on which two reports over the same dataset predict differently."""

    if len(report_a.predictions) != len(report_b.predictions):
        raise ValueError("Reports cover datasets of different sizes.")

    return [
        Comparison(a.index, a.label, a.tag, a.prediction, b.prediction, a.correct, b.correct)
        for a, b in zip(report_a.predictions, report_b.predictions)
        if a.prediction != b.prediction
    ]

# == GRADIENT CHECK ============================================================================== #

class GradCheckEntry(NamedTuple):
    name: str
    error: float
    passed: bool

@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    def to_text(self) -> str:
        return "".join(
            f"{'PASS' if e.passed else 'FAIL'}  {e.name:<32} rel. err {e.error:.3e}\n"
            for e in self.entries
        )

def default_gradcheck_model() -> Model:
    """The shipped gradient-check network with slightly randomized offset branches.

    Non-zero offsets keep bilinear reads off the integer lattice where their derivative jumps.
    """

    model = build(gradcheck_config())
    rng = np.random.default_rng(1)

    for name, tensor in model.parameters().items():
        if ".offset." in name:
            tensor.data[...] = rng.normal(0.0, 0.05, tensor.shape)

    return model

def ctc_objective(model: Model, seed: int = 0, batch: int = 2) -> Callable[[], Tensor]:
    """A fixed random batch scored by mean CTC loss."""

    rng = np.random.default_rng(seed)
    width, height = model.config.input_size
    dtype = resolve_dtype(model.config.dtype)

    images = Tensor(rng.uniform(-1, 1, (batch, model.config.input_channels, height, width))
        .astype(dtype))
    longest = max(1, min(3, model.config.frames // 2))
    labels = [
        LabelSequence(tuple(rng.integers(1, len(model.config.charset) + 1,
            rng.integers(1, longest + 1))))
        for _ in range(batch)
    ]

    return lambda: batch_loss(model, images, labels).loss

def grad_check(
    model_factory: Callable[[], Any] = default_gradcheck_model,
    tolerance: float = 1e-2,
    objective: Optional[Callable[[Any], Callable[[], Tensor]]] = None,
    probes: int = 4,
    h: float = 1e-6,
    seed: int = 0,
    floor: float = 1e-6
) -> GradCheckReport:
    """Compares tape gradients against central differences for every parameter tensor.

    Parameters
    ==========
    model_factory: `Callable[[], Model]`
        Builds the (float64) model to check. Anything with a `parameters()` mapping works when
        `objective` is given.

    tolerance: `float` = `1e-2`
        Largest accepted error per parameter tensor, measured as
        |a - n| / max(|a|, |n|) over the probed entries taken as vectors.

    objective: `Optional[Callable[[model], Callable[[], Tensor]]]`
        Makes the scalar loss closure; `ctc_objective` when omitted.

    probes: `int` = `4`
        Randomly chosen entries probed per tensor (all entries of smaller tensors).

    floor: `float` = `1e-6`
        Smallest gradient norm used as the denominator. Tensors whose true gradient vanishes
        (a bias feeding batch norm) only see rounding noise in the numeric estimate.
    """

    model = model_factory()
    params = model.parameters()
    report = GradCheckReport()

    if len(params) == 0:
        return report

    loss_fn = (objective or ctc_objective)(model)
    rng = np.random.default_rng(seed)

    for tensor in params.values():
        tensor.zero_grad()

    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    def value() -> float:
        return float(loss_fn().item())

    for name, tensor in params.items():
        flat = rng.permutation(tensor.size)[:probes]
        indices = [np.unravel_index(i, tensor.shape) for i in sorted(flat)]

        numeric = numeric_gradient(value, tensor, h, indices)
        analytic = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)

        a = np.array([analytic[i] for i in indices])
        n = np.array([numeric[i] for i in indices])
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        error = float(np.linalg.norm(a - n) / scale)

        report.entries.append(GradCheckEntry(name, error, error < tolerance))
        logger.debug("gradcheck %s: %.3e", name, error)

    return report

# == ABLATIONS =================================================================================== #

class AblationRow(NamedTuple):
    """One configuration of a sweep: a label and the ModelConfig fields it changes."""

    location: str
    changes: Dict[str, Any]

PLACEMENT_GRID = [
    AblationRow("{" + ",".join(str(i) for i in sorted(placement)) + "}", {
        "deformable_set": frozenset(placement),
        "use_residual": True,
        "input_size": LARGE_INPUT
    })
    for placement in ({3}, {4}, {5}, {3, 4}, {4, 5}, {3, 5}, {3, 4, 5})
]

COMPONENT_GRID = [
    AblationRow("baseline", {}),
    AblationRow("DConv", { "deformable_set": frozenset({ 4, 5 }) }),
    AblationRow("ResBlock", { "use_residual": True }),
    AblationRow("Larger Size", { "input_size": LARGE_INPUT }),
    AblationRow("DConv+ResBlock", { "deformable_set": frozenset({ 4, 5 }), "use_residual": True }),
    AblationRow("DConv+ResBlock+Larger Size", {
        "deformable_set": frozenset({ 4, 5 }),
        "use_residual": True,
        "input_size": LARGE_INPUT
    })
]

ABLATION_COLUMNS = ["location", "regular", "curved", "tilted", "overall"]

class AblationResult(NamedTuple):
    location: str
    regular: Optional[float]
    curved: Optional[float]
    tilted: Optional[float]
    overall: Optional[float]
    error: Optional[str] = None

def run_ablation(
    grid: Sequence[AblationRow],
    base_train: TrainConfig,
    train_manifest: str,
    test_manifest: str,
    base_model: Optional[ModelConfig] = None,
    out_csv: Optional[str] = None
) -> List[AblationResult]:
    """Trains and evaluates one model per grid row on the same datasets and seed.

    A failing row is logged with its traceback and recorded with empty accuracies; the
    remaining rows still run.
    """

    base_model = base_model or ModelConfig()
    cache: Dict[Tuple, Tuple[list, list]] = {}
    results = []

    for row in grid:
        try:
            config = replace(base_model, **row.changes).validate()
            key = (config.input_size, config.input_channels, config.charset, config.dtype)

            if key not in cache:
                cache[key] = tuple(
                    list(load_dataset(path, config.input_size, config.charset,
                        config.input_channels, config.dtype, base_train.case_insensitive))
                    for path in (train_manifest, test_manifest)
                )
            train_set, test_set = cache[key]

            model = build(config)
            train(model, train_set, base_train)
            report = evaluate(model, test_set, base_train.case_insensitive)

            def tag_accuracy(tag: Distortion) -> Optional[float]:
                stats = report.breakdown.get(tag.value)
                return stats.accuracy if stats is not None else None

            result = AblationResult(
                row.location,
                tag_accuracy(Distortion.REGULAR),
                tag_accuracy(Distortion.CURVED),
                tag_accuracy(Distortion.TILTED),
                report.accuracy
            )
            logger.info("Ablation %s: overall %.4f", row.location, report.accuracy)
        except Exception as e:
            logger.exception("Ablation row %s failed", row.location)
            error = f"{type(e).__name__}: {e}"
            result = AblationResult(row.location, None, None, None, None, error)

        results.append(result)

    if out_csv is not None:
        write_ablation_csv(out_csv, results)

    return results

def write_ablation_csv(table_file: str, results: Sequence[AblationResult]) -> None:
    with open(table_file, 'w', newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_COLUMNS)
        for result in results:
            writer.writerow([
                result.location,
                *("" if v is None else f"{v:.4f}" for v in result[1:5])
            ])
