#!/usr/bin/env python

"""Training, evaluation, gradient check, and ablation tests."""

from unittest import TestCase, main

import csv
import os
import tempfile

import numpy as np

from ctc import DIGITS, CharsetError, LabelSequence
from data_synth import generate_dataset
from model import build, load, tiny_config
from settings import ConfigError
from tensor_core import ShapeError, Tensor, make_output, sum_all
from train_eval import (
    COMPONENT_GRID, LOSS_CURVE_NAME, PLACEMENT_GRID, AblationRow, TrainConfig, batch_loss,
    compare_predictions, edit_distance, evaluate, grad_check, normalized_edit_distance, predict,
    report_from_pairs, run_ablation, sgd_step, train
)

# == HELPERS ===================================================================================== #

def parameter(*values: float) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)

def random_dataset(count: int, seed: int = 0, longest: int = 3, tags=("regular", "curved")):
    """Random 32x16 images with short digit labels."""

    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        image = Tensor(rng.uniform(-1, 1, (1, 16, 32)))
        length = int(rng.integers(1, longest + 1))
        label = LabelSequence(tuple(int(v) for v in rng.integers(1, 11, length)))
        samples.append((image, label, tags[i % len(tags)]))

    return samples

class SquareModel:
    """A one-tensor model whose squaring operator has a corrupted backward pass."""

    def __init__(self):
        self.x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)

    def parameters(self):
        return { "x": self.x }

def bad_square_objective(model: SquareModel):
    x = model.x
    wrong = lambda up: (up[0] * x.data,)
    return lambda: sum_all(make_output("bad_square", x.data ** 2, (x,), wrong))

# == TEST CASE =================================================================================== #

class SgdTestCase(TestCase):
    """Test cases for sgd_step."""

    def test_plain_step(self):
        """Tests a single unclipped update."""

        theta = parameter(1.0)
        stats = sgd_step({ "w": theta }, { "w": np.array([2.0]) },
            TrainConfig(learning_rate=0.1, grad_clip=0.0)
        )

        self.assertAlmostEqual(theta.data[0], 0.8, places=12)
        self.assertAlmostEqual(stats.norm, 2.0)
        self.assertFalse(stats.clipped)
        self.assertFalse(stats.skipped)

        sgd_step({ "w": theta }, { "w": np.array([0.0]) }, TrainConfig(learning_rate=0.1))
        self.assertAlmostEqual(theta.data[0], 0.8, places=12)

    def test_clipping(self):
        """Tests that the global norm is clipped before the update."""

        theta = parameter(0.0, 0.0)
        stats = sgd_step({ "w": theta }, { "w": np.array([6.0, 8.0]) },
            TrainConfig(learning_rate=1.0, grad_clip=5.0)
        )

        np.testing.assert_allclose(theta.data, [-3.0, -4.0], rtol=1e-12)
        self.assertAlmostEqual(stats.norm, 10.0)
        self.assertTrue(stats.clipped)

    def test_tape_gradients(self):
        """Tests that tensor gradient buffers are used when no mapping is given."""

        a, b = parameter(1.0), parameter(2.0)
        a.grad = np.array([1.0])

        sgd_step({ "a": a, "b": b }, None, TrainConfig(learning_rate=0.5, grad_clip=0.0))
        self.assertAlmostEqual(a.data[0], 0.5)
        self.assertAlmostEqual(b.data[0], 2.0)

    def test_non_finite(self):
        """Tests that a non-finite gradient skips the whole step."""

        a, b = parameter(1.0), parameter(2.0)
        stats = sgd_step({ "a": a, "b": b }, { "a": np.array([1.0]), "b": np.array([np.nan]) },
            TrainConfig(learning_rate=0.1)
        )

        self.assertTrue(stats.skipped)
        self.assertEqual(a.data[0], 1.0)
        self.assertEqual(b.data[0], 2.0)

    def test_errors(self):
        """Tests gradient shape validation."""

        theta = parameter(1.0, 2.0)
        self.assertRaises(ShapeError, sgd_step, { "w": theta }, { "w": np.zeros(3) }, TrainConfig())
        self.assertRaises(ShapeError, sgd_step, { "w": theta }, {}, TrainConfig())
        np.testing.assert_array_equal(theta.data, [1.0, 2.0])

    def test_momentum(self):
        """Tests momentum buffers across two steps."""

        theta = parameter(1.0)
        cfg = TrainConfig(learning_rate=0.1, momentum=0.5, grad_clip=0.0)
        velocity = {}

        sgd_step({ "w": theta }, { "w": np.array([1.0]) }, cfg, velocity)
        self.assertAlmostEqual(theta.data[0], 0.9, places=12)
        sgd_step({ "w": theta }, { "w": np.array([1.0]) }, cfg, velocity)
        self.assertAlmostEqual(theta.data[0], 0.75, places=12)

        self.assertRaises(ValueError, sgd_step, { "w": theta }, { "w": np.array([1.0]) }, cfg)

class TrainConfigTestCase(TestCase):
    """Test cases for TrainConfig."""

    def test_from_settings(self):
        """Tests parsing, overrides, and validation."""

        cfg = TrainConfig.from_settings({ "learning_rate": "0.01", "case_insensitive": "yes" })
        self.assertEqual(cfg.learning_rate, 0.01)
        self.assertTrue(cfg.case_insensitive)
        self.assertEqual(cfg.batch_size, 16)

        base = TrainConfig(batch_size=64)
        self.assertEqual(TrainConfig.from_settings({}, base).batch_size, 64)

        self.assertRaises(ConfigError, TrainConfig.from_settings, { "lr": "0.1" })
        self.assertRaises(ConfigError, TrainConfig.from_settings, { "batch_size": "0" })
        self.assertRaises(ConfigError, TrainConfig.from_settings, { "momentum": "fast" })
        self.assertRaises(ConfigError, TrainConfig(learning_rate=0.0).validate)

class TrainTestCase(TestCase):
    """Test cases for the train function."""

    def setUp(self) -> None:
        super().setUp()
        self.folder = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        super().tearDown()
        self.folder.cleanup()

    def test_first_loss(self):
        """Tests that the first recorded loss is the loss of the first seeded batch."""

        dataset = random_dataset(6)
        cfg = TrainConfig(learning_rate=0.01, batch_size=4, steps=1, seed=3)

        result = train(build(tiny_config()), dataset, cfg)

        order = np.random.default_rng(3).permutation(6)[:4]
        images = Tensor(np.stack([dataset[i][0].data for i in order]))
        expected = batch_loss(build(tiny_config()), images, [dataset[i][1] for i in order])

        self.assertEqual(len(result.losses), 1)
        self.assertAlmostEqual(result.losses[0], expected.loss.item(), places=10)

    def test_deterministic(self):
        """Tests that one seed gives one loss curve."""

        dataset = random_dataset(5)
        cfg = TrainConfig(learning_rate=0.01, batch_size=2, epochs=2)

        first = train(build(tiny_config()), dataset, cfg)
        second = train(build(tiny_config()), dataset, cfg)

        self.assertEqual(len(first.losses), 6)
        self.assertEqual(first.losses, second.losses)
        self.assertTrue(all(np.isfinite(first.losses)))

    def test_skipped_samples(self):
        """Tests that labels longer than the frame count are skipped and counted."""

        dataset = random_dataset(3)
        dataset.append((dataset[0][0], LabelSequence(tuple(range(1, 10))), "regular"))
        dataset.append((dataset[1][0], LabelSequence((1, 1, 1, 1, 1)), "regular"))

        result = train(build(tiny_config()), dataset, TrainConfig(batch_size=5, steps=1))
        self.assertEqual(result.skipped_samples, 2)
        self.assertEqual(len(result.losses), 1)

        only_long = dataset[3:4]
        result = train(build(tiny_config()), only_long, TrainConfig(batch_size=1, steps=2))
        self.assertEqual(result.losses, [])
        self.assertEqual(result.skipped_steps, 2)

    def test_outputs(self):
        """Tests the loss curve and checkpoints written to the output folder."""

        out_dir = os.path.join(self.folder.name, "run")
        model = build(tiny_config())
        result = train(model, random_dataset(6), TrainConfig(batch_size=4, epochs=2), out_dir)

        for name in ("epoch-1.ckpt", "epoch-2.ckpt", "final.ckpt", LOSS_CURVE_NAME):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)

        with open(os.path.join(out_dir, LOSS_CURVE_NAME), newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["step", "loss"])
        self.assertEqual(len(rows), len(result.losses) + 1)
        self.assertAlmostEqual(float(rows[1][1]), result.losses[0])

        loaded = load(result.checkpoint)
        self.assertEqual(loaded.step, 4)
        np.testing.assert_array_equal(
            loaded.parameters()["head.W"].data, model.parameters()["head.W"].data
        )

    def test_loss_curve_after_skipped_step(self):
        """Tests that loss.csv numbers each loss by the step it was recorded at."""

        image = random_dataset(1)[0][0]
        dataset = [
            (image, LabelSequence(tuple(range(1, 10))), "regular"),
            (image, LabelSequence((1, 2)), "regular")
        ]
        out_dir = os.path.join(self.folder.name, "run")
        result = train(build(tiny_config()), dataset, TrainConfig(batch_size=1, epochs=2,
            seed=0
        ), out_dir)

        rng = np.random.default_rng(0)
        order = [*rng.permutation(2), *rng.permutation(2)]
        expected = [step for step, i in enumerate(order, start=1) if i == 1]

        self.assertEqual(result.steps, expected)
        self.assertEqual(result.skipped_steps, 2)
        self.assertEqual(len(result.losses), 2)

        with open(os.path.join(out_dir, LOSS_CURVE_NAME), newline="") as f:
            rows = list(csv.reader(f))[1:]
        self.assertEqual([int(step) for step, _ in rows], expected)
        self.assertEqual([float(loss) for _, loss in rows], result.losses)

    def test_periodic_evaluation(self):
        """Tests evaluation on the held-out set every few steps."""

        result = train(build(tiny_config()), random_dataset(4), TrainConfig(batch_size=1, epochs=1,
            eval_every=2
        ), eval_set=random_dataset(3, seed=1))

        self.assertEqual([step for step, _ in result.evaluations], [2, 4])
        self.assertEqual(len(result.evaluations[0][1].predictions), 3)

    def test_errors(self):
        """Tests charset checks and the empty dataset."""

        dataset = random_dataset(2)
        dataset.append((dataset[0][0], LabelSequence((11,)), "regular"))
        self.assertRaises(CharsetError, train, build(tiny_config()), dataset, TrainConfig())

        self.assertEqual(train(build(tiny_config()), [], TrainConfig()).losses, [])
        self.assertRaises(ConfigError, train, build(tiny_config()), [], TrainConfig(batch_size=0))

class EvaluationTestCase(TestCase):
    """Test cases for scoring and evaluation."""

    def test_edit_distance(self):
        """Tests the edit_distance and normalized_edit_distance functions."""

        self.assertEqual(edit_distance("kitten", "sitting"), 3)
        self.assertEqual(edit_distance("", "ab"), 2)
        self.assertAlmostEqual(normalized_edit_distance("abd", "abc"), 1 / 3)
        self.assertEqual(normalized_edit_distance("", "ab"), 1.0)
        self.assertEqual(normalized_edit_distance("", ""), 0.0)

    def test_report(self):
        """Tests overall and per-tag scores."""

        report = report_from_pairs([
            ("123", "123", "regular"),
            ("45", "4", "regular"),
            ("678", "678", "curved"),
            ("9", "", "tilted")
        ])

        self.assertAlmostEqual(report.accuracy, 0.5)
        self.assertAlmostEqual(report.edit_distance, (0 + 0.5 + 0 + 1) / 4)
        self.assertEqual(list(report.breakdown), ["regular", "curved", "tilted"])
        self.assertEqual(report.breakdown["regular"].count, 2)
        self.assertAlmostEqual(report.breakdown["regular"].accuracy, 0.5)
        self.assertEqual(report.breakdown["tilted"].accuracy, 0.0)

        text = report.to_text()
        self.assertIn("accuracy       0.5000", text)
        self.assertIn("'45' -> '4'", text)

        empty = report_from_pairs([])
        self.assertEqual((empty.accuracy, empty.edit_distance), (0.0, 0.0))

    def test_case_insensitive(self):
        """Tests case folding of labels and predictions."""

        pairs = [("Ab", "ab", "regular")]
        self.assertEqual(report_from_pairs(pairs).accuracy, 0.0)
        self.assertEqual(report_from_pairs(pairs, case_insensitive=True).accuracy, 1.0)

    def test_compare(self):
        """Tests the compare_predictions function."""

        a = report_from_pairs([("1", "1", "regular"), ("2", "3", "curved"), ("4", "4", "tilted")])
        b = report_from_pairs([("1", "1", "regular"), ("2", "2", "curved"), ("4", "", "tilted")])

        diff = compare_predictions(a, b)
        self.assertEqual([c.index for c in diff], [1, 2])
        self.assertFalse(diff[0].correct_a)
        self.assertTrue(diff[0].correct_b)
        self.assertEqual(compare_predictions(a, a), [])

        self.assertRaises(ValueError, compare_predictions, a, report_from_pairs([]))

    def test_evaluate(self):
        """Tests that evaluate scores greedy predictions against the labels."""

        model = build(tiny_config())
        dataset = random_dataset(5)
        report = evaluate(model, dataset)
        texts = predict(model, [image for image, _, _ in dataset])

        self.assertEqual(len(report.predictions), 5)
        self.assertEqual([p.prediction for p in report.predictions], texts)
        self.assertEqual(report.predictions[0].label, model.charset.decode(dataset[0][1]))
        self.assertEqual(set(report.breakdown), { "regular", "curved" })
        self.assertTrue(0.0 <= report.accuracy <= 1.0)

        with tempfile.TemporaryDirectory() as folder:
            report_file = os.path.join(folder, "report.csv")
            report.write_csv(report_file)
            with open(report_file, newline="", encoding="utf-8") as f:
                self.assertEqual(len(list(csv.reader(f))), 6)

    def test_evaluate_repeatable(self):
        """Tests that evaluating twice gives the same report and leaves the model unchanged."""

        model = build(tiny_config())
        dataset = random_dataset(6)
        before = { name: tensor.data.copy() for name, tensor in model.parameters().items() }
        buffers = { name: array.copy() for name, array in model.buffers().items() }

        first = evaluate(model, dataset)
        second = evaluate(model, dataset)

        self.assertEqual(first.predictions, second.predictions)
        self.assertEqual(first.breakdown, second.breakdown)
        self.assertEqual((first.accuracy, first.edit_distance),
            (second.accuracy, second.edit_distance))
        for name, tensor in model.parameters().items():
            np.testing.assert_array_equal(tensor.data, before[name], name)
        for name, array in model.buffers().items():
            np.testing.assert_array_equal(array, buffers[name], name)

class GradCheckTestCase(TestCase):
    """Test cases for grad_check."""

    def test_corrupted_backward(self):
        """Tests that a wrong backward pass fails the check."""

        report = grad_check(SquareModel, objective=bad_square_objective)

        self.assertFalse(report.passed)
        self.assertEqual([entry.name for entry in report.entries], ["x"])
        self.assertAlmostEqual(report.entries[0].error, 0.5, places=4)
        self.assertIn("FAIL", report.to_text())

    def test_no_parameters(self):
        """Tests that a model without parameters passes trivially."""

        class Empty:
            def parameters(self):
                return {}

        report = grad_check(Empty)
        self.assertTrue(report.passed)
        self.assertEqual(report.entries, [])

class AblationTestCase(TestCase):
    """Test cases for run_ablation."""

    def setUp(self) -> None:
        super().setUp()

        self.folder = tempfile.TemporaryDirectory()
        self.train_manifest = generate_dataset({ "regular": 4, "curved": 2 }, DIGITS, 1,
            os.path.join(self.folder.name, "train"), lengths=(1, 3)
        ).path
        self.test_manifest = generate_dataset({ "regular": 2, "curved": 2 }, DIGITS, 2,
            os.path.join(self.folder.name, "test"), lengths=(1, 3)
        ).path

    def tearDown(self) -> None:
        super().tearDown()
        self.folder.cleanup()

    def test_grids(self):
        """Tests the shipped sweeps."""

        self.assertEqual(len(PLACEMENT_GRID), 7)
        self.assertEqual(len(COMPONENT_GRID), 6)
        self.assertEqual(PLACEMENT_GRID[-1].location, "{3,4,5}")
        self.assertEqual(COMPONENT_GRID[0].changes, {})

    def test_failing_row(self):
        """Tests that a failing row is recorded and the rest still run."""

        out_csv = os.path.join(self.folder.name, "ablation.csv")
        grid = [AblationRow("bad", { "deformable_set": { 2 } }), AblationRow("ok", {})]

        results = run_ablation(grid, TrainConfig(batch_size=3, steps=2), self.train_manifest,
            self.test_manifest, tiny_config(), out_csv
        )

        self.assertEqual([r.location for r in results], ["bad", "ok"])
        self.assertIsNone(results[0].overall)
        self.assertTrue(results[0].error.startswith("ConfigError"))
        self.assertIsNone(results[1].error)
        self.assertTrue(0.0 <= results[1].overall <= 1.0)
        self.assertIsNotNone(results[1].curved)
        self.assertIsNone(results[1].tilted)

        with open(out_csv, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["location", "regular", "curved", "tilted", "overall"])
        self.assertEqual(rows[1], ["bad", "", "", "", ""])
        self.assertEqual(rows[2][3], "")

    def test_row_order(self):
        """Tests that each row's result does not depend on where it sits in the grid."""

        grid = [
            AblationRow("narrow", { "conv_widths": (2, 2) }),
            AblationRow("wide", { "hidden": 12 }),
            AblationRow("{3}", { "conv_widths": (4, 6, 4), "deformable_set": { 3 } })
        ]
        cfg = TrainConfig(learning_rate=0.01, batch_size=3, steps=2)

        forward = run_ablation(grid, cfg, self.train_manifest, self.test_manifest, tiny_config())
        backward = run_ablation(grid[::-1], cfg, self.train_manifest, self.test_manifest,
            tiny_config()
        )

        self.assertEqual([r.location for r in backward], ["{3}", "wide", "narrow"])
        self.assertEqual([r.error for r in forward], [None] * 3)
        self.assertEqual(
            { r.location: r for r in forward },
            { r.location: r for r in backward }
        )

    def test_empty_grid(self):
        """Tests that an empty sweep writes only the header."""

        out_csv = os.path.join(self.folder.name, "empty.csv")
        self.assertEqual(run_ablation([], TrainConfig(), self.train_manifest, self.test_manifest,
            tiny_config(), out_csv
        ), [])

        with open(out_csv, newline="", encoding="utf-8") as f:
            self.assertEqual(len(list(csv.reader(f))), 1)

if __name__ == "__main__":
    main()
