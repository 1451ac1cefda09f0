#!/usr/bin/env python

"""Command-line interface tests."""

from unittest import TestCase, main

import csv
import io
import os
import tempfile

from contextlib import redirect_stderr, redirect_stdout

import click

from click.testing import CliRunner

from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, cli, main as cli_main, parse_config
from model import ModelConfig
from settings import ConfigError
from train_eval import TrainConfig

# == HELPERS ===================================================================================== #

TINY_SETTINGS = "\n".join((
    "input_size = 32x16",
    "conv_widths = 4,6",
    "hidden = 8",
    "dtype = float64",
    ""
))

def run(*argv: str) -> int:
    """Runs the entry point quietly and returns its exit code."""

    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        return cli_main(["-q", *argv])

# == TEST CASE =================================================================================== #

class ParseConfigTestCase(TestCase):
    """Test cases for parse_config."""

    def setUp(self) -> None:
        super().setUp()
        self.folder = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        super().tearDown()
        self.folder.cleanup()

    def settings_file(self, text: str) -> str:
        path = os.path.join(self.folder.name, "run.cfg")
        with open(path, 'w', encoding="utf-8") as f:
            f.write(text)
        return path

    def test_defaults(self):
        """Tests that no file and an empty file both give the defaults."""

        self.assertEqual(parse_config(), (ModelConfig(), TrainConfig()))
        self.assertEqual(parse_config(self.settings_file("")), (ModelConfig(), TrainConfig()))

    def test_precedence(self):
        """Tests that overrides beat the file and the file beats the defaults."""

        path = self.settings_file("hidden = 16\nlearning_rate = 0.01\nseed = 4\n")

        model_cfg, train_cfg = parse_config(path, { "hidden": 32 })
        self.assertEqual(model_cfg.hidden, 32)
        self.assertEqual(train_cfg.learning_rate, 0.01)
        self.assertEqual(model_cfg.seed, 4)
        self.assertEqual(train_cfg.seed, 4)

        model_cfg, train_cfg = parse_config(path, { "seed": 9 })
        self.assertEqual((model_cfg.seed, train_cfg.seed), (9, 9))
        self.assertEqual(model_cfg.hidden, 16)

    def test_errors(self):
        """Tests unknown keys and invalid values."""

        self.assertRaises(ConfigError, parse_config, self.settings_file("layers = 3\n"))
        self.assertRaises(ConfigError, parse_config, self.settings_file("hidden = -1\n"))
        self.assertRaises(ConfigError, parse_config, None, { "depth": 2 })
        self.assertRaises(ConfigError, parse_config, os.path.join(self.folder.name, "missing"))

class CommandTestCase(TestCase):
    """Test cases for the commands and their exit codes."""

    def setUp(self) -> None:
        super().setUp()

        self.folder = tempfile.TemporaryDirectory()
        self.config_file = self.path("tiny.cfg")
        with open(self.config_file, 'w', encoding="utf-8") as f:
            f.write(TINY_SETTINGS)

    def tearDown(self) -> None:
        super().tearDown()
        self.folder.cleanup()

    def path(self, *parts: str) -> str:
        return os.path.join(self.folder.name, *parts)

    def generate(self, name: str = "data", seed: int = 0) -> str:
        code = run("gen-data", "--out", self.path(name), "--regular", "3", "--curved", "2",
            "--tilted", "1", "--max-length", "3", "--seed", str(seed))
        self.assertEqual(code, EXIT_OK)
        return self.path(name)

    def train(self, data: str) -> str:
        code = run("train", "--data", data, "--out", self.path("run"), "--config",
            self.config_file, "--steps", "2", "--batch-size", "4", "--lr", "0.01")
        self.assertEqual(code, EXIT_OK)
        return self.path("run", "final.ckpt")

    def test_help(self):
        """Tests that every command prints its help, listing each of its flags."""

        runner = CliRunner()
        for command in ("gen-data", "train", "eval", "gradcheck", "ablate", "trace", "ctc-oracle"):
            result = runner.invoke(cli, [command, "--help"])
            self.assertEqual(result.exit_code, 0, command)
            self.assertIn("Usage:", result.output)

            for param in cli.commands[command].params:
                if isinstance(param, click.Option):
                    for flag in param.opts + param.secondary_opts:
                        self.assertIn(flag, result.output, f"{command} {flag}")

        result = runner.invoke(cli, ["--help"])
        self.assertEqual(result.exit_code, 0)
        for name in [*cli.commands, "--verbose", "--quiet"]:
            self.assertIn(name, result.output)
        self.assertEqual(run("--help"), EXIT_OK)

    def test_usage_errors(self):
        """Tests that bad flags exit with the usage code."""

        self.assertEqual(run("train", "--bogus"), EXIT_USAGE)
        self.assertEqual(run("nope"), EXIT_USAGE)

        data = self.generate()
        self.assertEqual(run("train", "--data", data, "--deform", "2,5"), EXIT_USAGE)
        self.assertEqual(run("train", "--data", data, "--input", "200"), EXIT_USAGE)
        self.assertEqual(run("gen-data", "--out", self.path("x"), "--min-length", "5",
            "--max-length", "2"), EXIT_USAGE)
        self.assertEqual(run("eval", "--checkpoint", self.path("missing.ckpt"), "--data", data),
            EXIT_USAGE)

    def test_gen_data(self):
        """Tests dataset generation through the command line."""

        code = run("gen-data", "--out", self.path("data"), "--regular", "10", "--curved", "10",
            "--tilted", "10")

        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(os.listdir(self.path("data", "images"))), 30)
        self.assertTrue(os.path.exists(self.path("data", "manifest.tsv")))

    def test_train_eval_trace(self):
        """Tests training, evaluating, and tracing a tiny model."""

        data = self.generate()
        checkpoint = self.train(data)

        self.assertTrue(os.path.exists(checkpoint))
        self.assertTrue(os.path.exists(self.path("run", "loss.csv")))

        runner = CliRunner()
        result = runner.invoke(cli, ["eval", "--checkpoint", checkpoint, "--data", data,
            "--compare", checkpoint, "--report-csv", self.path("report.csv")])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("accuracy", result.output)
        self.assertIn("compared with", result.output)
        self.assertTrue(os.path.exists(self.path("report.csv")))

        code = run("trace", "--checkpoint", checkpoint, "--data", data, "--out",
            self.path("trace.csv"))
        self.assertEqual(code, EXIT_OK)

        with open(self.path("trace.csv"), newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["layer", "tap", "row", "col"])
        self.assertEqual(len(rows), 1 + 9 + 9 * 9)
        self.assertEqual(rows[1][0], "conv2")
        self.assertEqual({ row[0] for row in rows[1:] }, { "conv1", "conv2" })

        self.assertEqual(run("trace", "--checkpoint", checkpoint, "--data", data, "--index",
            "100"), EXIT_USAGE)
        self.assertEqual(run("trace", "--checkpoint", checkpoint, "--data", data, "--layer",
            "conv9"), EXIT_USAGE)

    def test_trace_layer_must_be_conv(self):
        """Tests that tracing from a pooling stage is a usage error."""

        data = self.generate()
        checkpoint = self.train(data)

        self.assertEqual(run("trace", "--checkpoint", checkpoint, "--data", data, "--layer",
            "pool1"), EXIT_USAGE)
        self.assertEqual(run("trace", "--checkpoint", checkpoint, "--data", data, "--layer",
            "conv1", "--out", self.path("trace.csv")), EXIT_OK)

    def test_case_insensitive(self):
        """Tests training and evaluating upper-case labels against a lower-case charset."""

        code = run("gen-data", "--out", self.path("letters"), "--regular", "4", "--charset",
            "ABC", "--max-length", "3", "--seed", "5")
        self.assertEqual(code, EXIT_OK)

        args = ("train", "--data", self.path("letters"), "--out", self.path("run"), "--config",
            self.config_file, "--charset", "abc", "--steps", "1", "--batch-size", "4")
        self.assertEqual(run(*args, "--case-sensitive"), EXIT_FAILURE)
        self.assertEqual(run(*args, "--case-insensitive"), EXIT_OK)

        checkpoint = self.path("run", "final.ckpt")
        self.assertEqual(run("eval", "--checkpoint", checkpoint, "--data", self.path("letters"),
            "--case-insensitive"), EXIT_OK)
        self.assertEqual(run("eval", "--checkpoint", checkpoint, "--data", self.path("letters")),
            EXIT_FAILURE)

    def test_corrupt_checkpoint(self):
        """Tests that an unreadable checkpoint is a runtime failure."""

        data = self.generate()
        checkpoint = self.path("broken.ckpt")
        with open(checkpoint, 'wb') as f:
            f.write(b"DFCR\x01")

        self.assertEqual(run("eval", "--checkpoint", checkpoint, "--data", data), EXIT_FAILURE)

    def test_verification(self):
        """Tests the gradient check and CTC oracle commands."""

        self.assertEqual(run("ctc-oracle", "--instances", "25", "--seed", "3"), EXIT_OK)
        self.assertEqual(run("ctc-oracle", "--instances", "5", "--tolerance", "-1"), EXIT_FAILURE)
        self.assertEqual(run("gradcheck"), EXIT_OK)

    def test_ablate(self):
        """Tests a component sweep on a tiny dataset."""

        train_data = self.generate("train", 1)
        test_data = self.generate("test", 2)
        out_csv = self.path("ablation.csv")

        code = run("ablate", "--train-data", train_data, "--test-data", test_data, "--grid",
            "component", "--input", "32x16", "--hidden", "2", "--widths", "2,2,2,2,2", "--steps",
            "1", "--batch-size", "6", "--out", out_csv)

        with open(out_csv, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        self.assertEqual(len(rows), 7)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(rows[1][0], "baseline")
        self.assertTrue(all(row[4] != "" for row in rows[1:]))

if __name__ == "__main__":
    main()
