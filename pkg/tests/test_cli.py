"""Tests for src/cli.py"""

import json
import sys

import pytest

sys.path.insert(0, "src")

from cli import COMMANDS, HANDLERS, build_parser, main, on_off
from config import dump_experiment_config
from detection_data import load_coco_annotations


@pytest.fixture
def config_file(temp_dir, tiny_experiment):
    path = temp_dir / "tiny.yaml"
    dump_experiment_config(tiny_experiment, path)
    return path


class TestParser:
    """Tests for the argument parser."""

    def test_every_command_has_a_handler(self):
        """Test that the subcommand list and the handler table agree."""
        assert set(COMMANDS) == set(HANDLERS)

    def test_on_off(self):
        """Test the on/off flag type."""
        assert on_off("on") is True
        assert on_off("off") is False

    def test_flags(self):
        """Test that common flags are available on every subcommand."""
        args = build_parser().parse_args(
            ["train-teacher", "--seed", "2", "--groups", "4", "--class-guided", "off", "--max-steps", "5"]
        )
        assert (args.command, args.seed, args.groups, args.class_guided, args.max_steps) == (
            "train-teacher",
            2,
            4,
            False,
            5,
        )

    def test_bad_on_off_exits(self):
        """Test that an invalid on/off value is a usage error."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--class-guided", "yes"])

    def test_evaluate_needs_a_checkpoint(self):
        """Test that evaluate requires --teacher or --student."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["evaluate"])

    def test_unknown_expert_mode_exits(self):
        """Test that the expert mode is checked by the parser."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--expert-mode", "moe4"])


class TestMain:
    """Tests for the main entry point."""

    def test_report_without_results_fails(self, temp_dir):
        """Test that report returns 1 when nothing has been run."""
        assert main(["report", "--out", str(temp_dir)]) == 1

    def test_missing_config_fails(self, temp_dir):
        """Test that a missing config file returns 1."""
        assert main(["generate-data", "--config", str(temp_dir / "none.yaml")]) == 1

    def test_generate_data(self, temp_dir, config_file):
        """Test that generate-data writes COCO files with their images."""
        out = temp_dir / "out"
        assert main(["generate-data", "--config", str(config_file), "--out", str(out)]) == 0
        train = load_coco_annotations(out / "data" / "train.json")
        assert len(train) == 8
        assert len(load_coco_annotations(out / "data" / "test.json")) == 4
        assert train.image(train.image_ids[0]).load().shape == (64, 64, 3)
        assert not (out / ".dexter.lock").exists()

    def test_stage_commands(self, temp_dir, config_file):
        """Test teacher training, evaluation, oracle pseudo-labeling and student training end to end."""
        out = temp_dir / "out"
        flags = ["--config", str(config_file), "--out", str(out)]
        assert main(["train-teacher", *flags, "--max-steps", "1"]) == 0
        checkpoint = out / "teacher" / "teacher.pt"
        assert checkpoint.exists()

        assert main(["evaluate", *flags, "--teacher", str(checkpoint)]) == 0
        summary = json.loads((out / "evaluation.json").read_text())
        assert 0.0 <= summary["map"] <= 1.0

        assert main(["pseudo-label", *flags]) == 0
        pseudo = load_coco_annotations(out / "pseudo" / "train.json")
        counts = pseudo.source_counts()
        assert counts["point"] == 0
        assert counts["pseudo"] > 0

        train = str(out / "pseudo" / "train.json")
        assert main(["train-student", *flags, "--train", train, "--name", "pseudo", "--max-steps", "1"]) == 0
        assert (out / "pseudo" / "pseudo.pt").exists()
