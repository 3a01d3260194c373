"""Command-line entry point: ``python src/cli.py <subcommand> [flags]``."""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from actions import core

from config import EXPERT_MODES, ConfigError, ExperimentConfig, load_experiment_config
from detection_data import DatasetError, load_coco_annotations, save_coco, split_dataset
from evaluation import EvaluationError, evaluate_detections, predict_student, predict_teacher, write_summary_json
from functions import seed_everything
from network import NetworkError, PointToBoxTeacher, load_teacher
from pipeline import (
    ABLATION_TABLES,
    PipelineError,
    build_datasets,
    pseudo_label_dataset,
    report_from_csv,
    run_ablation,
    run_lock,
    run_sweep,
    run_wssod_pipeline,
    stage,
    teacher_for_checkpoint,
)
from student import MiniDetectionStudent, load_student
from train_engine import TrainingError, train_student, train_teacher

COMMANDS = (
    "generate-data",
    "train-teacher",
    "pseudo-label",
    "train-student",
    "evaluate",
    "sweep",
    "run",
    "ablate",
    "report",
)


def on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got '{value}'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="Run a single seed instead of the configured list")
    common.add_argument("--fraction", type=float, help="Fraction of box-labeled training images")
    common.add_argument("--groups", type=int, help="Point-query groups N for teacher training")
    common.add_argument("--expert-mode", choices=EXPERT_MODES, help="Teacher refinement layer")
    common.add_argument("--class-guided", type=on_off, metavar="{on,off}", help="Class-guided deformable attention")
    common.add_argument("--out", help="Output directory")

    parser = argparse.ArgumentParser(
        prog="dexter", description="Point-to-Box teacher, pseudo-labeling and student training at desk scale."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-data", parents=[common], help="Write the train/test datasets as COCO JSON + PNG")

    p = sub.add_parser("train-teacher", parents=[common], help="Train the teacher on the box-labeled split")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("pseudo-label", parents=[common], help="Box the point-only split with a teacher")
    p.add_argument("--teacher", help="Teacher checkpoint; the oracle teacher is used when omitted")

    p = sub.add_parser("train-student", parents=[common], help="Train the student on a COCO file")
    p.add_argument("--train", help="COCO training file; the box-labeled split when omitted")
    p.add_argument("--name", default="student")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="mAP / mAP@50 of a checkpoint on the test set")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--teacher")
    target.add_argument("--student")

    p = sub.add_parser("sweep", parents=[common], help="Point-location sensitivity sweep of a teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--limit", type=int, help="Only the first LIMIT test images")

    sub.add_parser("run", parents=[common], help="Full pipeline: teacher, pseudo-labels, student arms, report")

    p = sub.add_parser("ablate", parents=[common], help="Teacher ablation tables")
    p.add_argument("--tables", nargs="+", choices=list(ABLATION_TABLES), default=list(ABLATION_TABLES))

    sub.add_parser("report", parents=[common], help="Rebuild tables and plots from results.csv / ablation.csv")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    return load_experiment_config(
        args.config,
        seed=args.seed,
        fraction=args.fraction,
        groups=args.groups,
        expert_mode=args.expert_mode,
        class_guided=args.class_guided,
        out_dir=args.out,
    )


def labeled_split(cfg: ExperimentConfig):
    train, test = build_datasets(cfg.dataset)
    seed = cfg.seeds[0]
    box_labeled, point_only = split_dataset(train, cfg.fraction, seed)
    return train, test, box_labeled, point_only, seed


def generate_data(cfg: ExperimentConfig, out: Path, args) -> dict:
    train, test = build_datasets(cfg.dataset)
    files = {}
    for name, ds in (("train", train), ("test", test)):
        files[name] = str(save_coco(ds, out / "data" / f"{name}.json", out / "data"))
        core.info(f"{name}: {len(ds)} images, {len(ds.instances)} instances -> {files[name]}")
    return files


def train_teacher_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    _, _, box_labeled, _, seed = labeled_split(cfg)
    train_cfg = replace(cfg.teacher_train, seed=seed)
    seed_everything(seed)
    model = PointToBoxTeacher(cfg.teacher)
    result = train_teacher(model, box_labeled, train_cfg, out / "teacher", args.max_steps, args.resume)
    return {"checkpoint": str(result.checkpoint), "steps": result.step, "final_loss": result.losses[-1:]}


def pseudo_label_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    train, _, box_labeled, point_only, _ = labeled_split(cfg)
    teacher = teacher_for_checkpoint(args.teacher, train)
    if not args.teacher:
        core.warn("No --teacher given, pseudo-labeling with the oracle teacher")
    merged = box_labeled.merge(pseudo_label_dataset(teacher, point_only))
    path = save_coco(merged, out / "pseudo" / "train.json", out / "pseudo")
    return {"annotations": str(path), "sources": merged.source_counts()}


def train_student_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    if args.train:
        data = load_coco_annotations(args.train)
        seed = cfg.seeds[0]
    else:
        _, _, data, _, seed = labeled_split(cfg)
    cfg.student.check_capacity(data.max_instances_per_image)
    train_cfg = replace(cfg.student_train, seed=seed)
    seed_everything(seed)
    model = MiniDetectionStudent(cfg.student)
    result = train_student(model, data, train_cfg, out / args.name, args.max_steps, args.resume, args.name)
    return {"checkpoint": str(result.checkpoint), "steps": result.step, "final_loss": result.losses[-1:]}


def evaluate_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    _, test = build_datasets(cfg.dataset)
    if args.teacher:
        preds = predict_teacher(load_teacher(args.teacher), test)
    else:
        preds = predict_student(load_student(args.student), test)
    summary = evaluate_detections(preds, test)
    write_summary_json(out / "evaluation.json", summary.as_dict())
    core.info(f"mAP {100 * summary.map:.2f}, mAP@50 {100 * summary.map50:.2f}")
    return summary.as_dict()


def sweep_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    _, test = build_datasets(cfg.dataset)
    ids = test.image_ids[: args.limit] if args.limit else None
    result = run_sweep(load_teacher(args.teacher), test, out / "sweep", args.grid, ids)
    return {"mean_iou": result.mean_iou, "mean_consistency": result.mean_consistency}


def run_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    report = run_wssod_pipeline(cfg)
    return {"rows": report.rows, "notes": report.notes}


def ablate_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    return {"rows": run_ablation(cfg, args.tables).rows}


def report_command(cfg: ExperimentConfig, out: Path, args) -> dict:
    return {"files": [str(p) for p in report_from_csv(out)]}


HANDLERS = {
    "generate-data": generate_data,
    "train-teacher": train_teacher_command,
    "pseudo-label": pseudo_label_command,
    "train-student": train_student_command,
    "evaluate": evaluate_command,
    "sweep": sweep_command,
    "run": run_command,
    "ablate": ablate_command,
    "report": report_command,
}
# Commands that take the output lock themselves
SELF_LOCKING = {"run", "ablate"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = Path(cfg.out_dir)
        handler = HANDLERS[args.command]
        if args.command in SELF_LOCKING:
            result = handler(cfg, out, args)
        else:
            with run_lock(out), stage(args.command):
                result = handler(cfg, out, args)
    except (ConfigError, DatasetError, EvaluationError, NetworkError, PipelineError, TrainingError) as e:
        core.error(f"{args.command} failed: {e}")
        return 1
    core.debug(json.dumps(result, default=str))
    core.info(f"\033[32;1m{args.command} completed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
