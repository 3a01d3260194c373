"""Pipeline - WSSOD-P orchestration: split, teacher, pseudo-labels, students, ablations and reports."""

import csv
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from actions import core  # noqa: E402

from attention import AttentionError  # noqa: E402
from click_moe import ClickMoEError  # noqa: E402
from config import (  # noqa: E402
    ALL_EXPERTS,
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    TeacherConfig,
    TrainConfig,
    config_to_dict,
    dump_experiment_config,
)
from detection_data import (  # noqa: E402
    DatasetError,
    DetectionDataset,
    generate_synthetic,
    load_coco_annotations,
    split_dataset,
)
from evaluation import (  # noqa: E402
    EvaluationError,
    EvaluationSummary,
    SweepResult,
    boxes_to_absolute,
    evaluate_detections,
    point_sensitivity_sweep,
    predict_student,
    predict_teacher,
    write_metrics_csv,
    write_summary_json,
    write_sweep_csv,
)
from functions import seed_everything, stable_hash  # noqa: E402
from geometry import GeometryError, box_xyxy_to_cxcywh  # noqa: E402
from network import NetworkError, PointToBoxTeacher, load_checkpoint, load_teacher  # noqa: E402
from prompt_codec import PromptCodecError  # noqa: E402
from student import MiniDetectionStudent  # noqa: E402
from train_engine import TrainingError, train_student, train_teacher  # noqa: E402


class PipelineError(Exception):
    """Custom exception for stage-tagged pipeline failures."""

    pass


LOCK_NAME = ".dexter.lock"
STAGE_ERRORS = (
    AttentionError,
    ClickMoEError,
    ConfigError,
    DatasetError,
    EvaluationError,
    GeometryError,
    NetworkError,
    PromptCodecError,
    TrainingError,
)
STUDENT_ARMS = ("supervised", "pseudo", "oracle", "full")
ABLATION_TABLES = {"models": 1, "experts": 2, "layers": 3, "groups": 4, "guidance": 5}
EXPERT_LABELS = {"common": "CK", "class": "Class", "instance": "Instance"}
RESULT_COLUMNS = ["seed", "fraction", "arm", "model", "map", "map50"]
ABLATION_COLUMNS = ["table", "setting", "seed", "fraction", "map", "map50"]


@contextmanager
def run_lock(out_dir: Union[str, Path]) -> Iterator[Path]:
    """
    Hold ``<out_dir>/.dexter.lock`` for the duration of a run.

    The file is created exclusively and holds the owner's PID; it is removed on exit.

    Raises:
        PipelineError: If another run holds the lock.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        owner = lock.read_text().strip() if lock.exists() else "?"
        raise PipelineError(f"[lock] {out_dir} is in use by process {owner} (remove {lock} if stale)") from e
    with os.fdopen(fd, "w") as f:
        f.write(str(os.getpid()))
    try:
        yield lock
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag errors raised inside a pipeline stage with the stage name."""
    core.info(f"Stage: \033[36;1m{name}")
    try:
        yield
    except STAGE_ERRORS as e:
        raise PipelineError(f"[{name}] {type(e).__name__}: {e}") from e


class OracleTeacher:
    """Point-to-Box predictor returning the hidden ground-truth box of each prompted instance."""

    def __init__(self, hidden: DetectionDataset):
        self.hidden = hidden

    def predict_image(
        self, dataset: DetectionDataset, image_id: int, points: torch.Tensor, categories: torch.Tensor
    ) -> torch.Tensor:
        """
        Choose, per prompt, the same-category instance whose box contains the
        point, preferring the nearest box center.
        """
        image = self.hidden.image(image_id)
        candidates = self.hidden.instances_of(image_id)
        boxes = []
        for (x, y), category in zip(points.tolist(), categories.tolist()):
            px, py = x * image.width, y * image.height
            same = [inst for inst in candidates if inst.category == category]
            if not same:
                raise PipelineError(f"[oracle] No hidden instance of category {category} in image {image_id}")

            def rank(inst):
                x0, y0, x1, y1 = inst.bbox
                inside = x0 <= px <= x1 and y0 <= py <= y1
                return (not inside, (px - (x0 + x1) / 2) ** 2 + (py - (y0 + y1) / 2) ** 2, inst.id)

            x0, y0, x1, y1 = min(same, key=rank).bbox
            boxes.append([x0 / image.width, y0 / image.height, x1 / image.width, y1 / image.height])
        return box_xyxy_to_cxcywh(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4))

    def predict_groups(self, dataset, image_id, points, categories, groups) -> torch.Tensor:
        return self.predict_image(dataset, image_id, points, categories)


def pseudo_label_dataset(teacher, point_only: DetectionDataset) -> DetectionDataset:
    """
    Attach one teacher box to every point annotation.

    Args:
        teacher: A checkpoint path, a PointToBoxTeacher, or any predictor with ``predict_image``.
        point_only: Point-annotated images.

    Returns:
        The same images with one ``pseudo`` instance per point, category copied, no filtering.

    Raises:
        PipelineError: If an instance has no point annotation.
    """
    if isinstance(teacher, (str, Path)):
        teacher = load_teacher(teacher)
    instances = []
    for image_id in point_only.image_ids:
        annotated = point_only.instances_of(image_id)
        if not annotated:
            continue
        missing = [inst.id for inst in annotated if inst.point is None]
        if missing:
            raise PipelineError(f"[pseudo-label] Instances without a point annotation: {missing[:5]}")
        image = point_only.image(image_id)
        points = torch.tensor([[inst.point.x, inst.point.y] for inst in annotated])
        categories = torch.tensor([inst.category for inst in annotated], dtype=torch.long)
        predicted = teacher.predict_image(point_only, image_id, points, categories)
        boxes = boxes_to_absolute(predicted, image.width, image.height)
        for inst, box in zip(annotated, boxes):
            instances.append(replace(inst, bbox=box, source="pseudo", mask=None))
    core.info(f"Pseudo-labeled {len(instances)} instances on {len(point_only)} images")
    return point_only.with_instances(instances)


def build_datasets(cfg: DatasetConfig) -> tuple[DetectionDataset, DetectionDataset]:
    """Training and held-out test datasets (synthetic, or COCO files)."""
    if cfg.is_coco:
        if cfg.coco_test is None:
            raise DatasetError("A COCO training file needs a COCO test file")
        return (
            load_coco_annotations(cfg.coco_train, cfg.image_root),
            load_coco_annotations(cfg.coco_test, cfg.image_root),
        )
    train = generate_synthetic(cfg.synthetic)
    test_cfg = replace(cfg.synthetic, num_images=cfg.test_images, seed=cfg.synthetic.seed + 1)
    return train, generate_synthetic(test_cfg, id_offset=1_000_000)


def dataset_key(cfg: DatasetConfig) -> dict:
    return config_to_dict(cfg)


def metrics_row(summary: EvaluationSummary, **keys) -> dict:
    return {**keys, "map": 100.0 * summary.map, "map50": 100.0 * summary.map50}


@dataclass
class PipelineReport:
    """Rows of every evaluated arm plus notes about degenerate configurations."""

    out_dir: Path
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)


def checkpoint_complete(path: Path) -> bool:
    """Whether ``path`` holds a finished run rather than a periodic mid-run checkpoint."""
    return path.exists() and bool(load_checkpoint(path).get("extra", {}).get("complete"))


class StageCache:
    """On-disk stage artifacts keyed by a hash of everything that determines them."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root) / "cache"

    def directory(self, kind: str, payload: dict) -> Path:
        return self.root / f"{kind}-{stable_hash(payload)}"

    def teacher(
        self, teacher_cfg: TeacherConfig, train_cfg: TrainConfig, data: DetectionDataset, key: dict
    ) -> tuple[PointToBoxTeacher, dict]:
        payload = {"teacher": config_to_dict(teacher_cfg), "train": config_to_dict(train_cfg), **key}
        directory = self.directory("teacher", payload)
        checkpoint = directory / "teacher.pt"
        if checkpoint_complete(checkpoint):
            core.info(f"Reusing teacher {directory.name}")
            return load_teacher(checkpoint), payload
        seed_everything(train_cfg.seed)
        model = PointToBoxTeacher(teacher_cfg)
        train_teacher(model, data, train_cfg, directory, resume=True)
        model.eval()
        return model, payload

    def student(self, cfg: ExperimentConfig, train_cfg: TrainConfig, data: DetectionDataset, key: dict):
        payload = {"student": config_to_dict(cfg.student), "train": config_to_dict(train_cfg), **key}
        directory = self.directory("student", payload)
        checkpoint = directory / "student.pt"
        seed_everything(train_cfg.seed)
        model = MiniDetectionStudent(cfg.student)
        if checkpoint_complete(checkpoint):
            core.info(f"Reusing student {directory.name}")
            load_checkpoint(checkpoint, model)
        else:
            train_student(model, data, train_cfg, directory, resume=True)
        model.eval()
        return model


def run_wssod_pipeline(cfg: ExperimentConfig) -> PipelineReport:
    """
    Run the full WSSOD-P pipeline for every seed.

    Per seed: split, teacher training on the box-labeled part, teacher
    evaluation from fixed points on the test set, pseudo-labeling, student
    training on box-only, box + pseudo, box + oracle boxes and all boxes, and
    student evaluation. Stage artifacts are cached and reused on reruns.

    Raises:
        PipelineError: Stage-tagged, on any stage failure or if the output directory is locked.
    """
    out_dir = Path(cfg.out_dir)
    report = PipelineReport(out_dir=out_dir)
    with run_lock(out_dir):
        dump_experiment_config(cfg, out_dir / "config.yaml")
        cache = StageCache(out_dir)
        with stage("data"):
            train, test = build_datasets(cfg.dataset)
            cfg.student.check_capacity(max(train.max_instances_per_image, test.max_instances_per_image))
        data_key = dataset_key(cfg.dataset)

        for seed in cfg.seeds:
            core.info(f"Seed \033[33;1m{seed}")
            teacher_train = replace(cfg.teacher_train, seed=seed)
            student_train = replace(cfg.student_train, seed=seed)
            split_key = {"data": data_key, "fraction": cfg.fraction, "seed": seed}
            with stage("split"):
                box_labeled, point_only = split_dataset(train, cfg.fraction, seed)
            degenerate = len(point_only) == 0
            if degenerate:
                note = f"seed {seed}: fraction {cfg.fraction} leaves no point-only images; pseudo arms skipped"
                core.warn(note)
                report.notes.append(note)

            with stage("teacher"):
                teacher, teacher_key = cache.teacher(cfg.teacher, teacher_train, box_labeled, split_key)
            with stage("evaluate-teacher"):
                summary = evaluate_detections(predict_teacher(teacher, test), test)
                report.rows.append(
                    metrics_row(summary, seed=seed, fraction=cfg.fraction, arm="teacher", model="teacher")
                )

            arms: dict[str, tuple[DetectionDataset, dict]] = {"supervised": (box_labeled, split_key)}
            if not degenerate:
                with stage("pseudo-label"):
                    pseudo = pseudo_label_dataset(teacher, point_only)
                    arms["pseudo"] = (box_labeled.merge(pseudo), {**split_key, "teacher": teacher_key})
                    if cfg.oracle_control:
                        oracle = pseudo_label_dataset(OracleTeacher(train), point_only)
                        arms["oracle"] = (box_labeled.merge(oracle), {**split_key, "teacher": "oracle"})
            arms["full"] = (train, {"data": data_key, "fraction": 1.0, "seed": seed})

            for arm in STUDENT_ARMS:
                if arm not in arms:
                    continue
                data, key = arms[arm]
                with stage(f"student-{arm}"):
                    student = cache.student(cfg, student_train, data, key)
                with stage(f"evaluate-{arm}"):
                    summary = evaluate_detections(predict_student(student, test), test)
                report.rows.append(metrics_row(summary, seed=seed, fraction=cfg.fraction, arm=arm, model="student"))

        report.files.append(write_metrics_csv(out_dir / "results.csv", report.rows, RESULT_COLUMNS))
        report.files.append(write_summary_json(out_dir / "summary.json", {"rows": report.rows, "notes": report.notes}))
        report.files.extend(emit_report(report.rows, out_dir))
    return report


def expert_label(experts: Sequence[str]) -> str:
    return "+".join(EXPERT_LABELS[e] for e in experts)


def ablation_settings(cfg: ExperimentConfig, table: str) -> list[tuple[str, TeacherConfig]]:
    """Teacher configurations of one ablation table, each differing from the base in one component."""
    base = cfg.teacher
    if table == "models":
        shared = {k: v for k, v in config_to_dict(base).items() if k not in ("expert_mode", "groups", "experts")}
        return [(name, TeacherConfig.variant(name, **shared)) for name in ("point-detr-deformable", "dexter")]
    if table == "experts":
        return [(expert_label(s), replace(base, expert_mode="click", experts=s)) for s in cfg.ablation.expert_sets]
    if table == "layers":
        return [(mode, replace(base, expert_mode=mode, experts=ALL_EXPERTS)) for mode in cfg.ablation.layer_types]
    if table == "groups":
        return [(f"N={n}", replace(base, groups=n)) for n in cfg.ablation.group_counts]
    if table == "guidance":
        labels = {False: "MSDA", True: "class-guided MSDA"}
        return [(labels[g], replace(base, class_guided=g)) for g in cfg.ablation.class_guided]
    raise PipelineError(f"[ablate] Unknown ablation table: {table}. Supported: {', '.join(ABLATION_TABLES)}")


def run_ablation(cfg: ExperimentConfig, tables: Sequence[str] = tuple(ABLATION_TABLES)) -> PipelineReport:
    """
    Train and evaluate the teacher for every setting of the requested ablation tables.

    Settings shared between tables (the default configuration appears in
    most of them) are trained once through the stage cache.
    """
    out_dir = Path(cfg.out_dir)
    report = PipelineReport(out_dir=out_dir)
    with run_lock(out_dir):
        dump_experiment_config(cfg, out_dir / "config.yaml")
        cache = StageCache(out_dir)
        with stage("data"):
            train, test = build_datasets(cfg.dataset)
        data_key = dataset_key(cfg.dataset)

        for table in tables:
            settings = ablation_settings(cfg, table)
            for fraction in cfg.ablation.fractions:
                for seed in cfg.seeds:
                    with stage("split"):
                        box_labeled, _ = split_dataset(train, fraction, seed)
                    split_key = {"data": data_key, "fraction": fraction, "seed": seed}
                    for label, teacher_cfg in settings:
                        train_cfg = replace(cfg.teacher_train, seed=seed, groups=teacher_cfg.groups)
                        with stage(f"{table}:{label}"):
                            teacher, _ = cache.teacher(teacher_cfg, train_cfg, box_labeled, split_key)
                            summary = evaluate_detections(predict_teacher(teacher, test), test)
                        row = metrics_row(summary, table=table, setting=label, seed=seed, fraction=fraction)
                        report.rows.append(row)
                        core.info(f"{table} {label} seed={seed} fraction={fraction}: mAP@50 {row['map50']:.2f}")

        report.files.append(write_metrics_csv(out_dir / "ablation.csv", report.rows, ABLATION_COLUMNS))
        report.files.extend(emit_report(report.rows, out_dir))
    return report


# Reports


def aggregate(rows: Sequence[dict], keys: Sequence[str]) -> list[dict]:
    """Mean and sample std of mAP / mAP@50 over seeds per key combination, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    table = []
    for group_key, members in groups.items():
        entry = dict(zip(keys, group_key))
        entry["seeds"] = len(members)
        for metric in ("map", "map50"):
            values = np.array([m[metric] for m in members], dtype=float)
            entry[f"{metric}_mean"] = float(values.mean())
            entry[f"{metric}_std"] = float(values.std(ddof=1)) if values.size > 1 else float("nan")
        table.append(entry)
    return table


def _bar_plot(path: Path, table: list[dict], label_key: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(table)), 3.2))
    labels = [str(entry[label_key]) for entry in table]
    means = [entry["map50_mean"] for entry in table]
    errors = [0.0 if np.isnan(entry["map50_std"]) else entry["map50_std"] for entry in table]
    ax.bar(range(len(table)), means, yerr=errors, capsize=3, color="#4C72B0")
    ax.set_xticks(range(len(table)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mAP@50")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def emit_report(rows: Sequence[dict], out_dir: Union[str, Path]) -> list[Path]:
    """
    Write mean ± std tables and bar plots for pipeline and ablation rows.

    Pipeline rows (with an ``arm``) give ``teacher.csv`` and
    ``students.csv`` + ``students.png``; ablation rows (with a ``table``)
    give ``table<k>_<name>.csv`` + ``.png`` per table. Std cells are empty
    for single-seed runs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["seeds", "map_mean", "map_std", "map50_mean", "map50_std"]
    written: list[Path] = []
    pipeline_rows = [r for r in rows if "arm" in r]
    if pipeline_rows:
        teacher = aggregate([r for r in pipeline_rows if r["arm"] == "teacher"], ["fraction", "arm"])
        students = aggregate([r for r in pipeline_rows if r["arm"] != "teacher"], ["fraction", "arm"])
        written.append(write_metrics_csv(out_dir / "teacher.csv", teacher, ["fraction", "arm"] + columns))
        written.append(write_metrics_csv(out_dir / "students.csv", students, ["fraction", "arm"] + columns))
        if students:
            title = "Students: box-only vs pseudo vs full"
            written.append(_bar_plot(out_dir / "students.png", students, "arm", title))

    ablation_rows = [r for r in rows if "table" in r]
    for name, number in ABLATION_TABLES.items():
        selected = [r for r in ablation_rows if r["table"] == name]
        if not selected:
            continue
        table = aggregate(selected, ["fraction", "setting"])
        stem = f"table{number}_{name}"
        written.append(write_metrics_csv(out_dir / f"{stem}.csv", table, ["fraction", "setting"] + columns))
        written.append(_bar_plot(out_dir / f"{stem}.png", table, "setting", f"Teacher ablation: {name}"))
    return written


def load_report_table(path: Union[str, Path]) -> list[dict]:
    """Read a report CSV back; numeric cells become floats and empty cells None."""
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"[report] Table not found: {path}")
    rows = []
    with path.open(newline="") as f:
        for raw in csv.DictReader(f):
            row = {}
            for key, value in raw.items():
                if value == "":
                    row[key] = None
                    continue
                try:
                    row[key] = float(value)
                except ValueError:
                    row[key] = value
            rows.append(row)
    return rows


def report_from_csv(out_dir: Union[str, Path]) -> list[Path]:
    """Regenerate tables and plots from the raw results of a finished run."""
    out_dir = Path(out_dir)
    rows = []
    for name in ("results.csv", "ablation.csv"):
        if (out_dir / name).exists():
            for row in load_report_table(out_dir / name):
                row["seed"] = int(row["seed"])
                rows.append(row)
    if not rows:
        raise PipelineError(f"[report] No results.csv or ablation.csv in {out_dir}")
    return emit_report(rows, out_dir)


def teacher_for_checkpoint(path: Optional[Union[str, Path]], hidden: Optional[DetectionDataset] = None):
    """A trained teacher from a checkpoint, or the oracle when no checkpoint is given."""
    if path is None:
        if hidden is None:
            raise PipelineError("[pseudo-label] The oracle teacher needs the hidden dataset")
        return OracleTeacher(hidden)
    return load_teacher(path)


def run_sweep(
    teacher, dataset: DetectionDataset, out_dir: Union[str, Path], grid_size: int = 5, image_ids=None
) -> SweepResult:
    """Point-location sensitivity sweep with per-instance and per-position tables."""
    out_dir = Path(out_dir)
    with stage("sweep"):
        result = point_sensitivity_sweep(teacher, dataset, grid_size, image_ids)
        write_sweep_csv(out_dir / "sweep.csv", result)
        write_metrics_csv(out_dir / "sweep_positions.csv", result.by_position(), ["position", "u", "v", "mean_iou"])
        write_summary_json(
            out_dir / "sweep.json",
            {"grid_size": grid_size, "mean_iou": result.mean_iou, "mean_consistency": result.mean_consistency},
        )
    core.info(f"Sweep: mean IoU {result.mean_iou:.4f}, consistency {result.mean_consistency:.4f}")
    return result
