"""Evaluation - COCO-style mAP / mAP@50 and the point-location sensitivity sweep."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
import torch

from detection_data import DetectionDataset
from functions import format_float
from geometry import box_cxcywh_to_xyxy, iou_giou, pairwise_iou_giou
from student import MiniDetectionStudent, postprocess


class EvaluationError(Exception):
    """Custom exception for evaluation errors."""

    pass


COCO_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class DetectionResult:
    """
    One evaluated prediction.

    Attributes:
        image_id: Image the prediction belongs to.
        category: Contiguous category index.
        box: Absolute-pixel corner-form box (x0, y0, x1, y1).
        score: Confidence in [0, 1]; teacher outputs carry 1.0.
    """

    image_id: int
    category: int
    box: tuple[float, float, float, float]
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"Score must be in [0, 1], got {self.score}")


@dataclass
class EvaluationSummary:
    """mAP over thresholds 0.50:0.95, mAP@50 and per-category AP (averaged over thresholds)."""

    map: float
    map50: float
    per_category: dict[str, float] = field(default_factory=dict)
    per_threshold: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-ordered true-positive indicator."""
    if num_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    # Precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < precision.size else 0.0 for i in indices])
    return float(sampled.mean())


def _validate(preds: Sequence[DetectionResult], gts: DetectionDataset) -> None:
    known = set(gts.image_ids)
    for pred in preds:
        if pred.image_id not in known:
            raise EvaluationError(f"Prediction references unknown image {pred.image_id}")
        if not 0 <= pred.category < gts.num_classes:
            raise EvaluationError(f"Prediction references unknown category {pred.category}")


def match_category(
    preds: Sequence[tuple[int, DetectionResult]],
    gt_boxes: dict[int, torch.Tensor],
    threshold: float,
) -> np.ndarray:
    """
    Greedy matching of one category's predictions at one IoU threshold.

    Predictions are visited by descending score, ties broken by (image id,
    prediction index); each claims the highest-IoU unmatched ground truth of
    its image if that IoU reaches the threshold.
    """
    order = sorted(preds, key=lambda item: (-item[1].score, item[1].image_id, item[0]))
    matched = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt_boxes.items()}
    tp = np.zeros(len(order))
    for k, (_, pred) in enumerate(order):
        boxes = gt_boxes.get(pred.image_id)
        if boxes is None or boxes.shape[0] == 0:
            continue
        ious, _ = iou_giou(torch.tensor(pred.box, dtype=torch.float64)[None], boxes)
        ious = ious.numpy().copy()
        ious[matched[pred.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            matched[pred.image_id][best] = True
            tp[k] = 1.0
    return tp


def evaluate_detections(
    preds: Sequence[DetectionResult],
    gts: DetectionDataset,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> EvaluationSummary:
    """
    COCO-style average precision, all object sizes.

    mAP is the mean over categories with ground truth and over thresholds;
    mAP@50 is the mean over those categories at threshold 0.5.

    Args:
        preds: Predictions with absolute-pixel boxes.
        gts: Dataset providing every instance's ground-truth box.
        thresholds: IoU thresholds; must contain 0.5 for mAP@50.

    Returns:
        EvaluationSummary.

    Raises:
        EvaluationError: If a prediction references an unknown image or category.
    """
    _validate(preds, gts)
    thresholds = [float(t) for t in thresholds]
    by_category: dict[int, dict[int, torch.Tensor]] = {c: {} for c in range(gts.num_classes)}
    num_gt = dict.fromkeys(range(gts.num_classes), 0)
    for image_id in gts.image_ids:
        for c in range(gts.num_classes):
            boxes = [inst.bbox for inst in gts.instances_of(image_id) if inst.category == c]
            if boxes:
                by_category[c][image_id] = torch.tensor(boxes, dtype=torch.float64)
                num_gt[c] += len(boxes)
    indexed = list(enumerate(preds))

    ap = np.full((gts.num_classes, len(thresholds)), np.nan)
    for c in range(gts.num_classes):
        if num_gt[c] == 0:
            continue
        category_preds = [(i, p) for i, p in indexed if p.category == c]
        for t, threshold in enumerate(thresholds):
            ap[c, t] = average_precision(match_category(category_preds, by_category[c], threshold), num_gt[c])

    evaluated = [c for c in range(gts.num_classes) if num_gt[c] > 0]
    if not evaluated:
        return EvaluationSummary(map=0.0, map50=0.0)
    rows = ap[evaluated]
    map50 = float(rows[:, thresholds.index(0.5)].mean()) if 0.5 in thresholds else float("nan")
    return EvaluationSummary(
        map=float(rows.mean()),
        map50=map50,
        per_category={gts.categories[c].name: float(ap[c].mean()) for c in evaluated},
        per_threshold={f"{t:.2f}": float(rows[:, k].mean()) for k, t in enumerate(thresholds)},
    )


def boxes_to_absolute(boxes: torch.Tensor, width: int, height: int) -> list[tuple[float, float, float, float]]:
    """(I, 4) normalized center-form boxes -> absolute-pixel corner tuples."""
    scale = torch.tensor([width, height, width, height], dtype=torch.float64)
    corners = box_cxcywh_to_xyxy(boxes.detach().double().cpu()).clamp(0.0, 1.0) * scale
    return [tuple(float(v) for v in row) for row in corners.tolist()]


class BoxPredictor(Protocol):
    """Anything mapping (point, category) prompts of an image to center-form normalized boxes."""

    def predict_image(
        self, dataset: DetectionDataset, image_id: int, points: torch.Tensor, categories: torch.Tensor
    ) -> torch.Tensor: ...


def predict_teacher(
    teacher: BoxPredictor, dataset: DetectionDataset, image_ids: Optional[Sequence[int]] = None
) -> list[DetectionResult]:
    """Point-to-Box predictions from each instance's single fixed point, with score 1.0."""
    results = []
    for image_id in image_ids if image_ids is not None else dataset.image_ids:
        points, categories = dataset.point_prompts(image_id)
        if points.shape[0] == 0:
            continue
        image = dataset.image(image_id)
        boxes = teacher.predict_image(dataset, image_id, points, categories)
        for box, category in zip(boxes_to_absolute(boxes, image.width, image.height), categories.tolist()):
            results.append(DetectionResult(image_id=image_id, category=int(category), box=box, score=1.0))
    return results


@torch.no_grad()
def predict_student(
    student: MiniDetectionStudent, dataset: DetectionDataset, image_ids: Optional[Sequence[int]] = None
) -> list[DetectionResult]:
    """All Q scored detections of the student per image."""
    student.eval()
    dtype = next(student.parameters()).dtype
    results = []
    for image_id in image_ids if image_ids is not None else dataset.image_ids:
        image = dataset.image(image_id)
        detections = postprocess(student(dataset.image_tensor(image_id).to(dtype)), student.config.num_classes)
        boxes = boxes_to_absolute(torch.stack([d.box for d in detections]), image.width, image.height)
        for det, box in zip(detections, boxes):
            score = min(max(det.score, 0.0), 1.0)
            results.append(DetectionResult(image_id=image_id, category=det.category, box=box, score=score))
    return results


def grid_positions(grid_size: int) -> list[tuple[float, float]]:
    """Relative (u, v) cell centers of a grid_size x grid_size lattice inside a box, row-major."""
    if grid_size < 1:
        raise EvaluationError(f"Grid size must be >= 1, got {grid_size}")
    ticks = [(i + 0.5) / grid_size for i in range(grid_size)]
    return [(u, v) for v in ticks for u in ticks]


@dataclass
class SweepRow:
    instance_id: int
    image_id: int
    position: int
    u: float
    v: float
    iou: float
    consistency: float


@dataclass
class SweepResult:
    """Per (instance, grid position) IoUs with per-instance consistency and per-position aggregates."""

    rows: list[SweepRow]
    grid_size: int

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r.iou for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_consistency(self) -> float:
        per_instance = {r.instance_id: r.consistency for r in self.rows}
        values = [v for v in per_instance.values() if not math.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    def by_position(self) -> list[dict]:
        """Mean IoU at each relative position (center vs periphery)."""
        table = []
        for position, (u, v) in enumerate(grid_positions(self.grid_size)):
            ious = [r.iou for r in self.rows if r.position == position]
            mean_iou = float(np.mean(ious)) if ious else float("nan")
            table.append({"position": position, "u": u, "v": v, "mean_iou": mean_iou})
        return table


def point_sensitivity_sweep(
    teacher, ds: DetectionDataset, grid_size: int = 5, image_ids: Optional[Sequence[int]] = None
) -> SweepResult:
    """
    Run the teacher from every lattice point inside each ground-truth box.

    Each lattice position forms its own group holding one point per instance,
    so positions never interact and one forward pass covers the whole image.
    Consistency is the mean pairwise IoU among an instance's predicted boxes.
    """
    positions = grid_positions(grid_size)
    uv = torch.tensor(positions, dtype=torch.float32)
    rows: list[SweepRow] = []
    for image_id in image_ids if image_ids is not None else ds.image_ids:
        instances = ds.instances_of(image_id)
        if not instances:
            continue
        gt_boxes, categories = ds.ground_truth_boxes(image_id)
        num_instances, num_positions = len(instances), len(positions)
        # (P, I, 2) points, position-major
        points = gt_boxes[None, :, :2] + (uv[:, None, :] - 0.5) * gt_boxes[None, :, 2:]
        groups = torch.arange(num_positions).repeat_interleave(num_instances)
        predicted = teacher.predict_groups(
            ds, image_id, points.reshape(-1, 2), categories.repeat(num_positions), groups
        ).reshape(num_positions, num_instances, 4)
        gt_corners = box_cxcywh_to_xyxy(gt_boxes.double())
        pred_corners = box_cxcywh_to_xyxy(predicted.double())
        for k, inst in enumerate(instances):
            ious, _ = iou_giou(pred_corners[:, k], gt_corners[k][None])
            if num_positions > 1:
                pairwise, _ = pairwise_iou_giou(pred_corners[:, k], pred_corners[:, k])
                consistency = float(np.mean([float(pairwise[a, b]) for a, b in combinations(range(num_positions), 2)]))
            else:
                consistency = float("nan")
            for position, (u, v) in enumerate(positions):
                rows.append(SweepRow(inst.id, image_id, position, u, v, float(ious[position]), consistency))
    return SweepResult(rows=rows, grid_size=grid_size)


# Writers


def write_metrics_csv(path: Union[str, Path], rows: Sequence[dict], columns: Sequence[str]) -> Path:
    """Write dict rows with fixed float formatting so identical results give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            cells = (row.get(c, "") for c in columns)
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in cells])
    return path


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_summary_json(path: Union[str, Path], payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True))
    return path


def write_sweep_csv(path: Union[str, Path], result: SweepResult) -> Path:
    columns = ["instance_id", "image_id", "position", "u", "v", "iou", "consistency"]
    return write_metrics_csv(path, [asdict(r) for r in result.rows], columns)
