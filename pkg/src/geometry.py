"""Geometry - Box and point arithmetic shared by the teacher, student and evaluator.

All coordinates are normalized to the unit square unless a caller explicitly
works in absolute pixels (dataset I/O and evaluation). Tensor helpers accept
any leading batch shape with the box components on the last axis.
"""

import math
from dataclasses import dataclass

import torch


class GeometryError(Exception):
    """Custom exception for box/point arithmetic errors."""

    pass


# Supported box representations
BOX_FORMATS = {"xyxy", "cxcywh"}


@dataclass(frozen=True)
class Point2D:
    """A point annotation location, normalized to [0, 1]^2."""

    x: float
    y: float

    def as_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.tensor([self.x, self.y], dtype=dtype)


@dataclass(frozen=True)
class Box:
    """
    A representation-tagged box.

    ``xyxy`` is corner form (x_min, y_min, x_max, y_max) and ``cxcywh`` is
    center form (c_x, c_y, w, h).
    """

    coords: tuple[float, float, float, float]
    fmt: str = "xyxy"

    def __post_init__(self):
        if self.fmt not in BOX_FORMATS:
            raise GeometryError(f"Unknown box format: {self.fmt}. Supported formats: {', '.join(sorted(BOX_FORMATS))}")
        if len(self.coords) != 4:
            raise GeometryError(f"A box has 4 coordinates, got {len(self.coords)}")

    def to(self, fmt: str) -> "Box":
        return box_convert(self, fmt)

    def as_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.tensor(self.coords, dtype=dtype)


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    """Convert boxes from (cx, cy, w, h) to (x1, y1, x2, y2)."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    """Convert boxes from (x1, y1, x2, y2) to (cx, cy, w, h)."""
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def convert_boxes(boxes: torch.Tensor, in_fmt: str, out_fmt: str) -> torch.Tensor:
    """
    Convert a tensor of boxes between representations.

    Args:
        boxes: Tensor of shape (..., 4).
        in_fmt: Source format tag.
        out_fmt: Target format tag.

    Returns:
        Tensor of shape (..., 4) in ``out_fmt``.

    Raises:
        GeometryError: If either format tag is unknown.
    """
    for fmt in (in_fmt, out_fmt):
        if fmt not in BOX_FORMATS:
            raise GeometryError(f"Unknown box format: {fmt}. Supported formats: {', '.join(sorted(BOX_FORMATS))}")
    if in_fmt == out_fmt:
        return boxes
    if in_fmt == "cxcywh":
        return box_cxcywh_to_xyxy(boxes)
    return box_xyxy_to_cxcywh(boxes)


def box_convert(box: Box, target_format: str) -> Box:
    """
    Convert a tagged box to another representation.

    Args:
        box: The box to convert.
        target_format: ``xyxy`` or ``cxcywh``.

    Returns:
        A new Box tagged with ``target_format``.

    Raises:
        GeometryError: If the target format is unknown.
    """
    converted = convert_boxes(box.as_tensor(), box.fmt, target_format)
    return Box(tuple(float(v) for v in converted.tolist()), target_format)


def _as_corner_tensor(box) -> torch.Tensor:
    if isinstance(box, Box):
        return box.to("xyxy").as_tensor()
    return box


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def _iou_giou_terms(inter, union, enclosing):
    # Zero-area unions and enclosures contribute 0; the safe denominators keep gradients finite.
    safe_union = torch.where(union > 0, union, torch.ones_like(union))
    iou = torch.where(union > 0, inter / safe_union, torch.zeros_like(inter))
    penalty = torch.where(
        enclosing > 0,
        (enclosing - union) / torch.where(enclosing > 0, enclosing, torch.ones_like(enclosing)),
        torch.zeros_like(enclosing),
    )
    return iou, iou - penalty


def iou_giou(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Elementwise IoU and generalized IoU of corner-form boxes.

    Zero-area boxes yield IoU 0; the enclosing-box term is still computed.

    Args:
        a: Box or tensor of shape (..., 4) in corner form.
        b: Box or tensor broadcastable against ``a``.

    Returns:
        Tuple (iou, giou), each of the broadcast batch shape.
    """
    a = _as_corner_tensor(a)
    b = _as_corner_tensor(b)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter

    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclosing = wh_c[..., 0] * wh_c[..., 1]
    return _iou_giou_terms(inter, union, enclosing)


def pairwise_iou_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (iou, giou) matrices of shape (N, M) for corner-form boxes (N, 4) and (M, 4)."""
    return iou_giou(boxes1[:, None, :], boxes2[None, :, :])


def clamp_box(box):
    """
    Restore corner ordering and clamp a box into the unit square.

    Args:
        box: Box (any format) or corner-form tensor of shape (..., 4).

    Returns:
        Same type as the input; Box inputs keep their format tag.

    Raises:
        GeometryError: If any coordinate is not finite.
    """
    if isinstance(box, Box):
        if not all(math.isfinite(v) for v in box.coords):
            raise GeometryError(f"Non-finite box coordinates: {box.coords}")
        clamped = clamp_box(box.to("xyxy").as_tensor())
        return Box(tuple(float(v) for v in clamped.tolist()), "xyxy").to(box.fmt)

    if not torch.isfinite(box).all():
        raise GeometryError("Non-finite box coordinates")
    x0 = torch.minimum(box[..., 0], box[..., 2])
    x1 = torch.maximum(box[..., 0], box[..., 2])
    y0 = torch.minimum(box[..., 1], box[..., 3])
    y1 = torch.maximum(box[..., 1], box[..., 3])
    return torch.stack([x0, y0, x1, y1], dim=-1).clamp(0.0, 1.0)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    x1 = x.clamp(min=eps)
    x2 = (1 - x).clamp(min=eps)
    return torch.log(x1 / x2)
