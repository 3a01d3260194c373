"""Student - Mini detection transformer trained on box and pseudo-box labels with Hungarian matching."""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from attention import DeformableAttention, DeformableEncoder, GroupedSelfAttention
from click_moe import FeedForwardExpert
from config import StudentConfig
from network import MLP, ConvPyramidBackbone, NetworkError, apply_box_deltas, load_checkpoint, regression_loss


def hungarian_match(cost) -> list[tuple[int, int]]:
    """
    Minimum-cost assignment between predictions (rows) and targets (columns).

    Args:
        cost: (I, J) finite cost matrix, array or tensor.

    Returns:
        Sorted (row, column) pairs; min(I, J) of them.
    """
    cost = cost.detach().cpu().numpy() if isinstance(cost, torch.Tensor) else np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise NetworkError("Matching cost contains non-finite values")
    rows, cols = linear_sum_assignment(cost)
    return [(int(i), int(j)) for i, j in zip(rows, cols)]


def box_cost_matrix(pred_boxes: torch.Tensor, target_boxes: torch.Tensor) -> torch.Tensor:
    """(P, T) matrix whose entry (i, j) is regression_loss(pred_i, target_j)."""
    return regression_loss(pred_boxes[:, None, :], target_boxes[None, :, :])


@dataclass
class StudentOutput:
    """Per-stage class logits (Q, C+1) and center-form boxes (Q, 4)."""

    logits: list[torch.Tensor]
    boxes: list[torch.Tensor]


@dataclass
class Detection:
    box: torch.Tensor
    category: int
    score: float


class StudentDecoderLayer(nn.Module):
    def __init__(self, config: StudentConfig):
        super().__init__()
        d = config.d_model
        self.self_attn = GroupedSelfAttention(d, config.n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = DeformableAttention(d, config.n_levels, config.n_heads, config.n_points)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForwardExpert(d, config.d_ff or 4 * d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, content, query_pos, reference, value, spatial_shapes):
        groups = torch.zeros(content.shape[0], dtype=torch.long, device=content.device)
        content = self.norm1(content + self.self_attn(content, query_pos, groups))
        content = self.norm2(content + self.cross_attn(content + query_pos, reference, value, spatial_shapes))
        return self.norm3(content + self.ffn(content))


class MiniDetectionStudent(nn.Module):
    """
    Deformable detection transformer with learned queries and iterative box refinement.

    Learned query embeddings provide content and positional halves; a linear
    map of the positional half gives the first-stage reference points.
    """

    def __init__(self, config: StudentConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.backbone = ConvPyramidBackbone(d, config.backbone_width)
        self.encoder = DeformableEncoder(
            d, config.encoder_layers, config.n_levels, config.n_heads, config.n_points, config.d_ff or 4 * d
        )
        self.query_embed = nn.Embedding(config.num_queries, 2 * d)
        self.reference_points = nn.Linear(d, 2)
        self.layers = nn.ModuleList([StudentDecoderLayer(config) for _ in range(config.num_stages)])
        self.class_heads = nn.ModuleList([nn.Linear(d, config.num_classes + 1) for _ in range(config.num_stages)])
        self.box_heads = nn.ModuleList([MLP(d, d, 4, 3) for _ in range(config.num_stages)])
        for head in self.box_heads:
            nn.init.normal_(head.layers[-1].weight, std=1e-3)
            nn.init.zeros_(head.layers[-1].bias)
        nn.init.xavier_uniform_(self.reference_points.weight)
        nn.init.zeros_(self.reference_points.bias)

    def forward_images(self, images: torch.Tensor) -> list[StudentOutput]:
        return [self.decode(pyramid) for pyramid in (self.encoder(p) for p in self.backbone(images))]

    def decode(self, pyramid) -> StudentOutput:
        value = pyramid.flatten()
        spatial_shapes = pyramid.spatial_shapes
        query_pos, content = self.query_embed.weight.split(self.config.d_model, dim=-1)
        reference = self.reference_points(query_pos).sigmoid()
        logits, boxes = [], []
        for layer, class_head, box_head in zip(self.layers, self.class_heads, self.box_heads):
            content = layer(content, query_pos, reference, value, spatial_shapes)
            stage_boxes = apply_box_deltas(reference, box_head(content))
            logits.append(class_head(content))
            boxes.append(stage_boxes)
            reference = stage_boxes.detach()
        return StudentOutput(logits=logits, boxes=boxes)

    def forward(self, image: torch.Tensor) -> StudentOutput:
        """Decode a single (C, H, W) image."""
        return self.forward_images(image[None])[0]


def matching_cost(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    target_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    class_cost: float,
) -> torch.Tensor:
    """Class cost (negative target-class probability) plus the 5:2 box cost, shape (Q, T)."""
    prob = logits.softmax(-1)[:, target_labels]
    return class_cost * -prob + box_cost_matrix(boxes, target_boxes)


@dataclass
class StudentLoss:
    total: torch.Tensor
    classification: float
    box: float
    matches: list[tuple[int, int]]


def student_loss(
    output: StudentOutput,
    target_boxes: torch.Tensor,
    target_labels: torch.Tensor,
    config: StudentConfig,
) -> StudentLoss:
    """
    Set-prediction loss averaged over decoder stages.

    Each stage is matched on its own; unmatched queries target the no-object
    class (index C, cross-entropy weight ``no_object_weight``) and matched
    pairs add the 5:2 box loss normalized by the number of targets.
    """
    num_classes = config.num_classes
    class_weight = torch.ones(num_classes + 1, dtype=output.logits[0].dtype, device=output.logits[0].device)
    class_weight[num_classes] = config.no_object_weight
    num_targets = max(target_boxes.shape[0], 1)
    total, ce_sum, box_sum = 0.0, 0.0, 0.0
    matches: list[tuple[int, int]] = []
    for logits, boxes in zip(output.logits, output.boxes):
        matches = []
        if target_boxes.shape[0]:
            with torch.no_grad():
                cost = matching_cost(logits, boxes, target_boxes.to(boxes.dtype), target_labels, config.class_cost)
            matches = hungarian_match(cost)
        labels = torch.full((logits.shape[0],), num_classes, dtype=torch.long, device=logits.device)
        for i, j in matches:
            labels[i] = target_labels[j]
        ce = F.cross_entropy(logits, labels, weight=class_weight)
        if matches:
            rows = torch.tensor([i for i, _ in matches], dtype=torch.long)
            cols = torch.tensor([j for _, j in matches], dtype=torch.long)
            box = regression_loss(boxes[rows], target_boxes[cols].to(boxes.dtype)).sum() / num_targets
        else:
            box = boxes.sum() * 0.0
        total = total + ce + box
        ce_sum += float(ce.detach())
        box_sum += float(box.detach())
    n = len(output.logits)
    return StudentLoss(total=total / n, classification=ce_sum / n, box=box_sum / n, matches=matches)


def postprocess(output: StudentOutput, num_classes: int) -> list[Detection]:
    """Final-stage detections: one (box, category, score) per query, best object class, score-sorted."""
    prob = output.logits[-1].softmax(-1)[:, :num_classes]
    scores, categories = prob.max(-1)
    order = torch.argsort(scores, descending=True, stable=True)
    return [
        Detection(box=output.boxes[-1][i].detach(), category=int(categories[i]), score=float(scores[i]))
        for i in order.tolist()
    ]


def student_forward_and_loss(
    model: MiniDetectionStudent,
    image: torch.Tensor,
    target_boxes: Optional[torch.Tensor] = None,
    target_labels: Optional[torch.Tensor] = None,
) -> tuple[list[Detection], StudentLoss]:
    """
    Forward one image and compute its loss.

    Args:
        model: The student.
        image: (C, H, W) tensor.
        target_boxes: (T, 4) normalized center-form boxes; empty when omitted.
        target_labels: (T,) category indices.

    Returns:
        Score-sorted detections and the StudentLoss.
    """
    dtype = next(model.parameters()).dtype
    if target_boxes is None:
        target_boxes = torch.zeros(0, 4, dtype=dtype)
        target_labels = torch.zeros(0, dtype=torch.long)
    output = model(image.to(dtype))
    loss = student_loss(output, target_boxes, target_labels, model.config)
    return postprocess(output, model.config.num_classes), loss


def load_student(path: Union[str, Path]) -> MiniDetectionStudent:
    """Rebuild a student from the config echo in its checkpoint."""
    state = load_checkpoint(path)
    if state.get("config") is None:
        raise NetworkError(f"Checkpoint {path} carries no student config")
    model = MiniDetectionStudent(StudentConfig(**state["config"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model
