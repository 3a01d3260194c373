"""Network - The Point-to-Box teacher: backbone, encoder, prompt decoder, losses and checkpoints."""

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from attention import DeformableEncoder, FeaturePyramid, GroupedSelfAttention, PromptCrossAttention
from click_moe import ClickMoE, SparseMoE
from config import TeacherConfig, config_to_dict
from geometry import Point2D, box_cxcywh_to_xyxy, inverse_sigmoid, iou_giou
from prompt_codec import PromptEncoder, PromptQuery, build_point_queries, reencode_for_stage


class NetworkError(Exception):
    """Custom exception for model assembly, loss and checkpoint errors."""

    pass


# Regression loss weights (L1 : GIoU)
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0

CHECKPOINT_VERSION = 1
BACKBONE_STRIDE = 32


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvBlock(nn.Module):
    """Strided 3x3 conv followed by a 3x3 conv, each with GroupNorm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = _norm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class ConvPyramidBackbone(nn.Module):
    """
    Small strided convolutional pyramid.

    A stride-2 stem and four stride-2 blocks; the last three blocks (strides
    8, 16 and 32) are projected to the model width with 1x1 convolutions.
    """

    def __init__(self, d_model: int, width: int = 32, in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1, bias=False), _norm(width), nn.ReLU()
        )
        channels = [width, width, 2 * width, 4 * width, 8 * width]
        self.blocks = nn.ModuleList([ConvBlock(channels[i], channels[i + 1]) for i in range(4)])
        self.input_proj = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(c, d_model, 1), _norm(d_model)) for c in channels[2:]]
        )

    def forward(self, images: torch.Tensor) -> list[FeaturePyramid]:
        """
        Args:
            images: (B, C, H, W) batch with H and W divisible by 32.

        Returns:
            One three-level FeaturePyramid per image.

        Raises:
            NetworkError: If the spatial size is not divisible by 32.
        """
        height, width = images.shape[-2:]
        if height % BACKBONE_STRIDE or width % BACKBONE_STRIDE:
            raise NetworkError(f"Image size {height}x{width} is not divisible by {BACKBONE_STRIDE}")
        x = self.stem(images)
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        levels = [proj(f).permute(0, 2, 3, 1) for proj, f in zip(self.input_proj, features[1:])]
        return [FeaturePyramid([level[b] for level in levels]) for b in range(images.shape[0])]


def image_to_tensor(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """(H, W, C) uint8 or float array -> (C, H, W) float tensor in [0, 1]."""
    if isinstance(image, np.ndarray):
        scale = 255.0 if image.dtype == np.uint8 else 1.0
        image = torch.from_numpy(np.ascontiguousarray(image)).float() / scale
    if image.dim() == 2:
        image = image[..., None]
    return image.permute(2, 0, 1).contiguous()


def backbone_forward(image, backbone: ConvPyramidBackbone) -> FeaturePyramid:
    """Run the backbone on a single (H, W, C) image."""
    tensor = image_to_tensor(image).to(next(backbone.parameters()).dtype)
    return backbone(tensor[None])[0]


def apply_box_deltas(reference: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """
    Turn head deltas into center-form boxes in inverse-sigmoid space.

    A point reference (Q, 2) moves its center and takes sigmoid(dw, dh) as the
    size; a box reference (Q, 4) updates all four components. The result is
    clamped to the unit square.
    """
    if reference.shape[-1] == 2:
        center = torch.sigmoid(inverse_sigmoid(reference) + deltas[..., :2])
        size = torch.sigmoid(deltas[..., 2:])
        boxes = torch.cat([center, size], dim=-1)
    elif reference.shape[-1] == 4:
        boxes = torch.sigmoid(inverse_sigmoid(reference) + deltas)
    else:
        raise NetworkError(f"Last dim of reference must be 2 or 4, got {reference.shape[-1]}")
    return boxes.clamp(0.0, 1.0)


class MLP(nn.Module):
    """Simple multi-layer perceptron with ReLU between layers."""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip(dims, dims[1:] + [output_dim]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


def build_refinement(config: TeacherConfig) -> nn.Module:
    """The layer after cross-attention: CLICK-MoE (FFN is its common expert alone) or a sparse top-2 MoE."""
    if config.sparse_experts:
        return SparseMoE(config.d_model, config.sparse_experts, config.d_ff)
    return ClickMoE(config.d_model, config.num_classes, config.n_heads, config.d_ff, config.refinement_experts)


class DecoderStage(nn.Module):
    """One decoder block: grouped self-attention, prompt cross-attention, expert refinement, box head."""

    def __init__(self, config: TeacherConfig):
        super().__init__()
        d = config.d_model
        self.self_attn = GroupedSelfAttention(d, config.n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = PromptCrossAttention(
            d, config.n_levels, config.n_heads, config.n_points, config.class_guided
        )
        self.norm2 = nn.LayerNorm(d)
        # Refinement layer draws from its own seed on a forked RNG; the main stream advances by one draw
        # whatever the layer type
        refine_seed = int(torch.randint(0, 2**31 - 1, (1,)))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(refine_seed)
            self.refine = build_refinement(config)
        self.norm3 = nn.LayerNorm(d)
        self.box_head = MLP(d, d, 4, 3)
        nn.init.normal_(self.box_head.layers[-1].weight, std=1e-3)
        nn.init.zeros_(self.box_head.layers[-1].bias)

    def forward(
        self,
        query: PromptQuery,
        value: torch.Tensor,
        spatial_shapes: list[tuple[int, int]],
        class_embedding: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the refined (Q, d) contents and the (Q, 4) box deltas."""
        content = self.norm1(query.content + self.self_attn(query.content, query.prompt_embedding, query.group))
        content = self.norm2(content + self.cross_attn(content, query, value, spatial_shapes, class_embedding))
        # Both refinement layers carry their own residual
        content = self.norm3(self.refine(content, query.category, query.group))
        return content, self.box_head(content)


@dataclass
class StagePrediction:
    """Center-form normalized boxes predicted by one decoder stage, one row per query."""

    stage: int
    boxes: torch.Tensor

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @classmethod
    def concat(cls, per_image: Sequence[list["StagePrediction"]]) -> list["StagePrediction"]:
        """Concatenate per-image stage lists into one list spanning the batch."""
        return [
            cls(stage=s, boxes=torch.cat([preds[s].boxes for preds in per_image], dim=0))
            for s in range(len(per_image[0]))
        ]


class PointToBoxTeacher(nn.Module):
    """
    Point-to-Box regressor mapping (point, category) prompts on an image to boxes.

    Queries are instance-bound: the first stage decodes point-queries, every
    later stage decodes the previous stage's boxes re-encoded as box-queries.
    """

    def __init__(self, config: TeacherConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.backbone = ConvPyramidBackbone(d, config.backbone_width)
        self.encoder = DeformableEncoder(
            d, config.encoder_layers, config.n_levels, config.n_heads, config.n_points, config.d_ff or 4 * d
        )
        self.prompt_encoder = PromptEncoder(d, config.num_classes, config.class_guided)
        self.stages = nn.ModuleList([DecoderStage(config) for _ in range(config.num_stages)])

    def encode_images(self, images: torch.Tensor) -> list[FeaturePyramid]:
        return [self.encoder(pyramid) for pyramid in self.backbone(images)]

    def decode(
        self,
        pyramid: FeaturePyramid,
        points: torch.Tensor,
        categories: torch.Tensor,
        groups: Optional[torch.Tensor] = None,
    ) -> list[StagePrediction]:
        """
        Decode prompts against an encoded pyramid.

        Args:
            pyramid: Encoded features of one image.
            points: (Q, 2) normalized prompt points.
            categories: (Q,) category indices.
            groups: (Q,) group indices; a single group when omitted.

        Returns:
            One StagePrediction per decoder stage.

        Raises:
            NetworkError: If no prompts are given.
        """
        if points.shape[0] == 0:
            raise NetworkError("The teacher needs at least one prompt per image")
        value = pyramid.flatten()
        spatial_shapes = pyramid.spatial_shapes
        query = build_point_queries(self.prompt_encoder, points.to(value.dtype), categories, groups)
        class_embedding = None if self.config.class_guided else self.prompt_encoder.class_embed.lookup(categories)

        predictions = []
        for index, stage in enumerate(self.stages):
            content, deltas = stage(query, value, spatial_shapes, class_embedding)
            boxes = apply_box_deltas(query.reference, deltas)
            predictions.append(StagePrediction(stage=index, boxes=boxes))
            query = replace(query, content=content)
            if index < len(self.stages) - 1:
                query = reencode_for_stage(self.prompt_encoder, query, boxes, self.config.detach_references)
        return predictions

    def forward(
        self,
        image: torch.Tensor,
        points: torch.Tensor,
        categories: torch.Tensor,
        groups: Optional[torch.Tensor] = None,
    ) -> list[StagePrediction]:
        """Decode prompts on a single (C, H, W) image tensor."""
        return self.decode(self.encode_images(image[None])[0], points, categories, groups)

    @torch.no_grad()
    def predict(
        self,
        image: torch.Tensor,
        points: torch.Tensor,
        categories: torch.Tensor,
        groups: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Inference with one group per instance: the final stage's (Q, 4) center-form boxes."""
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            return self(image.to(dtype), points.to(dtype), categories, groups)[-1].boxes
        finally:
            self.train(was_training)

    def predict_image(self, dataset, image_id: int, points: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        return self.predict(dataset.image_tensor(image_id), points, categories)

    def predict_groups(
        self, dataset, image_id: int, points: torch.Tensor, categories: torch.Tensor, groups: torch.Tensor
    ) -> torch.Tensor:
        """Predict isolated prompt groups of one dataset image in a single pass."""
        return self.predict(dataset.image_tensor(image_id), points, categories, groups)


def teacher_forward(
    model: PointToBoxTeacher,
    image,
    prompts: Sequence[tuple[Point2D, int, int]],
) -> list[StagePrediction]:
    """
    Run the teacher on one image from (point, category, group) prompts.

    Args:
        model: The Point-to-Box teacher.
        image: (H, W, C) array or (C, H, W) tensor.
        prompts: Non-empty sequence of (Point2D, category, group).

    Returns:
        One StagePrediction per decoder stage.
    """
    if not prompts:
        raise NetworkError("The teacher needs at least one prompt per image")
    dtype = next(model.parameters()).dtype
    tensor = image if isinstance(image, torch.Tensor) else image_to_tensor(image)
    points = torch.tensor([[p.x, p.y] for p, _, _ in prompts], dtype=dtype)
    categories = torch.tensor([c for _, c, _ in prompts], dtype=torch.long)
    groups = torch.tensor([g for _, _, g in prompts], dtype=torch.long)
    return model(tensor.to(dtype), points, categories, groups)


@dataclass
class LossTerms:
    """Total loss with its unweighted per-query mean L1 and (1 - GIoU) terms."""

    total: torch.Tensor
    l1: float
    giou: float


def regression_terms(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-box L1 sum over the four center-form components and 1 - GIoU."""
    l1 = (pred - target).abs().sum(-1)
    _, giou = iou_giou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(target))
    return l1, 1.0 - giou


def regression_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """5 * L1 + 2 * (1 - GIoU) for center-form boxes, elementwise over leading dims."""
    l1, giou = regression_terms(pred, target)
    return L1_WEIGHT * l1 + GIOU_WEIGHT * giou


def teacher_loss(
    predictions: Sequence[StagePrediction],
    targets: torch.Tensor,
    deep_supervision: bool = True,
) -> LossTerms:
    """
    Deep-supervised regression loss normalized by the number of point-queries.

    Args:
        predictions: Per-stage predictions for Q = instances x groups queries.
        targets: (Q, 4) center-form ground-truth boxes aligned with the queries.
        deep_supervision: Average over all stages; otherwise use the last stage only.

    Returns:
        LossTerms for the batch.

    Raises:
        NetworkError: If predictions and targets are misaligned.
    """
    supervised = list(predictions) if deep_supervision else [predictions[-1]]
    num_queries = targets.shape[0]
    if num_queries == 0:
        raise NetworkError("Cannot compute a loss over zero queries")
    total, l1_sum, giou_sum = 0.0, 0.0, 0.0
    for prediction in supervised:
        if prediction.boxes.shape != targets.shape:
            raise NetworkError(
                f"Stage {prediction.stage} predicted {tuple(prediction.boxes.shape)}, targets {tuple(targets.shape)}"
            )
        l1, giou = regression_terms(prediction.boxes, targets)
        total = total + (L1_WEIGHT * l1 + GIOU_WEIGHT * giou).sum() / num_queries
        l1_sum += float(l1.detach().sum()) / num_queries
        giou_sum += float(giou.detach().sum()) / num_queries
    n = len(supervised)
    return LossTerms(total=total / n, l1=l1_sum / n, giou=giou_sum / n)


def save_checkpoint(
    path: Union[str, Path],
    model: nn.Module,
    config=None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    step: int = 0,
    extra: Optional[dict] = None,
) -> Path:
    """
    Write a versioned checkpoint.

    The container holds the format version, the config echo, parameters keyed
    by module path, optimizer state, RNG state and the epoch/step counters.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(config) if config is not None else None,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
        "epoch": epoch,
        "step": step,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(
    path: Union[str, Path],
    model: Optional[nn.Module] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    restore_rng: bool = False,
) -> dict:
    """
    Read a checkpoint and optionally restore model, optimizer and RNG state.

    Returns:
        The raw checkpoint dictionary.

    Raises:
        NetworkError: If the file is missing, unreadable, or of another format version.
    """
    path = Path(path)
    if not path.exists():
        raise NetworkError(f"Checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)  # nosec
    except Exception as e:
        raise NetworkError(f"Failed to read checkpoint {path}: {e}") from e
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise NetworkError(
            f"Unsupported checkpoint format {state.get('format_version')} in {path}, expected {CHECKPOINT_VERSION}"
        )
    if model is not None:
        model.load_state_dict(state["model"])
    if optimizer is not None and state.get("optimizer") is not None:
        optimizer.load_state_dict(state["optimizer"])
    if restore_rng:
        torch.set_rng_state(state["rng"]["torch"])
        np.random.set_state(state["rng"]["numpy"])
    return state


def load_teacher(path: Union[str, Path]) -> PointToBoxTeacher:
    """Rebuild a teacher from the config echo in its checkpoint."""
    state = load_checkpoint(path)
    if state.get("config") is None:
        raise NetworkError(f"Checkpoint {path} carries no teacher config")
    model = PointToBoxTeacher(TeacherConfig(**state["config"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model
