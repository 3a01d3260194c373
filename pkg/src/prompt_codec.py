"""Prompt codec - Encode point and box annotations into prompt-query embeddings.

The point encoder runs before the first decoder stage on (x, y, c) prompts;
the box encoder re-encodes each stage's predicted (x, y, w, h) box with the
same class embedding table between stages.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
from torch import nn


class PromptCodecError(Exception):
    """Custom exception for prompt encoding errors."""

    pass


SINE_TEMPERATURE = 10000
SINE_SCALE = 2 * math.pi


def sine_embed(coord: torch.Tensor, dim: int) -> torch.Tensor:
    """
    Fixed sine/cosine embedding of scalar coordinates.

    Frequencies follow the DETR layout (temperature 10000, scale 2*pi) and
    sine/cosine components are interleaved. Coordinates outside [0, 1] are
    encoded as given.

    Args:
        coord: Tensor of any shape holding coordinates.
        dim: Embedding width per coordinate, must be even.

    Returns:
        Tensor of shape ``coord.shape + (dim,)``.

    Raises:
        PromptCodecError: If ``dim`` is odd.
    """
    if dim % 2 != 0:
        raise PromptCodecError(f"Sine embedding width must be even, got {dim}")
    dim_t = torch.arange(dim, dtype=coord.dtype, device=coord.device)
    dim_t = SINE_TEMPERATURE ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / dim)
    pos = coord[..., None] * SINE_SCALE / dim_t
    return torch.stack((pos[..., 0::2].sin(), pos[..., 1::2].cos()), dim=-1).flatten(-2)


def sine_embed_coords(coords: torch.Tensor, dim_per_coord: int) -> torch.Tensor:
    """Concatenate ``sine_embed`` of every coordinate on the last axis: (..., k) -> (..., k * dim)."""
    return torch.cat([sine_embed(coords[..., i], dim_per_coord) for i in range(coords.shape[-1])], dim=-1)


class ClassEmbeddingTable(nn.Embedding):
    """Trainable (C, d) class embedding matrix shared by the point and box encoders."""

    def lookup(self, categories: torch.Tensor) -> torch.Tensor:
        if categories.numel() and (categories.min() < 0 or categories.max() >= self.num_embeddings):
            raise PromptCodecError(
                f"Category index out of range [0, {self.num_embeddings}): "
                f"{categories.min().item()}..{categories.max().item()}"
            )
        return self(categories)


@dataclass
class PromptQuery:
    """
    Decoder queries bound to instances, one row per (instance, group).

    Attributes:
        content: (Q, d) content vectors.
        prompt_embedding: (Q, d) output of encode_point / encode_box.
        category: (Q,) category indices.
        group: (Q,) group indices, constant across stages.
        reference: (Q, 2) points or (Q, 4) center-form boxes, normalized.
        position_embedding: (Q, d) class-free positional embedding, only set
            when the decoder runs vanilla (not class-guided) cross-attention.
    """

    content: torch.Tensor
    prompt_embedding: torch.Tensor
    category: torch.Tensor
    group: torch.Tensor
    reference: torch.Tensor
    position_embedding: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.content.shape[0]


class PromptEncoder(nn.Module):
    """
    Point and box prompt encoders sharing one class embedding table.

    With model width d, each coordinate is embedded with d/2 sine features, so
    the point encoder concatenates e_pos_xy (d) with e_cat (d) and the box
    encoder concatenates e_pos_xywh (2d) with e_cat (d); separate linear
    layers project both back to d.
    """

    def __init__(self, d_model: int, num_classes: int, class_guided: bool = True):
        super().__init__()
        if d_model % 4 != 0:
            raise PromptCodecError(f"Model width must be divisible by 4, got {d_model}")
        self.d_model = d_model
        self.dim_per_coord = d_model // 2
        self.class_embed = ClassEmbeddingTable(num_classes, d_model)
        self.point_proj = nn.Linear(2 * d_model, d_model)
        self.box_proj = nn.Linear(3 * d_model, d_model)
        self.class_guided = class_guided
        if not class_guided:
            # Class-free positional projections for vanilla cross-attention, on a forked RNG
            with torch.random.fork_rng(devices=[]):
                self.point_pos_proj = nn.Linear(d_model, d_model)
                self.box_pos_proj = nn.Linear(2 * d_model, d_model)

    @property
    def num_classes(self) -> int:
        return self.class_embed.num_embeddings

    def point_features(self, points: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        """Pre-projection point features: concat(e_pos_xy, e_cat), shape (..., 2d)."""
        e_cat = self.class_embed.lookup(categories)
        e_pos = sine_embed_coords(points, self.dim_per_coord).to(e_cat.dtype)
        return torch.cat([e_pos, e_cat], dim=-1)

    def box_features(self, boxes: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        """Pre-projection box features: concat(e_pos_xywh, e_cat), shape (..., 3d)."""
        e_cat = self.class_embed.lookup(categories)
        e_pos = sine_embed_coords(boxes, self.dim_per_coord).to(e_cat.dtype)
        return torch.cat([e_pos, e_cat], dim=-1)

    def encode_point(self, points: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        return self.point_proj(self.point_features(points, categories))

    def encode_box(self, boxes: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        return self.box_proj(self.box_features(boxes, categories))

    def encode_position(self, reference: torch.Tensor) -> Optional[torch.Tensor]:
        """Class-free positional embedding of a point or box reference (vanilla attention only)."""
        if self.class_guided:
            return None
        dtype = self.point_pos_proj.weight.dtype
        e_pos = sine_embed_coords(reference, self.dim_per_coord).to(dtype)
        if reference.shape[-1] == 2:
            return self.point_pos_proj(e_pos)
        return self.box_pos_proj(e_pos)


def build_point_queries(
    encoder: PromptEncoder,
    points: torch.Tensor,
    categories: torch.Tensor,
    groups: Optional[torch.Tensor] = None,
) -> PromptQuery:
    """
    Build first-stage queries from point prompts.

    Args:
        encoder: The prompt encoder.
        points: (Q, 2) normalized points.
        categories: (Q,) category indices.
        groups: (Q,) group indices; all zeros (a single group) when omitted.

    Returns:
        PromptQuery with zero content and the points as references.
    """
    if groups is None:
        groups = torch.zeros_like(categories)
    prompt = encoder.encode_point(points, categories)
    return PromptQuery(
        content=torch.zeros_like(prompt),
        prompt_embedding=prompt,
        category=categories,
        group=groups,
        reference=points.to(prompt.dtype),
        position_embedding=encoder.encode_position(points),
    )


def reencode_for_stage(
    encoder: PromptEncoder,
    query: PromptQuery,
    predicted_box: torch.Tensor,
    detach: bool = True,
) -> PromptQuery:
    """
    Turn a stage's predicted boxes into the next stage's box-queries.

    The reference becomes the predicted box (detached from the graph by
    default), the prompt embedding is recomputed with the box encoder, and
    content, category and group are carried over unchanged.

    Args:
        encoder: The prompt encoder.
        query: Queries of the stage that produced ``predicted_box``.
        predicted_box: (Q, 4) center-form boxes from apply_box_deltas.
        detach: Stop gradients through the new reference.

    Returns:
        The re-encoded PromptQuery.
    """
    reference = predicted_box.detach() if detach else predicted_box
    return replace(
        query,
        prompt_embedding=encoder.encode_box(reference, query.category),
        reference=reference,
        position_embedding=encoder.encode_position(reference),
    )
