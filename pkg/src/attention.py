"""Attention - Multi-scale deformable attention, its class-guided decoder variant, and group-masked self-attention.

Feature pyramids are addressed with normalized (x, y) coordinates shared by
all levels; sampling is bilinear with zero padding outside the map.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from prompt_codec import PromptQuery, sine_embed_coords


class AttentionError(Exception):
    """Custom exception for attention errors."""

    pass


@dataclass
class FeaturePyramid:
    """
    Multi-scale feature maps of one image.

    Attributes:
        levels: One (H_l, W_l, d) tensor per level, finest first.
    """

    levels: list[torch.Tensor]

    def __post_init__(self):
        if not self.levels:
            raise AttentionError("A feature pyramid needs at least one level")
        widths = {level.shape[-1] for level in self.levels}
        if len(widths) != 1:
            raise AttentionError(f"All pyramid levels must share the channel width, got {sorted(widths)}")
        shapes = self.spatial_shapes
        for (h0, w0), (h1, w1) in zip(shapes, shapes[1:]):
            if not (h1 < h0 and w1 < w0):
                raise AttentionError(f"Pyramid level shapes must strictly decrease, got {shapes}")

    @property
    def d_model(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [(level.shape[0], level.shape[1]) for level in self.levels]

    def flatten(self) -> torch.Tensor:
        """Concatenate all levels into a (S, d) token sequence, row-major per level."""
        return torch.cat([level.reshape(-1, level.shape[-1]) for level in self.levels], dim=0)

    @classmethod
    def from_tokens(cls, tokens: torch.Tensor, spatial_shapes: list[tuple[int, int]]) -> "FeaturePyramid":
        sizes = [h * w for h, w in spatial_shapes]
        chunks = tokens.split(sizes, dim=0)
        return cls([chunk.reshape(h, w, -1) for chunk, (h, w) in zip(chunks, spatial_shapes)])


def token_reference_points(spatial_shapes: list[tuple[int, int]], dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized cell-center locations of every pyramid token, shape (S, 2)."""
    refs = []
    for h, w in spatial_shapes:
        ref_y, ref_x = torch.meshgrid(
            torch.linspace(0.5, h - 0.5, h, dtype=dtype, device=device) / h,
            torch.linspace(0.5, w - 0.5, w, dtype=dtype, device=device) / w,
            indexing="ij",
        )
        refs.append(torch.stack((ref_x.reshape(-1), ref_y.reshape(-1)), dim=-1))
    return torch.cat(refs, dim=0)


def bilinear_sample(level: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """
    Bilinearly sample a feature map at normalized locations.

    Cell (i, j) has its center at ((j + 0.5) / W, (i + 0.5) / H); locations
    outside the map read zeros.

    Args:
        level: (H, W, d) feature map.
        loc: (..., 2) normalized (x, y) locations.

    Returns:
        Tensor of shape ``loc.shape[:-1] + (d,)``.
    """
    batch_shape = loc.shape[:-1]
    value = level.permute(2, 0, 1).unsqueeze(0)
    grid = (2 * loc.reshape(1, -1, 1, 2) - 1).to(value.dtype)
    sampled = F.grid_sample(value, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return sampled[0, :, :, 0].transpose(0, 1).reshape(*batch_shape, level.shape[-1])


def multi_scale_deformable_attention(
    value: torch.Tensor,
    spatial_shapes: list[tuple[int, int]],
    sampling_locations: torch.Tensor,
    attention_weights: torch.Tensor,
) -> torch.Tensor:
    """
    Weighted sum of bilinear samples across levels and points.

    Args:
        value: (S, M, d_head) value tokens split into M heads.
        spatial_shapes: Level shapes whose sizes sum to S.
        sampling_locations: (Q, M, L, K, 2) normalized locations.
        attention_weights: (Q, M, L, K) weights, normalized over L*K.

    Returns:
        (Q, M * d_head) attended features.
    """
    _, num_heads, head_dim = value.shape
    num_queries, _, num_levels, num_points, _ = sampling_locations.shape
    value_list = value.split([h * w for h, w in spatial_shapes], dim=0)
    sampling_grids = 2 * sampling_locations - 1
    sampled = []
    for level_id, (h, w) in enumerate(spatial_shapes):
        # (H*W, M, dh) -> (M, dh, H, W)
        value_l = value_list[level_id].permute(1, 2, 0).reshape(num_heads, head_dim, h, w)
        # (Q, M, K, 2) -> (M, Q, K, 2)
        grid_l = sampling_grids[:, :, level_id].transpose(0, 1)
        # (M, dh, Q, K)
        sampled.append(F.grid_sample(value_l, grid_l, mode="bilinear", padding_mode="zeros", align_corners=False))
    # (M, dh, Q, L*K)
    stacked = torch.stack(sampled, dim=-2).flatten(-2)
    weights = attention_weights.transpose(0, 1).reshape(num_heads, 1, num_queries, num_levels * num_points)
    output = (stacked * weights).sum(-1)
    return output.permute(2, 0, 1).reshape(num_queries, num_heads * head_dim)


class DeformableAttention(nn.Module):
    """Multi-scale deformable attention over a flattened feature pyramid."""

    def __init__(self, d_model: int = 256, n_levels: int = 3, n_heads: int = 8, n_points: int = 4):
        super().__init__()
        if d_model % n_heads != 0:
            raise AttentionError(f"d_model must be divisible by n_heads, got {d_model} and {n_heads}")
        self.d_model = d_model
        self.n_levels = n_levels
        self.n_heads = n_heads
        self.n_points = n_points

        self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.n_heads, dtype=torch.float32) * (2.0 * math.pi / self.n_heads)
        grid_init = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid_init = (
            (grid_init / grid_init.abs().max(-1, keepdim=True)[0])
            .view(self.n_heads, 1, 1, 2)
            .repeat(1, self.n_levels, self.n_points, 1)
        )
        for i in range(self.n_points):
            grid_init[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid_init.view(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sampling(
        self, query: torch.Tensor, reference: torch.Tensor, spatial_shapes: list[tuple[int, int]]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Predict sampling locations and attention weights.

        Point references are offset in units of each level's cells; box
        references are offset by offset / K * (w/2, h/2).

        Returns:
            Tuple of (Q, M, L, K, 2) locations and (Q, M, L, K) weights.
        """
        num_queries = query.shape[0]
        offsets = self.sampling_offsets(query).view(num_queries, self.n_heads, self.n_levels, self.n_points, 2)
        weights = self.attention_weights(query).view(num_queries, self.n_heads, self.n_levels * self.n_points)
        weights = F.softmax(weights, -1).view(num_queries, self.n_heads, self.n_levels, self.n_points)
        if reference.shape[-1] == 2:
            normalizer = torch.tensor([[w, h] for h, w in spatial_shapes], dtype=query.dtype, device=query.device)
            locations = reference[:, None, None, None, :] + offsets / normalizer[None, None, :, None, :]
        elif reference.shape[-1] == 4:
            locations = (
                reference[:, None, None, None, :2]
                + offsets / self.n_points * reference[:, None, None, None, 2:] * 0.5
            )
        else:
            raise AttentionError(f"Last dim of reference must be 2 or 4, got {reference.shape[-1]}")
        return locations, weights

    def forward(
        self,
        query: torch.Tensor,
        reference: torch.Tensor,
        value: torch.Tensor,
        spatial_shapes: list[tuple[int, int]],
        return_weights: bool = False,
    ):
        """
        Args:
            query: (Q, d) vectors offsets and weights are predicted from.
            reference: (Q, 2) points or (Q, 4) center-form boxes, normalized.
            value: (S, d) flattened pyramid tokens.
            spatial_shapes: Level shapes of ``value``.
            return_weights: Also return the (Q, M, L, K) attention weights.

        Returns:
            (Q, d) output, and the weights when requested.

        Raises:
            AttentionError: On width or level-count mismatches.
        """
        if query.shape[-1] != self.d_model or value.shape[-1] != self.d_model:
            raise AttentionError(
                f"Width mismatch: attention d={self.d_model}, query d={query.shape[-1]}, pyramid d={value.shape[-1]}"
            )
        if len(spatial_shapes) != self.n_levels:
            raise AttentionError(f"Expected {self.n_levels} pyramid levels, got {len(spatial_shapes)}")
        if sum(h * w for h, w in spatial_shapes) != value.shape[0]:
            raise AttentionError("Spatial shapes do not match the number of value tokens")

        projected = self.value_proj(value).view(value.shape[0], self.n_heads, self.d_model // self.n_heads)
        locations, weights = self.sampling(query, reference, spatial_shapes)
        output = self.output_proj(multi_scale_deformable_attention(projected, spatial_shapes, locations, weights))
        if return_weights:
            return output, weights
        return output


class PromptCrossAttention(nn.Module):
    """
    Decoder cross-attention from prompt queries to the image pyramid.

    Class-guided: offsets and weights are predicted from content + prompt
    embedding (which carries the class embedding) around the prompt's own
    point or box. Vanilla: they are predicted from content + a class-free
    positional embedding, and the class embedding is added after attention.
    """

    def __init__(self, d_model: int, n_levels: int, n_heads: int, n_points: int, class_guided: bool = True):
        super().__init__()
        self.class_guided = class_guided
        self.msda = DeformableAttention(d_model, n_levels, n_heads, n_points)

    def forward(
        self,
        content: torch.Tensor,
        query: PromptQuery,
        value: torch.Tensor,
        spatial_shapes: list[tuple[int, int]],
        class_embedding: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if self.class_guided:
            return self.msda(content + query.prompt_embedding, query.reference, value, spatial_shapes)
        if query.position_embedding is None or class_embedding is None:
            raise AttentionError("Vanilla cross-attention needs a positional embedding and the class embedding")
        attended = self.msda(content + query.position_embedding, query.reference, value, spatial_shapes)
        return attended + class_embedding


def group_attention_mask(groups: torch.Tensor) -> torch.Tensor:
    """Boolean (Q, Q) mask, True where attention is blocked (queries of different groups)."""
    return groups[:, None] != groups[None, :]


class GroupedSelfAttention(nn.Module):
    """Multi-head self-attention among prompt queries, restricted to queries of the same group."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.attention = nn.MultiheadAttention(d_model, n_heads, dropout=0.0, batch_first=True)

    def forward(self, content: torch.Tensor, position: torch.Tensor, groups: torch.Tensor) -> torch.Tensor:
        """
        Args:
            content: (Q, d) query contents (attention values).
            position: (Q, d) prompt embeddings added to queries and keys.
            groups: (Q,) group indices.

        Returns:
            (Q, d) attended contents; the input unchanged when Q == 0.
        """
        if content.shape[0] == 0:
            return content
        q = k = (content + position).unsqueeze(0)
        mask = group_attention_mask(groups)
        attended, _ = self.attention(q, k, content.unsqueeze(0), attn_mask=mask, need_weights=False)
        return attended[0]


class DeformableEncoderLayer(nn.Module):
    """Encoder layer: plain MSDA self-attention around each token's own location, then an FFN."""

    def __init__(self, d_model: int, d_ffn: int, n_levels: int, n_heads: int, n_points: int):
        super().__init__()
        self.self_attn = DeformableAttention(d_model, n_levels, n_heads, n_points)
        self.norm1 = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, d_ffn)
        self.linear2 = nn.Linear(d_ffn, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, src, pos, reference, spatial_shapes):
        src = self.norm1(src + self.self_attn(src + pos, reference, src, spatial_shapes))
        return self.norm2(src + self.linear2(F.relu(self.linear1(src))))


class DeformableEncoder(nn.Module):
    """Stack of deformable encoder layers with sine positional and learned level embeddings."""

    def __init__(self, d_model: int, num_layers: int, n_levels: int, n_heads: int, n_points: int, d_ffn: int):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(
            [DeformableEncoderLayer(d_model, d_ffn, n_levels, n_heads, n_points) for _ in range(num_layers)]
        )
        self.level_embed = nn.Parameter(torch.empty(n_levels, d_model))
        nn.init.normal_(self.level_embed)

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        spatial_shapes = pyramid.spatial_shapes
        src = pyramid.flatten()
        reference = token_reference_points(spatial_shapes, dtype=src.dtype, device=src.device)
        level_ids = torch.cat(
            [
                torch.full((h * w,), lvl, dtype=torch.long, device=src.device)
                for lvl, (h, w) in enumerate(spatial_shapes)
            ]
        )
        pos = sine_embed_coords(reference, self.d_model // 2) + self.level_embed[level_ids]
        for layer in self.layers:
            src = layer(src, pos, reference, spatial_shapes)
        return FeaturePyramid.from_tokens(src, spatial_shapes)
