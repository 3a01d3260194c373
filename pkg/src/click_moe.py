"""CLICK-MoE - Class, instance and common-knowledge experts refining prompt queries.

Also holds the sparse top-2 mixture of experts that the layer-type ablation
compares against.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from attention import group_attention_mask


class ClickMoEError(Exception):
    """Custom exception for expert-layer errors."""

    pass


EXPERT_KINDS = ("common", "class", "instance")


class FeedForwardExpert(nn.Module):
    """Two-layer feed-forward map d -> d_ff -> d with ReLU after the first layer."""

    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.linear1 = nn.Linear(d_model, d_ff)
        self.linear2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear2(F.relu(self.linear1(x)))

    def zero_output(self):
        nn.init.zeros_(self.linear2.weight)
        nn.init.zeros_(self.linear2.bias)


@dataclass
class InstanceParams:
    """Per-query diagonal affine parameters of the instance expert, each (Q, d)."""

    scale: torch.Tensor
    bias: torch.Tensor

    def apply(self, content: torch.Tensor) -> torch.Tensor:
        return self.scale * content + self.bias


class InstanceParamGenerator(nn.Module):
    """
    Generate instance-expert parameters from the queries and a learnable base embedding.

    The base embedding is appended to the query sequence, self-attention runs
    over queries + embedding, the embedding's slot is discarded, and every
    query's attended vector is projected to 2d and split into (scale, bias).
    Queries attend to their own group and to the base embedding.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.d_model = d_model
        self.base_embedding = nn.Parameter(torch.empty(d_model))
        nn.init.normal_(self.base_embedding, std=0.02)
        self.attention = nn.MultiheadAttention(d_model, n_heads, dropout=0.0, batch_first=True)
        self.param_proj = nn.Linear(d_model, 2 * d_model)

    def attention_mask(self, groups: torch.Tensor) -> torch.Tensor:
        """(Q+1, Q+1) blocked-attention mask; the base embedding is visible to every query."""
        num_queries = groups.shape[0]
        mask = torch.zeros(num_queries + 1, num_queries + 1, dtype=torch.bool, device=groups.device)
        mask[:num_queries, :num_queries] = group_attention_mask(groups)
        return mask

    def forward(
        self,
        contents: torch.Tensor,
        groups: Optional[torch.Tensor] = None,
        attn_mask: Optional[torch.Tensor] = None,
    ) -> InstanceParams:
        """
        Args:
            contents: (Q, d) query contents, Q >= 1.
            groups: (Q,) group indices; a single group when omitted.
            attn_mask: Explicit (Q+1, Q+1) boolean mask overriding the group mask.

        Returns:
            InstanceParams with (Q, d) scale and bias.
        """
        num_queries = contents.shape[0]
        if num_queries == 0:
            raise ClickMoEError("Instance parameters need at least one query")
        if attn_mask is None:
            if groups is None:
                groups = torch.zeros(num_queries, dtype=torch.long, device=contents.device)
            attn_mask = self.attention_mask(groups)
        sequence = torch.cat([contents, self.base_embedding[None].to(contents.dtype)], dim=0).unsqueeze(0)
        attended, _ = self.attention(sequence, sequence, sequence, attn_mask=attn_mask, need_weights=False)
        scale, bias = self.param_proj(attended[0, :num_queries]).split(self.d_model, dim=-1)
        return InstanceParams(scale=scale, bias=bias)


class ClickMoE(nn.Module):
    """
    Mixture of a common-knowledge expert, per-category experts and a generated instance expert.

    Active experts are mixed with equal fixed weights (1/3 each for the full
    layer) and added to the input. With only the common expert active this
    is the vanilla FFN refinement.
    """

    def __init__(
        self,
        d_model: int,
        num_classes: int,
        n_heads: int,
        d_ff: Optional[int] = None,
        experts: Sequence[str] = EXPERT_KINDS,
    ):
        super().__init__()
        experts = tuple(experts)
        unknown = set(experts) - set(EXPERT_KINDS)
        if unknown or not experts:
            raise ClickMoEError(f"Experts must be a non-empty subset of {EXPERT_KINDS}, got {experts}")
        d_ff = d_ff or 4 * d_model
        self.experts = tuple(kind for kind in EXPERT_KINDS if kind in experts)
        self.num_classes = num_classes
        self.common = FeedForwardExpert(d_model, d_ff) if "common" in self.experts else None
        self.class_experts = (
            nn.ModuleList([FeedForwardExpert(d_model, d_ff) for _ in range(num_classes)])
            if "class" in self.experts
            else None
        )
        self.instance_generator = InstanceParamGenerator(d_model, n_heads) if "instance" in self.experts else None
        # Fixed mixing weights (W_gen, W_class, W_instance), not trained
        self.mixing_weights = tuple(1.0 / len(self.experts) for _ in self.experts)

    def weight_of(self, kind: str) -> float:
        return self.mixing_weights[self.experts.index(kind)]

    def zero_expert_outputs(self):
        """Zero every expert's output layer so the layer starts as the identity."""
        if self.common is not None:
            self.common.zero_output()
        if self.class_experts is not None:
            for expert in self.class_experts:
                expert.zero_output()
        if self.instance_generator is not None:
            nn.init.zeros_(self.instance_generator.param_proj.weight)
            nn.init.zeros_(self.instance_generator.param_proj.bias)

    def generate_instance_params(self, contents: torch.Tensor, groups: Optional[torch.Tensor] = None):
        if self.instance_generator is None:
            return None
        return self.instance_generator(contents, groups)

    def class_output(self, contents: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        """Route every query only through the expert of its own category."""
        output = torch.zeros_like(contents)
        for category in torch.unique(categories).tolist():
            rows = categories == category
            output[rows] = self.class_experts[category](contents[rows])
        return output

    def mix(
        self,
        contents: torch.Tensor,
        categories: torch.Tensor,
        params: Optional[InstanceParams] = None,
    ) -> torch.Tensor:
        """
        Residual expert mixture for given instance parameters.

        Args:
            contents: (Q, d) query contents.
            categories: (Q,) category indices.
            params: Instance parameters generated for these queries this stage.

        Returns:
            (Q, d) refined contents.

        Raises:
            ClickMoEError: If a category is out of range or instance parameters are missing.
        """
        if categories.numel() and (categories.min() < 0 or categories.max() >= self.num_classes):
            raise ClickMoEError(f"Category index out of range [0, {self.num_classes})")
        output = contents
        for kind, weight in zip(self.experts, self.mixing_weights):
            if kind == "common":
                output = output + weight * self.common(contents)
            elif kind == "class":
                output = output + weight * self.class_output(contents, categories)
            else:
                if params is None:
                    raise ClickMoEError("The instance expert needs generated instance parameters")
                output = output + weight * params.apply(contents)
        return output

    def forward(
        self,
        contents: torch.Tensor,
        categories: torch.Tensor,
        groups: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if contents.shape[0] == 0:
            return contents
        return self.mix(contents, categories, self.generate_instance_params(contents, groups))


def click_moe_forward(
    content: torch.Tensor, category: torch.Tensor, params: Optional[InstanceParams], bank: ClickMoE
) -> torch.Tensor:
    """Functional form of ``ClickMoE.mix`` for a bank and pre-generated instance parameters."""
    return bank.mix(content, category, params)


class SparseMoE(nn.Module):
    """Sparse mixture of E feed-forward experts with a top-2 router and a residual connection."""

    top_k = 2

    def __init__(self, d_model: int, num_experts: int, d_ff: Optional[int] = None):
        super().__init__()
        if num_experts < 2:
            raise ClickMoEError(f"A top-2 mixture needs at least 2 experts, got {num_experts}")
        d_ff = d_ff or 4 * d_model
        self.num_experts = num_experts
        self.router = nn.Linear(d_model, num_experts)
        self.experts = nn.ModuleList([FeedForwardExpert(d_model, d_ff) for _ in range(num_experts)])

    def route(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (Q, 2) selected expert indices and their renormalized weights."""
        logits = self.router(x)
        top_logits, top_experts = logits.topk(self.top_k, dim=-1)
        return top_experts, F.softmax(top_logits, dim=-1)

    def forward(self, x: torch.Tensor, categories: Optional[torch.Tensor] = None, groups=None) -> torch.Tensor:
        if x.shape[0] == 0:
            return x
        top_experts, top_weights = self.route(x)
        routed = torch.zeros_like(x)
        for expert_idx, expert in enumerate(self.experts):
            slots = top_experts == expert_idx
            rows = slots.any(dim=-1)
            if not rows.any():
                continue
            weight = (top_weights * slots).sum(dim=-1, keepdim=True)[rows]
            routed[rows] = routed[rows] + weight * expert(x[rows])
        return x + routed


def sparse_moe_forward(q: torch.Tensor, bank: SparseMoE) -> torch.Tensor:
    """Functional form of the sparse top-2 mixture."""
    return bank(q)
