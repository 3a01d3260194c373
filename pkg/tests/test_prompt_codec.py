"""Tests for src/prompt_codec.py"""

import sys

import pytest
import torch

sys.path.insert(0, "src")

from prompt_codec import (
    PromptCodecError,
    PromptEncoder,
    build_point_queries,
    reencode_for_stage,
    sine_embed,
    sine_embed_coords,
)


class TestSineEmbed:
    """Tests for the fixed sine/cosine embedding."""

    def test_shape(self):
        """Test the embedding width per coordinate."""
        assert sine_embed(torch.rand(5), 8).shape == (5, 8)
        assert sine_embed_coords(torch.rand(3, 4), 8).shape == (3, 32)

    def test_zero_coordinate(self):
        """Test that coordinate 0 gives interleaved (sin 0, cos 0) pairs."""
        emb = sine_embed(torch.zeros(1, dtype=torch.float64), 6)[0]
        assert emb.tolist() == pytest.approx([0.0, 1.0, 0.0, 1.0, 0.0, 1.0])

    def test_first_frequency(self):
        """Test the first pair against the closed form sin(2*pi*x), cos(2*pi*x)."""
        x = torch.tensor([0.3], dtype=torch.float64)
        emb = sine_embed(x, 4)[0]
        assert float(emb[0]) == pytest.approx(torch.sin(2 * torch.pi * x).item())
        assert float(emb[1]) == pytest.approx(torch.cos(2 * torch.pi * x).item())

    def test_odd_width_raises(self):
        """Test that an odd embedding width is rejected."""
        with pytest.raises(PromptCodecError, match="even"):
            sine_embed(torch.rand(2), 7)

    def test_outside_unit_interval_is_encoded(self):
        """Test that out-of-range coordinates are encoded rather than rejected."""
        assert torch.isfinite(sine_embed(torch.tensor([-0.5, 1.5]), 8)).all()


class TestPromptEncoder:
    """Tests for the point and box prompt encoders."""

    def test_point_and_box_shapes(self):
        """Test that both encoders project to the model width."""
        encoder = PromptEncoder(16, num_classes=3)
        cats = torch.tensor([0, 2])
        assert encoder.point_features(torch.rand(2, 2), cats).shape == (2, 32)
        assert encoder.box_features(torch.rand(2, 4), cats).shape == (2, 48)
        assert encoder.encode_point(torch.rand(2, 2), cats).shape == (2, 16)
        assert encoder.encode_box(torch.rand(2, 4), cats).shape == (2, 16)

    def test_category_changes_embedding(self):
        """Test that the same point with another category gets another embedding."""
        encoder = PromptEncoder(16, num_classes=3)
        point = torch.tensor([[0.4, 0.6], [0.4, 0.6]])
        out = encoder.encode_point(point, torch.tensor([0, 1]))
        assert not torch.allclose(out[0], out[1])

    def test_shared_class_table(self):
        """Test that point and box features use the same class embedding rows."""
        encoder = PromptEncoder(16, num_classes=3)
        cats = torch.tensor([1])
        point_cat = encoder.point_features(torch.rand(1, 2), cats)[:, 16:]
        box_cat = encoder.box_features(torch.rand(1, 4), cats)[:, 32:]
        assert torch.equal(point_cat, box_cat)

    def test_category_out_of_range_raises(self):
        """Test that an unknown category index is rejected."""
        encoder = PromptEncoder(16, num_classes=3)
        with pytest.raises(PromptCodecError, match="out of range"):
            encoder.encode_point(torch.rand(1, 2), torch.tensor([3]))

    def test_width_must_be_divisible_by_four(self):
        """Test that the model width must split into four coordinate embeddings."""
        with pytest.raises(PromptCodecError):
            PromptEncoder(18, num_classes=3)

    def test_position_only_for_vanilla_attention(self):
        """Test that the class-free positional embedding exists only without class guidance."""
        assert PromptEncoder(16, 3, class_guided=True).encode_position(torch.rand(2, 2)) is None
        vanilla = PromptEncoder(16, 3, class_guided=False)
        assert vanilla.encode_position(torch.rand(2, 2)).shape == (2, 16)
        assert vanilla.encode_position(torch.rand(2, 4)).shape == (2, 16)

    def test_vanilla_projections_leave_shared_init_unchanged(self):
        """Test that adding the vanilla projections does not shift the other parameters' initialization."""
        torch.manual_seed(5)
        guided = PromptEncoder(16, 3, class_guided=True)
        after_guided = torch.rand(3)
        torch.manual_seed(5)
        vanilla = PromptEncoder(16, 3, class_guided=False)
        after_vanilla = torch.rand(3)
        assert torch.equal(after_guided, after_vanilla)
        assert torch.equal(guided.point_proj.weight, vanilla.point_proj.weight)
        assert torch.equal(guided.class_embed.weight, vanilla.class_embed.weight)

    @pytest.mark.parametrize("seed", range(20))
    def test_point_encoder_gradcheck(self, seed):
        """Test the point encoder's analytic gradients against finite differences."""
        torch.manual_seed(seed)
        encoder = PromptEncoder(8, num_classes=2).double()
        points = torch.rand(3, 2, dtype=torch.float64, requires_grad=True)
        cats = torch.randint(0, 2, (3,))
        assert torch.autograd.gradcheck(lambda p: encoder.encode_point(p, cats), (points,))

    @pytest.mark.parametrize("seed", range(20))
    def test_box_encoder_gradcheck(self, seed):
        """Test the box encoder's analytic gradients against finite differences."""
        torch.manual_seed(seed)
        encoder = PromptEncoder(8, num_classes=2).double()
        boxes = torch.rand(2, 4, dtype=torch.float64, requires_grad=True)
        cats = torch.randint(0, 2, (2,))
        assert torch.autograd.gradcheck(lambda b: encoder.encode_box(b, cats), (boxes,))

    @pytest.mark.parametrize("seed", range(20))
    def test_position_encoder_gradcheck(self, seed):
        """Test the class-free positional projections used by vanilla attention."""
        torch.manual_seed(seed)
        encoder = PromptEncoder(8, num_classes=2, class_guided=False).double()
        reference = torch.rand(2, 4 if seed % 2 else 2, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(encoder.encode_position, (reference,))


class TestQueries:
    """Tests for building and re-encoding prompt queries."""

    def test_point_queries_start_with_zero_content(self):
        """Test that first-stage queries carry zero content and the points as references."""
        encoder = PromptEncoder(16, 3)
        points = torch.rand(4, 2)
        query = build_point_queries(encoder, points, torch.tensor([0, 1, 2, 0]))
        assert len(query) == 4
        assert torch.count_nonzero(query.content) == 0
        assert torch.equal(query.reference, points)
        assert query.group.tolist() == [0, 0, 0, 0]

    def test_reencode_keeps_category_group_and_content(self):
        """Test that re-encoding replaces the reference and prompt but keeps identity fields."""
        encoder = PromptEncoder(16, 3)
        query = build_point_queries(encoder, torch.rand(2, 2), torch.tensor([1, 2]), torch.tensor([0, 1]))
        query.content = torch.randn(2, 16)
        boxes = torch.rand(2, 4, requires_grad=True)
        nxt = reencode_for_stage(encoder, query, boxes)
        assert torch.equal(nxt.category, query.category)
        assert torch.equal(nxt.group, query.group)
        assert torch.equal(nxt.content, query.content)
        assert nxt.reference.shape == (2, 4)
        assert not nxt.reference.requires_grad

    def test_reencode_without_detach_keeps_graph(self):
        """Test that detach=False keeps the reference in the graph."""
        encoder = PromptEncoder(16, 3)
        query = build_point_queries(encoder, torch.rand(1, 2), torch.tensor([0]))
        boxes = torch.rand(1, 4, requires_grad=True)
        assert reencode_for_stage(encoder, query, boxes, detach=False).reference.requires_grad
