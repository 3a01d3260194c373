"""Tests for src/student.py"""

import itertools
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, "src")

from network import NetworkError, regression_loss, save_checkpoint
from student import (
    MiniDetectionStudent,
    StudentOutput,
    box_cost_matrix,
    hungarian_match,
    load_student,
    matching_cost,
    postprocess,
    student_forward_and_loss,
    student_loss,
)


class TestHungarianMatch:
    """Tests for the minimum-cost assignment."""

    def test_single_pair(self):
        """Test that a 1x1 matrix matches its only pair."""
        assert hungarian_match([[3.0]]) == [(0, 0)]

    def test_anti_diagonal_example(self):
        """Test that [[1,2],[2,1]] matches (0,0),(1,1) at total cost 2."""
        cost = np.array([[1.0, 2.0], [2.0, 1.0]])
        pairs = hungarian_match(cost)
        assert pairs == [(0, 0), (1, 1)]
        assert sum(cost[i, j] for i, j in pairs) == 2.0

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_matches_brute_force(self, n):
        """Test that the assignment cost equals the exhaustive minimum."""
        cost = np.random.default_rng(n).random((n, n))
        pairs = hungarian_match(cost)
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(best)

    def test_rectangular(self):
        """Test that more predictions than targets give one pair per target."""
        pairs = hungarian_match(torch.tensor([[5.0, 1.0], [0.0, 9.0], [7.0, 7.0]]))
        assert pairs == [(0, 1), (1, 0)]

    def test_empty(self):
        """Test that an empty matrix gives no pairs."""
        assert hungarian_match(np.zeros((4, 0))) == []

    def test_non_finite_raises(self):
        """Test that NaN costs are rejected."""
        with pytest.raises(NetworkError):
            hungarian_match([[float("nan"), 1.0]])


class TestMatchingCost:
    """Tests for the matching cost."""

    def test_box_cost_uses_regression_weights(self):
        """Test that box costs use the same 5:2 L1/GIoU weights as the loss."""
        pred = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        target = torch.tensor([[0.5, 0.5, 0.4, 0.4], [0.3, 0.3, 0.1, 0.1]], dtype=torch.float64)
        cost = box_cost_matrix(pred, target)
        assert cost.shape == (1, 2)
        assert float(cost[0, 0]) == pytest.approx(3.5)
        assert float(cost[0, 1]) == pytest.approx(float(regression_loss(pred[0], target[1])))

    def test_class_term(self):
        """Test that the class term subtracts the target-class probability."""
        logits = torch.log(torch.tensor([[0.7, 0.2, 0.1]], dtype=torch.float64))
        boxes = torch.tensor([[0.5, 0.5, 0.4, 0.4]], dtype=torch.float64)
        cost = matching_cost(logits, boxes, boxes, torch.tensor([0]), class_cost=1.0)
        assert float(cost[0, 0]) == pytest.approx(-0.7)


class TestStudentLoss:
    """Tests for the set-prediction loss."""

    def output(self, queries=3, classes=5, stages=2):
        g = torch.Generator().manual_seed(0)
        return StudentOutput(
            logits=[torch.randn(queries, classes + 1, generator=g) for _ in range(stages)],
            boxes=[torch.rand(queries, 4, generator=g) * 0.5 + 0.25 for _ in range(stages)],
        )

    def test_no_targets_has_zero_box_loss(self, tiny_student_config):
        """Test that an image without instances trains only the no-object class."""
        loss = student_loss(self.output(), torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), tiny_student_config)
        assert loss.box == 0.0
        assert loss.matches == []
        assert float(loss.total) == pytest.approx(loss.classification)

    def test_every_target_matched_once(self, tiny_student_config):
        """Test that each target is matched to exactly one query."""
        targets = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]])
        loss = student_loss(self.output(queries=4), targets, torch.tensor([0, 1]), tiny_student_config)
        assert sorted(j for _, j in loss.matches) == [0, 1]
        assert len({i for i, _ in loss.matches}) == 2

    def test_perfect_boxes_have_zero_box_loss(self, tiny_student_config):
        """Test that predictions equal to the targets give no box loss."""
        boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]], dtype=torch.float64)
        output = StudentOutput(logits=[torch.zeros(2, 6, dtype=torch.float64)], boxes=[boxes.clone()])
        loss = student_loss(output, boxes, torch.tensor([0, 1]), tiny_student_config)
        assert loss.box == pytest.approx(0.0, abs=1e-9)

    def test_gradients_reach_the_student(self, tiny_student_config):
        """Test that the loss backpropagates into class and box heads."""
        model = MiniDetectionStudent(tiny_student_config)
        _, loss = student_forward_and_loss(
            model, torch.rand(3, 64, 64), torch.tensor([[0.5, 0.5, 0.3, 0.3]]), torch.tensor([2])
        )
        loss.total.backward()
        assert torch.count_nonzero(model.class_heads[-1].weight.grad) > 0
        assert torch.count_nonzero(model.box_heads[-1].layers[0].weight.grad) > 0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck(self, seed, tiny_student_config):
        """Test gradients of the matched set loss with respect to every stage's logits and boxes."""
        g = torch.Generator().manual_seed(seed)
        classes = tiny_student_config.num_classes
        num_targets = seed % 4
        logits = [torch.randn(4, classes + 1, generator=g, dtype=torch.float64).requires_grad_() for _ in range(2)]
        boxes = [(torch.rand(4, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25).requires_grad_() for _ in range(2)]
        target_boxes = torch.rand(num_targets, 4, generator=g, dtype=torch.float64) * 0.5 + 0.25
        target_labels = torch.randint(0, classes, (num_targets,), generator=g)

        def loss(logits0, logits1, boxes0, boxes1):
            output = StudentOutput(logits=[logits0, logits1], boxes=[boxes0, boxes1])
            return student_loss(output, target_boxes, target_labels, tiny_student_config).total

        assert torch.autograd.gradcheck(loss, (*logits, *boxes))


class TestStudentModel:
    """Tests for the student's forward pass and inference."""

    def test_output_shapes(self, tiny_student_config):
        """Test per-stage logits (Q, C+1) and clamped boxes (Q, 4)."""
        model = MiniDetectionStudent(tiny_student_config)
        output = model(torch.rand(3, 64, 64))
        assert len(output.logits) == tiny_student_config.num_stages
        assert output.logits[-1].shape == (8, tiny_student_config.num_classes + 1)
        assert output.boxes[-1].shape == (8, 4)
        assert (output.boxes[-1] >= 0).all() and (output.boxes[-1] <= 1).all()

    def test_postprocess_sorted_by_score(self, tiny_student_config):
        """Test that detections come out in descending score order with object categories."""
        model = MiniDetectionStudent(tiny_student_config)
        detections = postprocess(model(torch.rand(3, 64, 64)), tiny_student_config.num_classes)
        scores = [d.score for d in detections]
        assert len(detections) == 8
        assert scores == sorted(scores, reverse=True)
        assert all(0 <= d.category < tiny_student_config.num_classes for d in detections)

    def test_forward_without_targets(self, tiny_student_config):
        """Test that inference without targets still returns a loss."""
        model = MiniDetectionStudent(tiny_student_config)
        detections, loss = student_forward_and_loss(model, torch.rand(3, 64, 64))
        assert len(detections) == 8
        assert loss.box == 0.0

    def test_load_student_round_trip(self, temp_dir, tiny_student_config):
        """Test that a reloaded student gives the same outputs."""
        model = MiniDetectionStudent(tiny_student_config)
        model.eval()
        path = save_checkpoint(temp_dir / "student.pt", model, tiny_student_config)
        restored = load_student(path)
        image = torch.rand(3, 64, 64)
        assert torch.equal(model(image).boxes[-1], restored(image).boxes[-1])

    def test_load_student_without_config_raises(self, temp_dir, tiny_student_config):
        """Test that a checkpoint without a config echo cannot be rebuilt."""
        path = save_checkpoint(temp_dir / "bare.pt", MiniDetectionStudent(tiny_student_config))
        with pytest.raises(NetworkError, match="no student config"):
            load_student(path)
