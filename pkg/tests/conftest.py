"""Pytest configuration and fixtures for the detection tests."""

import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, "src")

from config import (  # noqa: E402
    DatasetConfig,
    ExperimentConfig,
    StudentConfig,
    SyntheticConfig,
    TeacherConfig,
    TrainConfig,
)
from detection_data import Category, DetectionDataset, ImageRecord, Instance, generate_synthetic  # noqa: E402
from geometry import Point2D  # noqa: E402


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    tmpdir = tempfile.mkdtemp()
    yield Path(tmpdir)
    # Cleanup
    shutil.rmtree(tmpdir, ignore_errors=True)


@pytest.fixture(autouse=True)
def deterministic_torch():
    """Seed torch for every test so parameter initialisation is reproducible."""
    torch.manual_seed(0)
    np.random.seed(0)
    yield


# Small enough to train for a handful of steps on a CPU in a test
TINY_TEACHER = dict(d_model=16, num_stages=2, encoder_layers=1, n_heads=2, n_points=2, groups=2, backbone_width=8)
TINY_STUDENT = dict(d_model=16, num_queries=8, num_stages=2, encoder_layers=1, n_heads=2, n_points=2, backbone_width=8)
TINY_SCHEDULE = dict(lr=1e-3, warmup_iters=0, epochs=2, decay_epoch=1, batch_size=2, max_steps=2)


@pytest.fixture
def tiny_synthetic():
    """Eight 64x64 images with 1-3 instances each."""
    return SyntheticConfig(num_images=8, image_size=64, instances_per_image=(1, 3), seed=3)


@pytest.fixture
def tiny_dataset(tiny_synthetic):
    return generate_synthetic(tiny_synthetic)


@pytest.fixture
def tiny_teacher_config():
    return TeacherConfig(**TINY_TEACHER)


@pytest.fixture
def tiny_student_config():
    return StudentConfig(**TINY_STUDENT)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(lr=1e-3, warmup_iters=0, epochs=4, decay_epoch=3, batch_size=2, groups=2, log_every=1)


@pytest.fixture
def tiny_experiment(temp_dir, tiny_synthetic):
    """A full experiment that finishes in seconds: 8 train images, 4 test images, one seed, 2 steps per model."""
    return ExperimentConfig(
        dataset=DatasetConfig(synthetic=tiny_synthetic, test_images=4),
        fraction=0.5,
        teacher=TeacherConfig(**TINY_TEACHER),
        student=StudentConfig(**TINY_STUDENT),
        teacher_train=TrainConfig(**TINY_SCHEDULE, groups=2),
        student_train=TrainConfig(**TINY_SCHEDULE, groups=1),
        seeds=(0,),
        out_dir=str(temp_dir / "run"),
    )


@pytest.fixture
def hand_dataset():
    """
    Two 100x100 images with hand-placed boxes.

    Image 1: category 0 at (10, 10, 40, 40) and category 1 at (50, 50, 90, 80).
    Image 2: category 0 at (20, 30, 60, 70).
    """
    images = [
        ImageRecord(id=1, width=100, height=100, file_name="000001.png", pixels=np.zeros((100, 100, 3), np.uint8)),
        ImageRecord(id=2, width=100, height=100, file_name="000002.png", pixels=np.zeros((100, 100, 3), np.uint8)),
    ]
    instances = [
        Instance(id=1, image_id=1, bbox=(10.0, 10.0, 40.0, 40.0), category=0),
        Instance(id=2, image_id=1, bbox=(50.0, 50.0, 90.0, 80.0), category=1),
        Instance(id=3, image_id=2, bbox=(20.0, 30.0, 60.0, 70.0), category=0, point=Point2D(0.3, 0.4)),
    ]
    categories = [Category(1, "circle"), Category(2, "square")]
    return DetectionDataset(images=images, instances=instances, categories=categories)
