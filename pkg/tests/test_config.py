"""Tests for src/config.py"""

import sys

import pytest

sys.path.insert(0, "src")

from config import (
    ALL_EXPERTS,
    AblationConfig,
    ConfigError,
    ExperimentConfig,
    StudentConfig,
    SyntheticConfig,
    TeacherConfig,
    TrainConfig,
    config_to_dict,
    dump_experiment_config,
    experiment_from_dict,
    load_experiment_config,
)


class TestTeacherConfig:
    """Tests for the teacher architecture config."""

    def test_desk_defaults(self):
        """Test the desk-scale defaults: d=64, three stages, N=8, class-guided CLICK-MoE."""
        cfg = TeacherConfig.desk()
        assert (cfg.d_model, cfg.num_stages, cfg.groups) == (64, 3, 8)
        assert cfg.expert_mode == "click"
        assert cfg.class_guided
        assert cfg.refinement_experts == ALL_EXPERTS

    def test_full_preset(self):
        """Test the full-size preset."""
        cfg = TeacherConfig.full()
        assert (cfg.d_model, cfg.num_stages, cfg.encoder_layers, cfg.n_heads, cfg.n_points) == (256, 6, 6, 8, 4)

    def test_ffn_mode_is_common_expert(self):
        """Test that the FFN layer is the common expert alone and sparse modes report their size."""
        assert TeacherConfig(expert_mode="ffn").refinement_experts == ("common",)
        assert TeacherConfig(expert_mode="moe5").sparse_experts == 5
        assert TeacherConfig().sparse_experts == 0

    @pytest.mark.parametrize(
        "overrides",
        [
            {"num_stages": 0},
            {"groups": 0},
            {"expert_mode": "dense"},
            {"experts": ()},
            {"experts": ("common", "spatial")},
            {"expert_mode": "ffn", "experts": ("class",)},
            {"d_model": 30},
            {"n_levels": 4},
        ],
    )
    def test_invalid_values_raise(self, overrides):
        """Test that invalid teacher settings are rejected."""
        with pytest.raises(ConfigError):
            TeacherConfig(**overrides)

    def test_variants(self):
        """Test the model lineage presets and unknown names."""
        assert TeacherConfig.variant("point-detr-deformable").groups == 1
        assert TeacherConfig.variant("dexter", d_model=32).d_model == 32
        with pytest.raises(ConfigError, match="Unknown teacher variant"):
            TeacherConfig.variant("detr")


class TestOtherConfigs:
    """Tests for data, student, schedule and ablation configs."""

    def test_train_decay_before_end(self):
        """Test that the decay epoch must precede the last epoch."""
        with pytest.raises(ConfigError, match="decay_epoch"):
            TrainConfig(epochs=10, decay_epoch=10)

    def test_train_presets(self):
        """Test the full-size and desk schedules."""
        full = TrainConfig.full()
        assert (full.lr, full.warmup_iters, full.epochs, full.decay_epoch) == (1e-4, 500, 24, 20)
        assert TrainConfig.desk().epochs == 30

    def test_iterations_per_epoch(self):
        """Test the ceil division of images by batch size."""
        assert TrainConfig(batch_size=2).iterations_per_epoch(7) == 4

    def test_student_capacity(self):
        """Test that an image with more instances than queries is rejected."""
        StudentConfig(num_queries=5).check_capacity(5)
        with pytest.raises(ConfigError, match="num_queries"):
            StudentConfig(num_queries=5).check_capacity(6)

    def test_synthetic_validation(self):
        """Test the synthetic generator's value checks."""
        with pytest.raises(ConfigError):
            SyntheticConfig(image_size=100)
        with pytest.raises(ConfigError):
            SyntheticConfig(num_categories=6)
        with pytest.raises(ConfigError):
            SyntheticConfig(instances_per_image=(3, 2))
        with pytest.raises(ConfigError):
            SyntheticConfig(overlap_rate=1.5)

    def test_synthetic_priors_must_differ(self):
        """Test that two categories cannot share a prior."""
        prior = {"name": "a", "shape": "circle", "size_range": (0.1, 0.2), "aspect": 1.0}
        with pytest.raises(ConfigError, match="distinct"):
            SyntheticConfig(num_categories=2, priors=(prior, {**prior, "name": "b"}))

    def test_ablation_layer_types(self):
        """Test that ablation layer types must be known refinement layers."""
        with pytest.raises(ConfigError, match="Unknown layer type"):
            AblationConfig(layer_types=("ffn", "moe4"))


class TestExperimentConfig:
    """Tests for the experiment config and its loader."""

    def test_groups_must_agree(self):
        """Test that the teacher and its training schedule must use the same N."""
        with pytest.raises(ConfigError, match="groups"):
            ExperimentConfig(teacher=TeacherConfig(groups=4), teacher_train=TrainConfig.desk(groups=8))

    def test_fraction_range(self):
        """Test that the box-labeled fraction must be in (0, 1]."""
        with pytest.raises(ConfigError, match="fraction"):
            ExperimentConfig(fraction=0.0)

    def test_overrides(self):
        """Test that flag overrides reach the nested configs."""
        cfg = ExperimentConfig().with_overrides(
            seed=4, fraction=0.5, groups=2, expert_mode="moe3", class_guided=False, out_dir="x"
        )
        assert cfg.seeds == (4,)
        assert cfg.fraction == 0.5
        assert cfg.teacher.groups == cfg.teacher_train.groups == 2
        assert cfg.teacher.expert_mode == "moe3"
        assert cfg.teacher.class_guided is False
        assert cfg.out_dir == "x"

    def test_none_overrides_ignored(self):
        """Test that unset flags leave the config unchanged."""
        assert ExperimentConfig().with_overrides(seed=None, groups=None) == ExperimentConfig()

    def test_unknown_override_raises(self):
        """Test that unknown override keys are rejected."""
        with pytest.raises(ConfigError, match="Unknown override"):
            ExperimentConfig().with_overrides(epochs=3)

    def test_unknown_key_raises(self):
        """Test that unknown keys in a file are reported with their section."""
        with pytest.raises(ConfigError, match="teacher"):
            experiment_from_dict({"teacher": {"depth": 3}})

    def test_load_yaml(self, temp_dir):
        """Test loading nested sections from YAML."""
        path = temp_dir / "exp.yaml"
        path.write_text("fraction: 0.5\nseeds: [1, 2]\nteacher:\n  groups: 4\nteacher_train:\n  groups: 4\n")
        cfg = load_experiment_config(str(path))
        assert cfg.fraction == 0.5
        assert cfg.seeds == (1, 2)
        assert cfg.teacher.groups == 4
        assert isinstance(cfg.teacher_train, TrainConfig)

    def test_partial_schedules_keep_desk_values(self):
        """Test that a schedule section naming one key keeps the desk values of the others."""
        cfg = experiment_from_dict({"teacher_train": {"lr": 5e-4}, "student_train": {"epochs": 40}})
        assert cfg.teacher_train == TrainConfig.desk(lr=5e-4)
        assert cfg.student_train == TrainConfig.desk(groups=1, epochs=40)

    def test_partial_teacher_keeps_desk_values(self):
        """Test that a teacher section naming one key keeps the desk architecture."""
        cfg = experiment_from_dict({"teacher": {"class_guided": False}})
        assert cfg.teacher == TeacherConfig.desk(class_guided=False)

    def test_partial_synthetic_section(self):
        """Test that a nested synthetic section keeps the default image count."""
        cfg = experiment_from_dict({"dataset": {"synthetic": {"overlap_rate": 0.1}}})
        assert cfg.dataset.synthetic.num_images == 800
        assert cfg.dataset.synthetic.overlap_rate == 0.1

    def test_checkpoint_every_positive(self):
        """Test that periodic checkpointing needs a positive interval."""
        assert TrainConfig(checkpoint_every=5).checkpoint_every == 5
        with pytest.raises(ConfigError, match="checkpoint_every"):
            TrainConfig(checkpoint_every=0)

    def test_missing_and_malformed_files(self, temp_dir):
        """Test that missing or unparsable files raise ConfigError."""
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(str(temp_dir / "none.yaml"))
        bad = temp_dir / "bad.yaml"
        bad.write_text("teacher: [unclosed\n")
        with pytest.raises(ConfigError, match="Malformed"):
            load_experiment_config(str(bad))

    def test_dump_and_reload(self, temp_dir, tiny_experiment):
        """Test that a dumped config loads back to an equal config."""
        path = temp_dir / "config.yaml"
        dump_experiment_config(tiny_experiment, path)
        assert load_experiment_config(str(path)) == tiny_experiment

    def test_config_to_dict_is_plain(self):
        """Test that tuples become lists for serialization."""
        data = config_to_dict(TeacherConfig())
        assert data["experts"] == list(ALL_EXPERTS)

    @pytest.mark.parametrize("name", ["smoke", "desk"])
    def test_shipped_configs_load(self, name):
        """Test that the configs in configs/ are valid."""
        load_experiment_config(f"configs/{name}.yaml")
