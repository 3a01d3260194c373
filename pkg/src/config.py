"""Configuration dataclasses and the YAML experiment-file loader."""

import dataclasses
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(Exception):
    """Custom exception for invalid configuration."""

    pass


EXPERT_MODES = ("click", "ffn", "moe3", "moe5", "moe8")
ALL_EXPERTS = ("common", "class", "instance")


@dataclass(frozen=True)
class CategoryPrior:
    """Shape and size prior of one synthetic category (sizes are fractions of the image side)."""

    name: str
    shape: str
    size_range: tuple[float, float]
    aspect: float


DEFAULT_PRIORS = (
    CategoryPrior("circle", "circle", (0.08, 0.14), 1.0),
    CategoryPrior("square", "square", (0.14, 0.22), 1.0),
    CategoryPrior("triangle", "triangle", (0.20, 0.30), 1.3),
    CategoryPrior("ellipse", "ellipse", (0.16, 0.26), 2.0),
    CategoryPrior("cross", "cross", (0.24, 0.36), 0.6),
)


@dataclass
class SyntheticConfig:
    """Synthetic-shapes benchmark generator settings."""

    num_images: int = 1000
    image_size: int = 128
    num_categories: int = 5
    priors: tuple[CategoryPrior, ...] = DEFAULT_PRIORS
    instances_per_image: tuple[int, int] = (2, 5)
    overlap_rate: float = 0.3
    noise_level: float = 0.05
    max_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        self.priors = tuple(
            p if isinstance(p, CategoryPrior) else CategoryPrior(**{**p, "size_range": tuple(p["size_range"])})
            for p in self.priors
        )
        self.instances_per_image = tuple(self.instances_per_image)
        if self.num_categories < 1 or self.num_categories > len(self.priors):
            raise ConfigError(f"num_categories must be in [1, {len(self.priors)}], got {self.num_categories}")
        used = self.priors[: self.num_categories]
        keys = {(p.shape, tuple(p.size_range), p.aspect) for p in used}
        if len(keys) != len(used):
            raise ConfigError("Category priors must be pairwise distinct")
        lo, hi = self.instances_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"Invalid instances_per_image range: {self.instances_per_image}")
        if not 0.0 <= self.overlap_rate <= 1.0:
            raise ConfigError(f"overlap_rate must be in [0, 1], got {self.overlap_rate}")
        if self.image_size % 32 != 0:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")


@dataclass
class TeacherConfig:
    """Point-to-Box teacher architecture."""

    d_model: int = 64
    num_stages: int = 3
    encoder_layers: int = 2
    n_heads: int = 4
    n_points: int = 2
    n_levels: int = 3
    num_classes: int = 5
    groups: int = 8
    class_guided: bool = True
    expert_mode: str = "click"
    experts: tuple[str, ...] = ALL_EXPERTS
    d_ff: Optional[int] = None
    backbone_width: int = 32
    detach_references: bool = True
    deep_supervision: bool = True

    def __post_init__(self):
        self.experts = tuple(self.experts)
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.expert_mode not in EXPERT_MODES:
            raise ConfigError(f"Unknown expert_mode: {self.expert_mode}. Supported: {', '.join(EXPERT_MODES)}")
        if not self.experts or set(self.experts) - set(ALL_EXPERTS):
            raise ConfigError(f"experts must be a non-empty subset of {ALL_EXPERTS}, got {self.experts}")
        if self.expert_mode != "click" and set(self.experts) != set(ALL_EXPERTS):
            raise ConfigError(f"Expert subsets only apply to CLICK-MoE, not to expert_mode={self.expert_mode}")
        if self.d_model % 4 != 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} must be divisible by 4 and by n_heads={self.n_heads}")
        if self.n_levels != 3:
            raise ConfigError("The convolutional backbone produces exactly 3 pyramid levels")

    @property
    def refinement_experts(self) -> tuple[str, ...]:
        """Experts of the CLICK layer; the FFN mode is the common expert alone."""
        return ("common",) if self.expert_mode == "ffn" else self.experts

    @property
    def sparse_experts(self) -> int:
        return int(self.expert_mode[3:]) if self.expert_mode.startswith("moe") else 0

    @classmethod
    def desk(cls, **overrides) -> "TeacherConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "TeacherConfig":
        values = dict(d_model=256, num_stages=6, encoder_layers=6, n_heads=8, n_points=4, backbone_width=64)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def variant(cls, name: str, **overrides) -> "TeacherConfig":
        """Model lineage presets: ``point-detr-deformable`` (FFN, N=1) and ``dexter`` (CLICK-MoE, N=8)."""
        presets = {
            "point-detr-deformable": dict(expert_mode="ffn", groups=1),
            "dexter": dict(expert_mode="click", groups=8),
        }
        if name not in presets:
            raise ConfigError(f"Unknown teacher variant: {name}. Supported: {', '.join(presets)}")
        values = dict(presets[name])
        values.update(overrides)
        return cls(**values)


@dataclass
class StudentConfig:
    """Mini detection-transformer student."""

    d_model: int = 64
    num_queries: int = 20
    num_stages: int = 3
    encoder_layers: int = 1
    n_heads: int = 4
    n_points: int = 2
    n_levels: int = 3
    num_classes: int = 5
    d_ff: Optional[int] = None
    backbone_width: int = 32
    no_object_weight: float = 0.1
    class_cost: float = 1.0

    def __post_init__(self):
        if self.num_queries < 1 or self.num_stages < 1:
            raise ConfigError("num_queries and num_stages must be >= 1")
        if self.d_model % 4 != 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} must be divisible by 4 and by n_heads={self.n_heads}")

    def check_capacity(self, max_instances: int):
        """Raise if an image holds more instances than there are queries to match them."""
        if max_instances > self.num_queries:
            raise ConfigError(
                f"num_queries={self.num_queries} is smaller than the largest image's {max_instances} instances"
            )


@dataclass
class TrainConfig:
    """Optimisation schedule shared by teacher and student training."""

    lr: float = 1e-4
    warmup_iters: int = 500
    epochs: int = 24
    decay_epoch: int = 20
    decay_factor: float = 0.1
    batch_size: int = 2
    weight_decay: float = 1e-4
    clip_max_norm: float = 0.1
    seed: int = 0
    groups: int = 8
    log_every: int = 50
    max_steps: Optional[int] = None
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.decay_epoch >= self.epochs:
            raise ConfigError(f"decay_epoch ({self.decay_epoch}) must be < epochs ({self.epochs})")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        values = dict(lr=2e-4, warmup_iters=200, epochs=30, decay_epoch=25)
        values.update(overrides)
        return cls(**values)

    def iterations_per_epoch(self, num_images: int) -> int:
        return math.ceil(num_images / self.batch_size)


@dataclass
class AblationConfig:
    """Axes of the ablation grid."""

    expert_sets: tuple[tuple[str, ...], ...] = (
        ("common",),
        ("class",),
        ("instance",),
        ("common", "class"),
        ("common", "instance"),
        ("class", "instance"),
        ("common", "class", "instance"),
    )
    layer_types: tuple[str, ...] = ("ffn", "moe3", "moe5", "moe8", "click")
    group_counts: tuple[int, ...] = (1, 2, 4, 6, 8, 10, 12)
    class_guided: tuple[bool, ...] = (False, True)
    fractions: tuple[float, ...] = (0.125, 0.5)

    def __post_init__(self):
        self.expert_sets = tuple(tuple(s) for s in self.expert_sets)
        self.layer_types = tuple(self.layer_types)
        self.group_counts = tuple(self.group_counts)
        self.class_guided = tuple(self.class_guided)
        self.fractions = tuple(self.fractions)
        for mode in self.layer_types:
            if mode not in EXPERT_MODES:
                raise ConfigError(f"Unknown layer type: {mode}")


@dataclass
class DatasetConfig:
    """Dataset source: the synthetic benchmark, or COCO-format train/test files."""

    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(num_images=800))
    test_images: int = 200
    coco_train: Optional[str] = None
    coco_test: Optional[str] = None
    image_root: Optional[str] = None

    @property
    def is_coco(self) -> bool:
        return self.coco_train is not None


@dataclass
class ExperimentConfig:
    """Complete configuration of one WSSOD-P experiment or ablation grid."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fraction: float = 0.125
    teacher: TeacherConfig = field(default_factory=TeacherConfig.desk)
    student: StudentConfig = field(default_factory=StudentConfig)
    teacher_train: TrainConfig = field(default_factory=TrainConfig.desk)
    student_train: TrainConfig = field(default_factory=lambda: TrainConfig.desk(groups=1))
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    oracle_control: bool = True

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if not self.seeds:
            raise ConfigError("At least one seed is required")
        if self.teacher.groups != self.teacher_train.groups:
            raise ConfigError(
                f"teacher.groups ({self.teacher.groups}) and teacher_train.groups ({self.teacher_train.groups}) differ"
            )
        if self.teacher.num_classes != self.student.num_classes:
            raise ConfigError("Teacher and student must agree on the number of categories")

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """
        Apply command-line style overrides.

        Supported keys: seed, fraction, groups, expert_mode, class_guided, out_dir.
        """
        teacher = self.teacher
        teacher_train = self.teacher_train
        values: dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "seed":
                values["seeds"] = (int(value),)
            elif key == "fraction":
                values["fraction"] = float(value)
            elif key == "out_dir":
                values["out_dir"] = str(value)
            elif key == "groups":
                teacher = dataclasses.replace(teacher, groups=int(value))
                teacher_train = dataclasses.replace(teacher_train, groups=int(value))
            elif key == "expert_mode":
                teacher = dataclasses.replace(teacher, expert_mode=value, experts=ALL_EXPERTS)
            elif key == "class_guided":
                teacher = dataclasses.replace(teacher, class_guided=bool(value))
            else:
                raise ConfigError(f"Unknown override: {key}")
        return dataclasses.replace(self, teacher=teacher, teacher_train=teacher_train, **values)


NESTED_SECTIONS = {
    "dataset": DatasetConfig,
    "synthetic": SyntheticConfig,
    "teacher": TeacherConfig,
    "student": StudentConfig,
    "teacher_train": TrainConfig,
    "student_train": TrainConfig,
    "ablation": AblationConfig,
}


def _field_default(f: dataclasses.Field) -> Any:
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


def _build(cls, data: Any, path: str, base: Any = None):
    """
    Recursively build a dataclass from a mapping, rejecting unknown keys.

    Keys missing from a section keep the values of ``base``, and a nested
    section starts from its parent field's default (the desk presets for the
    teacher and both schedules), so a partial section only changes what it names.
    """
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return base if base is not None else cls()
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{path}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"Unknown keys in '{path or 'root'}': {', '.join(sorted(unknown))}")
    kwargs = {name: getattr(base, name) for name in fields} if base is not None else {}
    for key, value in data.items():
        sub = NESTED_SECTIONS.get(key)
        if sub is None:
            kwargs[key] = value
            continue
        sub_base = kwargs.get(key, _field_default(fields[key]))
        kwargs[key] = _build(sub, value, f"{path}.{key}".lstrip("."), sub_base)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid section '{path or 'root'}': {e}") from e


def experiment_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_experiment_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """
    Load an experiment from a YAML key-value file and apply flag overrides.

    Args:
        path: YAML file; defaults are used when omitted.
        **overrides: See ExperimentConfig.with_overrides.

    Returns:
        The validated ExperimentConfig.

    Raises:
        ConfigError: If the file is missing, malformed, or holds invalid values.
    """
    data: dict = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = yaml.safe_load(config_path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Malformed config file {path}: {e}") from e
    return experiment_from_dict(data).with_overrides(**overrides)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config) -> dict:
    """Plain (YAML/JSON serializable) dictionary of a config dataclass."""
    return _plain(asdict(config))


def dump_experiment_config(config: ExperimentConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))
