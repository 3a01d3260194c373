"""Detection data - Synthetic-shapes benchmark, COCO-format I/O, splitting and point sampling."""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
from actions import core
from PIL import Image

from config import SyntheticConfig
from geometry import Box, Point2D, box_xyxy_to_cxcywh


class DatasetError(Exception):
    """Custom exception for dataset construction and ingestion errors."""

    pass


# Instance label sources: ground-truth box, point-only, teacher pseudo-box
SOURCES = {"box", "point", "pseudo"}
SHAPES = {"circle", "square", "triangle", "ellipse", "cross"}
OVERLAP_IOU = 0.2
# Share of its own shape an earlier instance keeps visible after later instances are drawn
MIN_VISIBLE_FRACTION = 0.3


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass
class ImageRecord:
    """An image by id; pixels are held in memory or read lazily from ``path``."""

    id: int
    width: int
    height: int
    file_name: str = ""
    pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    path: Optional[Path] = field(default=None, repr=False, compare=False)

    def load(self) -> np.ndarray:
        """Return the (H, W, 3) uint8 pixel array."""
        if self.pixels is None:
            if self.path is None or not Path(self.path).exists():
                raise DatasetError(f"Pixels of image {self.id} are not available ({self.path})")
            with Image.open(self.path) as img:
                self.pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return self.pixels


@dataclass
class Instance:
    """
    One annotated object.

    Attributes:
        id: Annotation id.
        image_id: Owning image.
        bbox: Absolute-pixel corner-form box (x0, y0, x1, y1).
        category: Contiguous category index into the dataset's category list.
        point: Optional fixed annotation point, normalized.
        source: ``box`` (box-labeled), ``point`` (point-only) or ``pseudo`` (teacher pseudo-box).
        mask: Optional visible-pixel mask cropped to the integer bbox.
    """

    id: int
    image_id: int
    bbox: tuple[float, float, float, float]
    category: int
    point: Optional[Point2D] = None
    source: str = "box"
    mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def is_point_only(self) -> bool:
        return self.source == "point"


@dataclass
class DetectionDataset:
    """
    Images, instances and categories.

    Point-only instances keep their ground-truth box for evaluation, but the
    training accessors only expose their (point, category).
    """

    images: list[ImageRecord]
    instances: list[Instance]
    categories: list[Category]

    def __post_init__(self):
        self._images = {}
        for image in self.images:
            if image.id in self._images:
                raise DatasetError(f"Duplicate image id: {image.id}")
            self._images[image.id] = image
        self._by_image: dict[int, list[Instance]] = {image.id: [] for image in self.images}
        for instance in self.instances:
            if instance.image_id not in self._images:
                raise DatasetError(f"Instance {instance.id} references unknown image {instance.image_id}")
            if not 0 <= instance.category < len(self.categories):
                raise DatasetError(f"Instance {instance.id} references unknown category index {instance.category}")
            if instance.source not in SOURCES:
                raise DatasetError(f"Instance {instance.id} has unknown source '{instance.source}'")
            self._by_image[instance.image_id].append(instance)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def image_ids(self) -> list[int]:
        return [image.id for image in self.images]

    def image(self, image_id: int) -> ImageRecord:
        try:
            return self._images[image_id]
        except KeyError as e:
            raise DatasetError(f"Unknown image id: {image_id}") from e

    def instances_of(self, image_id: int) -> list[Instance]:
        self.image(image_id)
        return self._by_image[image_id]

    @property
    def max_instances_per_image(self) -> int:
        return max((len(v) for v in self._by_image.values()), default=0)

    def image_tensor(self, image_id: int) -> torch.Tensor:
        """(3, H, W) float tensor in [0, 1]."""
        pixels = self.image(image_id).load()
        return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float() / 255.0

    def normalized_box(self, instance: Instance) -> Box:
        image = self.image(instance.image_id)
        x0, y0, x1, y1 = instance.bbox
        return Box((x0 / image.width, y0 / image.height, x1 / image.width, y1 / image.height), "xyxy")

    def _boxes(self, instances: Sequence[Instance], dtype: torch.dtype) -> torch.Tensor:
        if not instances:
            return torch.zeros(0, 4, dtype=dtype)
        corners = torch.tensor([self.normalized_box(inst).coords for inst in instances], dtype=dtype)
        return box_xyxy_to_cxcywh(corners)

    def box_targets(self, image_id: int, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Training targets: (I, 4) normalized center-form boxes and (I,) categories.

        Raises:
            DatasetError: If the image holds point-only instances, whose boxes are hidden from training.
        """
        instances = self.instances_of(image_id)
        if any(inst.is_point_only for inst in instances):
            raise DatasetError(f"Image {image_id} is point-annotated; its boxes are not available for training")
        labels = torch.tensor([inst.category for inst in instances], dtype=torch.long)
        return self._boxes(instances, dtype), labels

    def ground_truth_boxes(
        self, image_id: int, dtype: torch.dtype = torch.float32
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """All instances' boxes regardless of source, for evaluation only."""
        instances = self.instances_of(image_id)
        labels = torch.tensor([inst.category for inst in instances], dtype=torch.long)
        return self._boxes(instances, dtype), labels

    def point_prompts(self, image_id: int, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Fixed (I, 2) normalized points and (I,) categories of every instance.

        Instances without an explicit point use fixed_inference_point.
        """
        image = self.image(image_id)
        instances = self.instances_of(image_id)
        points = [inst.point or fixed_inference_point(inst, image.width, image.height) for inst in instances]
        labels = torch.tensor([inst.category for inst in instances], dtype=torch.long)
        if not points:
            return torch.zeros(0, 2, dtype=dtype), labels
        return torch.tensor([[p.x, p.y] for p in points], dtype=dtype), labels

    def subset(self, image_ids: Iterable[int]) -> "DetectionDataset":
        keep = set(image_ids)
        return DetectionDataset(
            images=[image for image in self.images if image.id in keep],
            instances=[inst for inst in self.instances if inst.image_id in keep],
            categories=list(self.categories),
        )

    def with_instances(self, instances: list[Instance]) -> "DetectionDataset":
        return DetectionDataset(images=list(self.images), instances=instances, categories=list(self.categories))

    def merge(self, other: "DetectionDataset") -> "DetectionDataset":
        """Union of two datasets over disjoint images sharing the category list."""
        if [c.name for c in self.categories] != [c.name for c in other.categories]:
            raise DatasetError("Cannot merge datasets with different categories")
        overlap = set(self.image_ids) & set(other.image_ids)
        if overlap:
            raise DatasetError(f"Cannot merge datasets sharing images: {sorted(overlap)[:5]}")
        return DetectionDataset(
            images=self.images + other.images,
            instances=self.instances + other.instances,
            categories=list(self.categories),
        )

    def source_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(sorted(SOURCES), 0)
        for inst in self.instances:
            counts[inst.source] += 1
        return counts


# Synthetic benchmark


def shape_mask(shape: str, size: int, cx: float, cy: float, w: float, h: float) -> np.ndarray:
    """Boolean (size, size) mask of a shape sampled at pixel centers."""
    coords = np.arange(size) + 0.5
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - cx, y - cy
    if shape in ("circle", "ellipse"):
        return (dx / (w / 2)) ** 2 + (dy / (h / 2)) ** 2 <= 1.0
    if shape == "square":
        return (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)
    if shape == "triangle":
        t = (dy + h / 2) / h
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * w / 2)
    if shape == "cross":
        vertical = (np.abs(dx) <= w / 6) & (np.abs(dy) <= h / 2)
        horizontal = (np.abs(dy) <= h / 6) & (np.abs(dx) <= w / 2)
        return vertical | horizontal
    raise DatasetError(f"Unknown shape: {shape}. Supported shapes: {', '.join(sorted(SHAPES))}")


def mask_bbox(mask: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    """Tight pixel-edge corner box (x0, y0, x1, y1) of a mask, or None when empty."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _sample_shape(cfg: SyntheticConfig, category: int, rng: np.random.Generator):
    prior = cfg.priors[category]
    size = cfg.image_size
    extent = rng.uniform(*prior.size_range) * size
    w = min(extent * math.sqrt(prior.aspect), size - 2)
    h = min(extent / math.sqrt(prior.aspect), size - 2)
    cx = rng.uniform(w / 2, size - w / 2)
    cy = rng.uniform(h / 2, size - h / 2)
    mask = shape_mask(prior.shape, size, cx, cy, w, h)
    return mask, mask_bbox(mask)


def _placement_ok(bbox, placed: list[tuple], want_overlap: bool) -> bool:
    ious = [_box_iou(bbox, other) for other in placed]
    if want_overlap:
        return any(iou >= OVERLAP_IOU for iou in ious)
    return all(iou == 0.0 for iou in ious)


def _keeps_visible(mask: np.ndarray, owner: np.ndarray, areas: list[int]) -> bool:
    """Whether every earlier instance keeps MIN_VISIBLE_FRACTION of its shape once ``mask`` is drawn on top."""
    covered = owner[mask]
    for index, area in enumerate(areas):
        visible = int((owner == index).sum()) - int((covered == index).sum())
        if visible < MIN_VISIBLE_FRACTION * area:
            return False
    return True


def generate_synthetic(cfg: SyntheticConfig, id_offset: int = 0) -> DetectionDataset:
    """
    Render the synthetic-shapes benchmark.

    Every instance draws a category, a size from that category's prior and a
    position; with probability ``overlap_rate`` it must overlap an earlier
    instance with IoU >= 0.2, otherwise it must not touch any. Placements
    failing after ``max_retries`` are skipped with a warning. Later
    instances occlude earlier ones, but never below MIN_VISIBLE_FRACTION of
    an earlier shape; stored masks are the visible pixels and boxes are
    tight around the full shape.

    Args:
        cfg: Generator settings; the output is a pure function of it.
        id_offset: Added to every image and annotation id.

    Returns:
        The rendered DetectionDataset.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    categories = [Category(id=i + 1, name=cfg.priors[i].name) for i in range(cfg.num_categories)]
    images: list[ImageRecord] = []
    instances: list[Instance] = []
    skipped = 0

    for image_index in range(cfg.num_images):
        image_id = id_offset + image_index + 1
        canvas = np.clip(0.1 + rng.normal(0.0, cfg.noise_level, (size, size, 3)), 0.0, 1.0)
        owner = np.full((size, size), -1, dtype=np.int64)
        lo, hi = cfg.instances_per_image
        placed: list[tuple] = []
        drawn: list[tuple[int, int, tuple]] = []
        areas: list[int] = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            category = int(rng.integers(cfg.num_categories))
            want_overlap = bool(placed) and rng.random() < cfg.overlap_rate
            for _ in range(cfg.max_retries):
                mask, bbox = _sample_shape(cfg, category, rng)
                if (
                    bbox is not None
                    and _placement_ok(bbox, placed, want_overlap)
                    and _keeps_visible(mask, owner, areas)
                ):
                    break
            else:
                skipped += 1
                name = categories[category].name
                core.warn(f"Synthetic image {image_id}: no valid placement for a '{name}' instance")
                continue
            color = rng.uniform(0.45, 1.0, size=3)
            canvas[mask] = np.clip(color + rng.normal(0.0, cfg.noise_level, (int(mask.sum()), 3)), 0.0, 1.0)
            owner[mask] = len(drawn)
            areas.append(int(mask.sum()))
            placed.append(bbox)
            drawn.append((len(instances) + len(drawn) + id_offset + 1, category, bbox))

        for index, (ann_id, category, bbox) in enumerate(drawn):
            x0, y0, x1, y1 = bbox
            instances.append(
                Instance(
                    id=ann_id,
                    image_id=image_id,
                    bbox=(float(x0), float(y0), float(x1), float(y1)),
                    category=category,
                    source="box",
                    mask=owner[y0:y1, x0:x1] == index,
                )
            )
        images.append(
            ImageRecord(
                id=image_id,
                width=size,
                height=size,
                file_name=f"{image_id:06d}.png",
                pixels=(canvas * 255).round().astype(np.uint8),
            )
        )

    if skipped:
        core.info(f"Synthetic generation skipped {skipped} infeasible placements")
    return DetectionDataset(images=images, instances=instances, categories=categories)


# COCO-format I/O


def save_coco(ds: DetectionDataset, path: Union[str, Path], image_dir: Optional[Union[str, Path]] = None) -> Path:
    """
    Export a dataset as COCO JSON, optionally writing lossless PNG images.

    Annotations carry the ``point`` extension ([x, y] absolute pixels, the
    instance's fixed point) and the ``source`` provenance extension.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
        for image in ds.images:
            Image.fromarray(image.load()).save(image_dir / image.file_name)

    annotations = []
    for inst in ds.instances:
        image = ds.image(inst.image_id)
        x0, y0, x1, y1 = inst.bbox
        point = inst.point or fixed_inference_point(inst, image.width, image.height)
        annotations.append(
            {
                "id": inst.id,
                "image_id": inst.image_id,
                "category_id": ds.categories[inst.category].id,
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "area": (x1 - x0) * (y1 - y0),
                "iscrowd": 0,
                "point": [point.x * image.width, point.y * image.height],
                "source": inst.source,
            }
        )
    document = {
        "images": [
            {"id": image.id, "width": image.width, "height": image.height, "file_name": image.file_name}
            for image in ds.images
        ],
        "annotations": annotations,
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    }
    path.write_text(json.dumps(document, indent=1))
    return path


def load_coco_annotations(path: Union[str, Path], image_root: Optional[Union[str, Path]] = None) -> DetectionDataset:
    """
    Ingest a COCO-format JSON file.

    Args:
        path: COCO JSON with ``images``, ``annotations`` and ``categories``.
        image_root: Directory holding the image files; defaults to the JSON's directory.

    Returns:
        The DetectionDataset; pixels are read lazily.

    Raises:
        DatasetError: On malformed JSON, missing keys, unknown images or unknown categories.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"COCO file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed COCO JSON {path}: {e}") from e
    root = Path(image_root) if image_root is not None else path.parent

    try:
        categories = [Category(id=int(c["id"]), name=str(c["name"])) for c in document["categories"]]
        category_index = {c.id: i for i, c in enumerate(categories)}
        images = [
            ImageRecord(
                id=int(img["id"]),
                width=int(img["width"]),
                height=int(img["height"]),
                file_name=img.get("file_name", ""),
                path=root / img["file_name"] if img.get("file_name") else None,
            )
            for img in document["images"]
        ]
        sizes = {image.id: (image.width, image.height) for image in images}

        instances = []
        for ann in document["annotations"]:
            if ann["category_id"] not in category_index:
                raise DatasetError(f"Annotation {ann['id']} has unknown category {ann['category_id']}")
            if ann["image_id"] not in sizes:
                raise DatasetError(f"Annotation {ann['id']} references unknown image {ann['image_id']}")
            width, height = sizes[ann["image_id"]]
            x, y, w, h = (float(v) for v in ann["bbox"])
            bbox = (x, y, x + w, y + h)
            clamped = (
                min(max(bbox[0], 0.0), width),
                min(max(bbox[1], 0.0), height),
                min(max(bbox[2], 0.0), width),
                min(max(bbox[3], 0.0), height),
            )
            if clamped != bbox:
                core.warn(f"Annotation {ann['id']}: bbox {ann['bbox']} outside image {ann['image_id']}, clamped")
            point = None
            if ann.get("point") is not None:
                px, py = ann["point"]
                point = Point2D(float(px) / width, float(py) / height)
            instances.append(
                Instance(
                    id=int(ann["id"]),
                    image_id=int(ann["image_id"]),
                    bbox=clamped,
                    category=category_index[ann["category_id"]],
                    point=point,
                    source=ann.get("source", "box"),
                )
            )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Malformed COCO document {path}: {e}") from e

    return DetectionDataset(images=images, instances=instances, categories=categories)


# Splitting and point sampling


def split_dataset(ds: DetectionDataset, fraction: float, seed: int) -> tuple[DetectionDataset, DetectionDataset]:
    """
    Image-level split into box-labeled and point-only parts.

    floor(fraction * images) images keep their boxes; on the remainder every
    instance becomes point-only with its fixed point recorded.

    Raises:
        DatasetError: If the fraction is outside (0, 1] or the box-labeled side would be empty.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"Split fraction must be in (0, 1], got {fraction}")
    order = np.random.default_rng(seed).permutation(len(ds.images))
    num_labeled = int(math.floor(fraction * len(ds.images) + 1e-9))
    if num_labeled == 0:
        raise DatasetError(f"Fraction {fraction} of {len(ds.images)} images leaves no box-labeled images")
    labeled_ids = {ds.images[i].id for i in order[:num_labeled]}
    box_labeled = ds.subset(labeled_ids)
    rest = ds.subset(set(ds.image_ids) - labeled_ids)

    point_instances = []
    for inst in rest.instances:
        image = rest.image(inst.image_id)
        point = inst.point or fixed_inference_point(inst, image.width, image.height)
        point_instances.append(replace(inst, point=point, source="point"))
    return box_labeled, rest.with_instances(point_instances)


def sample_point_in_box(box: Box, rng: np.random.Generator) -> Point2D:
    """Uniform point inside a box; a zero-size box yields its center."""
    x0, y0, x1, y1 = box.to("xyxy").coords
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return Point2D((x0 + x1) / 2, (y0 + y1) / 2)
    return Point2D(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))


def sample_points_in_boxes(boxes: torch.Tensor, num_groups: int, rng: np.random.Generator) -> torch.Tensor:
    """(N, I, 2) uniform points inside (I, 4) center-form boxes, one set per group."""
    uv = torch.from_numpy(rng.random((num_groups, boxes.shape[0], 2))).to(boxes.dtype)
    return boxes[None, :, :2] + (uv - 0.5) * boxes[None, :, 2:]


def sample_group_prompts(
    boxes: torch.Tensor, categories: torch.Tensor, num_groups: int, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Sample N groups of point prompts for one image, group-major.

    Returns:
        (N*I, 2) points, (N*I,) categories, (N*I,) group indices and the
        (N*I, 4) target boxes aligned with them.
    """
    num_instances = boxes.shape[0]
    points = sample_points_in_boxes(boxes, num_groups, rng).reshape(-1, 2)
    groups = torch.arange(num_groups).repeat_interleave(num_instances)
    return points, categories.repeat(num_groups), groups, boxes.repeat(num_groups, 1)


def fixed_inference_point(instance: Instance, width: int, height: int) -> Point2D:
    """
    The single fixed evaluation point of an instance, normalized.

    The mask centroid when a mask exists (the nearest mask pixel if the
    centroid falls outside it), else the box center.
    """
    x0, y0, x1, y1 = instance.bbox
    mask = instance.mask
    if mask is None or not mask.any():
        return Point2D((x0 + x1) / 2 / width, (y0 + y1) / 2 / height)
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean() + 0.5, ys.mean() + 0.5
    col, row = int(math.floor(cx)), int(math.floor(cy))
    if not (0 <= row < mask.shape[0] and 0 <= col < mask.shape[1] and mask[row, col]):
        nearest = np.argmin((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2)
        cx, cy = xs[nearest] + 0.5, ys[nearest] + 0.5
    origin_x, origin_y = int(math.floor(x0)), int(math.floor(y0))
    return Point2D(float(origin_x + cx) / width, float(origin_y + cy) / height)
