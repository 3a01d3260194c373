"""Train engine - Deterministic teacher and student training loops, learning-rate schedule and resumption."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from actions import core
from torch import nn

from config import TrainConfig
from detection_data import DetectionDataset, sample_group_prompts
from functions import format_float, seed_everything
from network import LossTerms, PointToBoxTeacher, StagePrediction, load_checkpoint, save_checkpoint, teacher_loss
from student import MiniDetectionStudent, student_loss


class TrainingError(Exception):
    """Custom exception for training failures such as divergence."""

    pass


LOG_COLUMNS = ["step", "epoch", "lr", "loss", "l1", "giou"]


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    l1: float
    giou: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), f"{self.lr:.10g}"] + [
            format_float(v, 8) for v in (self.loss, self.l1, self.giou)
        ]


@dataclass
class TrainResult:
    """Outcome of a training run: last checkpoint, loss log and counters."""

    checkpoint: Optional[Path]
    log_path: Optional[Path]
    records: list[LossRecord] = field(default_factory=list)
    step: int = 0
    epoch: int = 0

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def lr_at_step(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_iters`` steps, then the base rate, decayed from ``decay_epoch`` on."""
    lr = cfg.lr * (cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0)
    if cfg.warmup_iters > 0 and step < cfg.warmup_iters:
        lr *= step / cfg.warmup_iters
    return lr


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def epoch_order(num_items: int, seed: int, epoch: int) -> np.ndarray:
    """Seed-determined shuffle of the training items for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(num_items)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Point-sampling generator of one optimization step, independent of resumption."""
    return np.random.default_rng([seed, step, 7])


def teacher_batch_loss(
    model: PointToBoxTeacher,
    dataset: DetectionDataset,
    image_ids: Sequence[int],
    groups: int,
    rng: np.random.Generator,
    deep_supervision: bool = True,
) -> LossTerms:
    """
    Multi-point loss of one batch.

    For every image N fresh points are drawn inside each box, one group of
    point-queries per draw; the loss is normalized by instances x groups over
    the whole batch.
    """
    dtype = next(model.parameters()).dtype
    images = torch.stack([dataset.image_tensor(i) for i in image_ids]).to(dtype)
    pyramids = model.encode_images(images)
    per_image, targets = [], []
    for image_id, pyramid in zip(image_ids, pyramids):
        boxes, categories = dataset.box_targets(image_id, dtype)
        points, prompt_categories, prompt_groups, prompt_targets = sample_group_prompts(boxes, categories, groups, rng)
        per_image.append(model.decode(pyramid, points, prompt_categories, prompt_groups))
        targets.append(prompt_targets)
    return teacher_loss(StagePrediction.concat(per_image), torch.cat(targets), deep_supervision)


def student_batch_loss(model: MiniDetectionStudent, dataset: DetectionDataset, image_ids: Sequence[int]) -> LossTerms:
    """Mean student loss over the images of a batch; box and pseudo-box targets are treated alike."""
    dtype = next(model.parameters()).dtype
    images = torch.stack([dataset.image_tensor(i) for i in image_ids]).to(dtype)
    total, ce, box = 0.0, 0.0, 0.0
    for image_id, output in zip(image_ids, model.forward_images(images)):
        boxes, labels = dataset.box_targets(image_id, dtype)
        loss = student_loss(output, boxes, labels, model.config)
        total = total + loss.total
        ce += loss.classification
        box += loss.box
    n = len(image_ids)
    # l1/giou columns hold the classification and box terms for the student
    return LossTerms(total=total / n, l1=ce / n, giou=box / n)


def _write_log(path: Path, records: list[LossRecord], append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for record in records:
            writer.writerow(record.row())


def fit(
    model: nn.Module,
    image_ids: Sequence[int],
    cfg: TrainConfig,
    batch_loss: Callable[[list[int], int], LossTerms],
    out_dir: Optional[Union[str, Path]] = None,
    name: str = "model",
    model_config=None,
    max_steps: Optional[int] = None,
    resume: bool = False,
) -> TrainResult:
    """
    Generic deterministic optimization loop.

    Args:
        model: Module to train in place.
        image_ids: Training image ids; the epoch order is a seeded shuffle of them.
        cfg: Schedule and optimizer settings.
        batch_loss: Callable (batch image ids, step) -> LossTerms.
        out_dir: Where ``<name>.pt`` and ``<name>_loss.csv`` are written at the end and every
            ``cfg.checkpoint_every`` steps; nothing is written when None.
        name: Artifact stem.
        model_config: Config echoed into the checkpoint.
        max_steps: Stop after this many steps in total.
        resume: Continue from ``<name>.pt`` when it exists.

    Returns:
        TrainResult with the loss records of this invocation.

    Raises:
        TrainingError: On an empty dataset or a non-finite loss.
    """
    if not image_ids:
        raise TrainingError(f"Cannot train {name} on an empty dataset")
    seed_everything(cfg.seed)
    optimizer = build_optimizer(model, cfg)
    iters_per_epoch = cfg.iterations_per_epoch(len(image_ids))
    total_steps = cfg.epochs * iters_per_epoch
    max_steps = max_steps if max_steps is not None else cfg.max_steps
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    out_path = Path(out_dir) if out_dir is not None else None
    checkpoint_path = out_path / f"{name}.pt" if out_path is not None else None
    log_path = out_path / f"{name}_loss.csv" if out_path is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    step = 0
    if resume and checkpoint_path is not None and checkpoint_path.exists():
        state = load_checkpoint(checkpoint_path, model, optimizer, restore_rng=True)
        step = int(state["step"])
        core.info(f"Resuming {name} from step {step}")

    records: list[LossRecord] = []
    unsaved: list[LossRecord] = []
    append_log = resume

    def save(step: int, epoch: int, complete: bool) -> None:
        nonlocal append_log
        save_checkpoint(
            checkpoint_path, model, model_config, optimizer, epoch=epoch, step=step, extra={"complete": complete}
        )
        _write_log(log_path, unsaved, append=append_log)
        core.debug(f"Saved {name} at step {step} to {checkpoint_path}")
        unsaved.clear()
        append_log = True

    model.train()
    epoch = step // iters_per_epoch
    while step < total_steps:
        epoch = step // iters_per_epoch
        order = epoch_order(len(image_ids), cfg.seed, epoch)
        start = (step % iters_per_epoch) * cfg.batch_size
        batch = [image_ids[i] for i in order[start : start + cfg.batch_size]]

        lr = lr_at_step(step, epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        terms = batch_loss(batch, step)
        if not torch.isfinite(terms.total):
            raise TrainingError(
                f"Non-finite {name} loss at step {step} (epoch {epoch}, lr {lr:.3g}): "
                f"l1={terms.l1}, giou={terms.giou}, images={batch}"
            )
        optimizer.zero_grad()
        terms.total.backward()
        if cfg.clip_max_norm > 0:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_max_norm)
        optimizer.step()

        record = LossRecord(step, epoch, lr, float(terms.total.detach()), terms.l1, terms.giou)
        records.append(record)
        unsaved.append(record)
        if step % cfg.log_every == 0:
            core.info(f"{name} step {step} epoch {epoch} lr {lr:.2e} loss {record.loss:.4f}")
        else:
            core.debug(f"{name} step {step} loss {record.loss:.6f}")
        step += 1
        periodic = cfg.checkpoint_every and step % cfg.checkpoint_every == 0
        if checkpoint_path is not None and periodic and step < total_steps:
            save(step, epoch, complete=False)

    if checkpoint_path is not None:
        save(step, epoch, complete=True)
    return TrainResult(checkpoint=checkpoint_path, log_path=log_path, records=records, step=step, epoch=epoch)


def train_teacher(
    model: PointToBoxTeacher,
    dataset: DetectionDataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    resume: bool = False,
    name: str = "teacher",
) -> TrainResult:
    """
    Train the Point-to-Box teacher on box-labeled images with multi-point groups.

    Points are re-sampled at every step from a generator keyed by (seed, step),
    so runs and resumed runs see identical prompts.
    """
    image_ids = [i for i in dataset.image_ids if dataset.instances_of(i)]
    if model.config.groups != cfg.groups:
        core.warn(f"Teacher config groups={model.config.groups} differs from training groups={cfg.groups}")

    def batch_loss(batch: list[int], step: int) -> LossTerms:
        return teacher_batch_loss(
            model, dataset, batch, cfg.groups, step_rng(cfg.seed, step), model.config.deep_supervision
        )

    with core.group(f"Training {name} ({len(image_ids)} images, N={cfg.groups})"):
        return fit(model, image_ids, cfg, batch_loss, out_dir, name, model.config, max_steps, resume)


def train_student(
    model: MiniDetectionStudent,
    dataset: DetectionDataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    resume: bool = False,
    name: str = "student",
) -> TrainResult:
    """Train the student on box-labeled and pseudo-labeled images alike."""
    counts = dataset.source_counts()
    if counts["point"]:
        raise TrainingError(f"Student training data holds {counts['point']} point-only instances without boxes")
    core.info(f"{name}: {counts['box']} box instances, {counts['pseudo']} pseudo instances")

    def batch_loss(batch: list[int], step: int) -> LossTerms:
        return student_batch_loss(model, dataset, batch)

    with core.group(f"Training {name} ({len(dataset)} images)"):
        return fit(model, dataset.image_ids, cfg, batch_loss, out_dir, name, model.config, max_steps, resume)


def median_trend(losses: Sequence[float], window: int = 50) -> tuple[float, float]:
    """Median of the first and last ``window`` losses."""
    window = max(1, min(window, math.ceil(len(losses) / 2)))
    return float(np.median(losses[:window])), float(np.median(losses[-window:]))
