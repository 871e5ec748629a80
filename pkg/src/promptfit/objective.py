"""The interactive training objective: per ground-truth mask, an initial
box-or-point prompt followed by simulated correction rounds, with Dice mask
losses and L2 quality-score regression accumulated over every round and
averaged into a single backward pass. Includes the named strategy presets
and the full training loop.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import prompts as prompt_ops
from .model.checkpoint import save_checkpoint
from .model.types import DimensionError, binary_iou

logger = logging.getLogger(__name__)

DICE_EPS = 1e-7


@dataclass(frozen=True)
class ObjectiveConfig:
    """Hyperparameters of one training iteration: number of masks sampled
    per image, correction rounds per mask, the box-vs-point and mask-prompt
    probabilities, and whether the segmentation decoder is jointly
    pretrained on the union of all target masks."""

    n_obj: int = 5
    n_steps: int = 0
    p_box: float = 0.5
    p_mask: float = 0.0
    e_sem: bool = False
    mask_loss: str = "dice"
    iou_loss: str = "l2"
    box_distortion: float = 0.05

    def __post_init__(self):
        if self.n_obj < 1:
            raise ValueError("n_obj must be >= 1")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        for name, p in (("p_box", self.p_box), ("p_mask", self.p_mask)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.mask_loss not in ("dice", "dice_ce"):
            raise ValueError(f"unknown mask_loss {self.mask_loss!r}")
        if self.iou_loss != "l2":
            raise ValueError("iou_loss is fixed to l2")
        if self.box_distortion < 0:
            raise ValueError("box_distortion must be >= 0")


PRESETS: Dict[str, ObjectiveConfig] = {
    "medsam": ObjectiveConfig(n_obj=5, n_steps=0, p_box=1.0, p_mask=0.0),
    "simpleft": ObjectiveConfig(n_obj=5, n_steps=0, p_box=0.5, p_mask=0.0),
    "medicosam": ObjectiveConfig(n_obj=5, n_steps=8, p_box=0.5, p_mask=0.0),
    "medicosam_full": ObjectiveConfig(n_obj=5, n_steps=8, p_box=0.5,
                                      p_mask=0.5, e_sem=True),
}


def preset(name: str, **overrides) -> ObjectiveConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; options: {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 1e-4
    max_iterations: int = 2000
    batch_size: int = 4
    val_interval: int = 200
    lr_decay: float = 0.9
    weight_decay: float = 0.01
    seed: int = 0


# Hyperparameters of the full-scale training runs, recorded as constants;
# desk-scale work uses the TrainSchedule defaults above.
PAPER_SCHEDULE = TrainSchedule(lr=1e-5, max_iterations=300_000, batch_size=7,
                               lr_decay=0.9)


@dataclass
class LossRecord:
    """Losses of one iteration. ``per_step`` lists the accumulated
    (mask_loss, iou_loss) pairs in the order they entered the loss list;
    ``total`` is the arithmetic mean over all accumulated scalars."""

    mask_loss: float = 0.0
    iou_loss: float = 0.0
    sem_loss: Optional[float] = None
    total: float = 0.0
    per_step: List[Tuple[float, float]] = field(default_factory=list)
    skipped_samples: int = 0
    n_masks: int = 0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def dice_loss(pred, target, eps: float = DICE_EPS):
    """Soft Dice loss 1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps) for a
    probability map against a binary target. Differentiable in ``pred``."""
    pred_t = pred if torch.is_tensor(pred) else torch.as_tensor(
        np.asarray(pred, dtype=np.float64))
    target_t = torch.as_tensor(np.asarray(target) if not torch.is_tensor(target)
                               else target).to(pred_t.dtype)
    if pred_t.shape != target_t.shape:
        raise DimensionError(
            f"shape mismatch: pred {tuple(pred_t.shape)} vs target "
            f"{tuple(target_t.shape)}")
    inter = (pred_t * target_t).sum()
    return 1.0 - (2.0 * inter + eps) / (pred_t.sum() + target_t.sum() + eps)


def _mask_loss(probs: torch.Tensor, target: torch.Tensor, kind: str):
    loss = dice_loss(probs, target)
    if kind == "dice_ce":
        loss = loss + torch.nn.functional.binary_cross_entropy(
            probs.clamp(1e-6, 1.0 - 1e-6), target)
    return loss


def iou_regression_loss(predicted_iou, pred_mask, target):
    """Squared error between the predicted quality score and the actual
    intersection-over-union of the binarized prediction."""
    actual = binary_iou(np.asarray(pred_mask) if not torch.is_tensor(pred_mask)
                        else pred_mask.detach().cpu().numpy(),
                        np.asarray(target) if not torch.is_tensor(target)
                        else target.detach().cpu().numpy())
    if torch.is_tensor(predicted_iou):
        return (predicted_iou - actual) ** 2
    return float((predicted_iou - actual) ** 2)


# ---------------------------------------------------------------------------
# one training iteration
# ---------------------------------------------------------------------------

def _select_for_training(logits: torch.Tensor, targets: torch.Tensor,
                         ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Vectorized training-time candidate selection: highest actual IOU of
    the binarized candidates against the target, ties to the lowest index.
    logits (G, K, H, W), targets (G, H, W) -> (indices (G,), ious (G,))."""
    with torch.no_grad():
        bins = logits > 0
        tb = targets.bool()[:, None]
        inter = (bins & tb).sum(dim=(2, 3)).double()
        union = (bins | tb).sum(dim=(2, 3)).double()
        iou = torch.where(union > 0, inter / union.clamp(min=1.0),
                          torch.ones_like(inter))
        sel = iou.argmax(dim=1)
        actual = iou.gather(1, sel[:, None])[:, 0]
    return sel, actual


class _MaskTask:
    """Per-(image, mask) state carried through the correction rounds."""

    __slots__ = ("embedding", "target", "target_t", "prompt_list", "prev_logits")

    def __init__(self, embedding, target: np.ndarray):
        self.embedding = embedding
        self.target = target.astype(bool)
        self.target_t: Optional[torch.Tensor] = None
        self.prompt_list: List[prompt_ops.Prompt] = []
        self.prev_logits: Optional[torch.Tensor] = None


def _choose_instances(ids: List[int], n_obj: int,
                      rng: np.random.Generator) -> List[int]:
    # with replacement once the image runs out of distinct masks, so every
    # image contributes the same number of loss terms
    if len(ids) >= n_obj:
        picked = rng.choice(len(ids), size=n_obj, replace=False)
        return [ids[int(i)] for i in picked]
    chosen = list(ids)
    while len(chosen) < n_obj:
        chosen.append(ids[int(rng.integers(len(ids)))])
    return chosen


def compute_objective_loss(model, batch: Sequence, config: ObjectiveConfig,
                           rng: np.random.Generator,
                           ) -> Tuple[Optional[torch.Tensor], LossRecord]:
    """Forward pass of one training iteration; returns the scalar loss (mean
    over every accumulated entry) and its breakdown. ``None`` loss when the
    whole batch lacks instance masks."""
    record = LossRecord()
    usable, all_ids = [], []
    for sample in batch:
        ids = sample.instance_ids()
        if not ids:
            logger.warning("sample %s has no instance masks; skipped",
                           getattr(sample, "sample_id", "?"))
            record.skipped_samples += 1
            continue
        usable.append(sample)
        all_ids.append(ids)
    if not usable:
        return None, record

    if hasattr(model, "encode_image_batch"):
        embeddings = model.encode_image_batch([s.image for s in usable])
    else:
        embeddings = [model.encode_image(s.image) for s in usable]

    tasks: List[_MaskTask] = []
    for sample, ids, embedding in zip(usable, all_ids, embeddings):
        for instance_id in _choose_instances(ids, config.n_obj, rng):
            task = _MaskTask(embedding, sample.instance_mask(instance_id))
            if rng.random() < config.p_box:
                task.prompt_list.append(prompt_ops.box_from_mask(
                    task.target, distortion=config.box_distortion, rng=rng))
            else:
                task.prompt_list.append(prompt_ops.sample_point(task.target, rng))
            tasks.append(task)
    record.n_masks = len(tasks)

    losses: List[torch.Tensor] = []
    mask_entries: List[float] = []
    iou_entries: List[float] = []

    for step in range(config.n_steps + 1):
        if step > 0:
            for task in tasks:
                prediction = task.prev_logits.detach().cpu().numpy() > 0
                positive, negative = prompt_ops.sample_correction(
                    prediction, task.target, rng)
                if positive is not None:
                    task.prompt_list.append(positive)
                if negative is not None:
                    task.prompt_list.append(negative)
                u_mask = rng.random()
                task.prompt_list = [p for p in task.prompt_list
                                    if p.kind is not prompt_ops.PromptKind.MASK]
                if u_mask < config.p_mask:
                    task.prompt_list.append(
                        prompt_ops.downsample_mask(task.prev_logits))

        multimask = [len(t.prompt_list) == 1 and t.prompt_list[0].is_point
                     for t in tasks]
        if hasattr(model, "predict_masks_batch"):
            outputs = model.predict_masks_batch(
                [t.embedding for t in tasks],
                [t.prompt_list for t in tasks], multimask)
        else:
            outputs = [model.predict_masks(t.embedding, t.prompt_list, mm)
                       for t, mm in zip(tasks, multimask)]

        step_pairs: List[Optional[Tuple[float, float]]] = [None] * len(tasks)
        for flag in (False, True):
            idx = [i for i, m in enumerate(multimask) if m == flag]
            if not idx:
                continue
            logits = torch.stack([outputs[i].mask_logits for i in idx])
            scores = torch.stack([outputs[i].iou_scores for i in idx])
            for i in idx:
                if tasks[i].target_t is None:
                    tasks[i].target_t = torch.as_tensor(
                        tasks[i].target.astype(np.float32)).to(logits.dtype)
            targets = torch.stack([tasks[i].target_t for i in idx])
            sel, actual = _select_for_training(logits, targets)
            rows = torch.arange(len(idx))
            sel_logits = logits[rows, sel]
            probs = torch.sigmoid(sel_logits)
            inter = (probs * targets).sum(dim=(1, 2))
            dice_vec = 1.0 - ((2.0 * inter + DICE_EPS)
                              / (probs.sum(dim=(1, 2)) + targets.sum(dim=(1, 2))
                                 + DICE_EPS))
            if config.mask_loss == "dice_ce":
                dice_vec = dice_vec + torch.nn.functional.binary_cross_entropy(
                    probs.clamp(1e-6, 1.0 - 1e-6), targets,
                    reduction="none").mean(dim=(1, 2))
            iou_vec = (scores[rows, sel] - actual.to(scores.dtype)) ** 2
            losses.extend([dice_vec, iou_vec])
            dice_vals = dice_vec.detach().tolist()
            iou_vals = iou_vec.detach().tolist()
            for j, i in enumerate(idx):
                step_pairs[i] = (float(dice_vals[j]), float(iou_vals[j]))
                tasks[i].prev_logits = sel_logits[j]
        for pair in step_pairs:
            assert pair is not None
            mask_entries.append(pair[0])
            iou_entries.append(pair[1])
            record.per_step.append(pair)

    if config.e_sem:
        sem_terms = []
        for sample, embedding in zip(usable, embeddings):
            union = torch.as_tensor(
                (sample.labels > 0).astype(np.float32))
            sem_logits = model.predict_semantic(embedding)[0]
            sem_terms.append(_mask_loss(torch.sigmoid(sem_logits),
                                        union.to(sem_logits.dtype),
                                        config.mask_loss))
        sem_entry = torch.stack(sem_terms).mean()
        losses.append(sem_entry.reshape(1))
        record.sem_loss = float(sem_entry.detach())

    total = torch.cat([v.reshape(-1) for v in losses]).mean()
    record.total = float(total.detach())
    record.mask_loss = float(np.mean(mask_entries)) if mask_entries else 0.0
    record.iou_loss = float(np.mean(iou_entries)) if iou_entries else 0.0
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite training loss: mask={record.mask_loss} "
            f"iou={record.iou_loss} sem={record.sem_loss}")
    return total, record


def train_iteration(model, batch: Sequence, config: ObjectiveConfig,
                    rng: np.random.Generator, optimizer) -> LossRecord:
    """One full iteration: accumulate losses over all prompts and correction
    rounds, average, backpropagate once, apply one optimizer update."""
    total, record = compute_objective_loss(model, batch, config, rng)
    if total is None:
        return record
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return record


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_path: Path
    latest_path: Path
    metrics_path: Path
    best_val: Optional[float]
    iterations: int


METRICS_COLUMNS = ("iteration", "epoch", "lr", "train_mask_loss",
                   "train_iou_loss", "train_sem_loss", "val_total")


def validation_loss(model, samples: Sequence, config: ObjectiveConfig,
                    batch_size: int, seed: int) -> float:
    """Mean objective total over the validation samples (no update)."""
    rng = np.random.default_rng([seed, 0x5EED])
    totals = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            total, rec = compute_objective_loss(
                model, samples[start:start + batch_size], config, rng)
            if total is not None:
                totals.append(rec.total)
    return float(np.mean(totals)) if totals else math.nan


def _format_float(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def train(model, dataset, config: ObjectiveConfig, schedule: TrainSchedule,
          out_dir, resume: bool = False) -> TrainResult:
    """Train up to ``schedule.max_iterations``: epoch-shuffled batches, the
    learning rate decaying by ``lr_decay`` at every epoch boundary,
    validation (and best/latest checkpoints) every ``val_interval``
    iterations, metrics appended to ``metrics.csv``.

    ``resume=True`` restarts from ``latest.pfit`` plus the saved iteration
    counter and RNG state; optimizer moments start fresh.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.pfit"
    latest_path = out_dir / "latest.pfit"
    metrics_path = out_dir / "metrics.csv"
    state_path = out_dir / "train_state.json"

    train_samples = dataset.split_samples("train")
    val_samples = dataset.split_samples("val")
    if not train_samples:
        if any(s.split for s in dataset.samples):
            raise ValueError("dataset has split assignments but no train split")
        train_samples = list(dataset.samples)
    if not train_samples:
        raise ValueError("no training samples")

    rng = np.random.default_rng(schedule.seed)
    start_iteration = 0
    best_val: Optional[float] = None
    if resume and state_path.is_file():
        from .model.checkpoint import load_parameters_into, read_checkpoint

        state = json.loads(state_path.read_text())
        ckpt = read_checkpoint(latest_path)
        load_parameters_into(model, ckpt.parameters, source=str(latest_path))
        start_iteration = int(state["iteration"])
        best_val = state.get("best_val")
        rng.bit_generator.state = state["rng_state"]
        logger.info("resumed from %s at iteration %d", latest_path, start_iteration)

    optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.lr,
                                  weight_decay=schedule.weight_decay)
    iterations_per_epoch = max(1, len(train_samples) // schedule.batch_size)

    rows: List[str] = []
    if start_iteration == 0 or not metrics_path.is_file():
        rows.append(",".join(METRICS_COLUMNS))
    else:
        rows.extend(metrics_path.read_text().rstrip("\n").splitlines())

    order = rng.permutation(len(train_samples))
    cursor = (start_iteration % iterations_per_epoch) * schedule.batch_size

    def _save_state(iteration: int) -> None:
        save_checkpoint(model, latest_path)
        state_path.write_text(json.dumps(
            {"iteration": iteration, "best_val": best_val,
             "rng_state": rng.bit_generator.state}, default=int) + "\n")
        metrics_path.write_text("\n".join(rows) + "\n")

    for iteration in range(start_iteration, schedule.max_iterations):
        epoch = iteration // iterations_per_epoch
        if iteration % iterations_per_epoch == 0 and iteration > start_iteration:
            order = rng.permutation(len(train_samples))
            cursor = 0
        lr = schedule.lr * (schedule.lr_decay ** epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch = [train_samples[int(i)]
                 for i in order[cursor:cursor + schedule.batch_size]]
        cursor += schedule.batch_size
        record = train_iteration(model, batch, config, rng, optimizer)

        val_total: Optional[float] = None
        is_val_point = (schedule.val_interval > 0
                        and (iteration + 1) % schedule.val_interval == 0)
        if is_val_point or iteration + 1 == schedule.max_iterations:
            if val_samples:
                val_total = validation_loss(model, val_samples, config,
                                            schedule.batch_size,
                                            seed=schedule.seed + iteration + 1)
                if best_val is None or val_total < best_val:
                    best_val = val_total
                    save_checkpoint(model, best_path)
            _save_state(iteration + 1)

        rows.append(",".join([
            str(iteration + 1), str(epoch), repr(lr),
            _format_float(record.mask_loss), _format_float(record.iou_loss),
            _format_float(record.sem_loss), _format_float(val_total)]))

    if schedule.max_iterations == 0 or not latest_path.is_file():
        _save_state(schedule.max_iterations)
    if not best_path.is_file():
        save_checkpoint(model, best_path)
    metrics_path.write_text("\n".join(rows) + "\n")
    return TrainResult(best_path=best_path, latest_path=latest_path,
                       metrics_path=metrics_path, best_val=best_val,
                       iterations=schedule.max_iterations)
