"""Semantic-segmentation adaptation of a pretrained promptable model: the
encoder is kept, prompt machinery is dropped, and a convolutional decoder
predicts per-pixel classes. For volumetric data the encoder processes
slices as a batch, small depth adapters (down-projection, 3x1x1 depth
convolution, up-projection, residual) give it cross-slice context, and a
final 3D convolution fuses the per-slice decoder outputs.

Adapter up-projections start at zero and the fusion convolution at
identity, so a freshly adapted 3D model reproduces its 2D base exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import Dataset2D, Dataset3D, DatasetError, resize_to_model
from .model.checkpoint import (KIND_SEMANTIC_2D, KIND_SEMANTIC_3D, Checkpoint,
                               CheckpointFormatError, CheckpointIntegrityError,
                               model_parameters, read_checkpoint,
                               write_checkpoint)
from .model.nets import (ConvSegmentationDecoder, ImageEncoder,
                         init_parameters)
from .model.types import DimensionError, ModelConfig
from .objective import DICE_EPS, TrainSchedule

logger = logging.getLogger(__name__)

DEFAULT_ADAPTER_REDUCTION = 4


class DepthAdapter(nn.Module):
    """Token adapter giving a 2D encoder cross-slice context: features are
    down-projected by ``reduction``, rearranged into a volume, convolved
    with a 3x1x1 kernel along depth, projected back, and added residually.
    Input/output token shapes are identical."""

    def __init__(self, dim: int, reduction: int = DEFAULT_ADAPTER_REDUCTION):
        super().__init__()
        hidden = max(1, dim // reduction)
        self.down_proj = nn.Linear(dim, hidden)
        self.depth_conv = nn.Conv3d(hidden, hidden, kernel_size=(3, 1, 1),
                                    padding=(1, 0, 0))
        self.up_proj = nn.Linear(hidden, dim)

    def forward(self, x: Tensor, depth: int) -> Tensor:
        bd, h, w, c = x.shape
        b = bd // depth
        y = F.gelu(self.down_proj(x))
        y = y.reshape(b, depth, h, w, -1).permute(0, 4, 1, 2, 3)
        y = self.depth_conv(y)
        y = y.permute(0, 2, 3, 4, 1).reshape(bd, h, w, -1)
        return x + self.up_proj(y)


class AdapterPair(nn.Module):
    """Two adapters per transformer layer: one before and one after the
    attention step."""

    def __init__(self, dim: int, reduction: int):
        super().__init__()
        self.pre = DepthAdapter(dim, reduction)
        self.post = DepthAdapter(dim, reduction)


def _prepare_plane(image, size: int, dtype) -> Tensor:
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image)
                        else image, dtype=dtype)
    if x.dim() == 2:
        x = x[None].expand(3, -1, -1)
    if x.dim() != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected (H, W) or (3, H, W), got {tuple(x.shape)}")
    if x.shape[-2:] != (size, size):
        raise DimensionError(
            f"input is {tuple(x.shape[-2:])}, model expects ({size}, {size})")
    return x * 2.0 - 1.0


class SemanticModel2D(nn.Module):
    """Pretrained encoder + convolutional decoder for per-pixel classes."""

    def __init__(self, config: ModelConfig, n_classes: int, seed: int = 0):
        super().__init__()
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2 (background + classes)")
        self.config = config
        self.n_classes = n_classes
        self.image_encoder = ImageEncoder(config)
        self.semantic_decoder_2d = ConvSegmentationDecoder(config, n_classes)
        init_parameters(self, seed)

    @property
    def _dtype(self):
        return self.image_encoder.pos_embed.dtype

    def forward_batch(self, images: Sequence) -> Tensor:
        x = torch.stack([_prepare_plane(im, self.config.image_size, self._dtype)
                         for im in images])
        _, inters = self.image_encoder.forward_features(x)
        return self.semantic_decoder_2d(inters)

    def forward(self, image) -> Tensor:
        """(H, W) or (3, H, W) image -> (n_classes, H, W) logits."""
        return self.forward_batch([image])[0]


class SemanticModel3D(nn.Module):
    """Slice-batched encoder with depth adapters, per-slice decoding, and a
    3x3x3 volumetric fusion convolution."""

    def __init__(self, config: ModelConfig, n_classes: int,
                 adapter_reduction: int = DEFAULT_ADAPTER_REDUCTION,
                 seed: int = 0):
        super().__init__()
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2 (background + classes)")
        self.config = config
        self.n_classes = n_classes
        self.adapter_reduction = adapter_reduction
        self.image_encoder = ImageEncoder(config)
        self.adapters = nn.ModuleList(
            AdapterPair(config.embed_dim, adapter_reduction)
            for _ in range(config.encoder_depth))
        self.semantic_decoder_2d = ConvSegmentationDecoder(config, n_classes)
        self.fusion3d = nn.Conv3d(n_classes, n_classes, kernel_size=3,
                                  padding=1)
        init_parameters(self, seed)

    @property
    def _dtype(self):
        return self.image_encoder.pos_embed.dtype

    def encode_slices(self, volume) -> List[Tensor]:
        """Per-block adapted features for a (D, H, W) volume, the depth axis
        flattened into the encoder batch."""
        vol = np.asarray(volume) if not torch.is_tensor(volume) else volume
        if vol.ndim != 3:
            raise DimensionError(f"expected (D, H, W) volume, got {vol.shape}")
        depth = vol.shape[0]
        x = torch.stack([_prepare_plane(vol[z], self.config.image_size,
                                        self._dtype) for z in range(depth)])
        pairs = [(lambda t, p=pair: p.pre(t, depth),
                  lambda t, p=pair: p.post(t, depth))
                 for pair in self.adapters]
        _, inters = self.image_encoder.forward_features(x, adapter_pairs=pairs)
        return inters

    def forward(self, volume) -> Tensor:
        """(D, H, W) volume -> (n_classes, D, H, W) logits."""
        inters = self.encode_slices(volume)
        per_slice = self.semantic_decoder_2d(inters)      # (D, K, H, W)
        stacked = per_slice.permute(1, 0, 2, 3)[None]     # (1, K, D, H, W)
        return self.fusion3d(stacked)[0]


SemanticModel = Union[SemanticModel2D, SemanticModel3D]


# ---------------------------------------------------------------------------
# builders and persistence
# ---------------------------------------------------------------------------

def _copy_namespace(model: nn.Module, parameters: Dict[str, np.ndarray],
                    src_prefix: str, dst_prefix: str,
                    skip_prefixes: Tuple[str, ...] = (),
                    source: str = "checkpoint") -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not name.startswith(dst_prefix):
                continue
            suffix = name[len(dst_prefix):]
            if any(suffix.startswith(s) for s in skip_prefixes):
                continue
            src = src_prefix + suffix
            if src not in parameters:
                raise CheckpointIntegrityError(
                    f"{source}: missing {src} needed to initialize {name}")
            arr = parameters[src]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointIntegrityError(
                    f"{source}: {src} has shape {tuple(arr.shape)}, "
                    f"expected {tuple(param.shape)}")
            param.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)))


def _decoder_keys(ckpt: Checkpoint) -> bool:
    return any(k.startswith("segmentation_decoder.") for k in ckpt.parameters)


def build_semantic_2d(checkpoint_path, n_classes: int,
                      init_decoder: bool = False, seed: int = 0,
                      ) -> SemanticModel2D:
    """New 2D semantic model from a pretrained interactive checkpoint: the
    encoder loads pretrained weights; with ``init_decoder`` the jointly
    pretrained segmentation decoder loads too, except the final
    class-projection layer which is re-initialized for ``n_classes``."""
    ckpt = read_checkpoint(checkpoint_path)
    model = SemanticModel2D(ckpt.model_config, n_classes, seed=seed)
    _copy_namespace(model, ckpt.parameters, "image_encoder.", "image_encoder.",
                    source=str(checkpoint_path))
    if init_decoder:
        if not _decoder_keys(ckpt):
            raise CheckpointIntegrityError(
                f"{checkpoint_path}: no segmentation_decoder.* keys; cannot "
                "initialize the semantic decoder from it")
        _copy_namespace(model, ckpt.parameters, "segmentation_decoder.",
                        "semantic_decoder_2d.", skip_prefixes=("class_proj",),
                        source=str(checkpoint_path))
    return model


def build_semantic_3d(checkpoint_path, n_classes: int,
                      init_decoder: bool = False,
                      adapter_reduction: int = DEFAULT_ADAPTER_REDUCTION,
                      seed: int = 0) -> SemanticModel3D:
    """As build_semantic_2d, plus freshly initialized depth adapters
    (zeroed up-projections) and an identity-initialized fusion convolution,
    so the new volumetric model starts as the 2D model replicated across
    depth."""
    ckpt = read_checkpoint(checkpoint_path)
    model = SemanticModel3D(ckpt.model_config, n_classes,
                            adapter_reduction=adapter_reduction, seed=seed)
    _copy_namespace(model, ckpt.parameters, "image_encoder.", "image_encoder.",
                    source=str(checkpoint_path))
    if init_decoder:
        if not _decoder_keys(ckpt):
            raise CheckpointIntegrityError(
                f"{checkpoint_path}: no segmentation_decoder.* keys; cannot "
                "initialize the semantic decoder from it")
        _copy_namespace(model, ckpt.parameters, "segmentation_decoder.",
                        "semantic_decoder_2d.", skip_prefixes=("class_proj",),
                        source=str(checkpoint_path))
    return model


def save_semantic_checkpoint(model: SemanticModel, path) -> None:
    header = dict(model.config.to_header())
    header["n_classes"] = model.n_classes
    if isinstance(model, SemanticModel3D):
        header["kind"] = KIND_SEMANTIC_3D
        header["adapter_reduction"] = model.adapter_reduction
    else:
        header["kind"] = KIND_SEMANTIC_2D
    write_checkpoint(path, header, model_parameters(model))


def load_semantic_checkpoint(path) -> SemanticModel:
    from .model.checkpoint import load_parameters_into

    ckpt = read_checkpoint(path)
    if ckpt.kind == KIND_SEMANTIC_2D:
        model: SemanticModel = SemanticModel2D(ckpt.model_config,
                                               int(ckpt.header["n_classes"]))
    elif ckpt.kind == KIND_SEMANTIC_3D:
        model = SemanticModel3D(ckpt.model_config,
                                int(ckpt.header["n_classes"]),
                                int(ckpt.header.get("adapter_reduction",
                                                    DEFAULT_ADAPTER_REDUCTION)))
    else:
        raise CheckpointFormatError(
            f"{path}: kind {ckpt.kind!r} is not a semantic checkpoint")
    load_parameters_into(model, ckpt.parameters, source=str(path))
    return model


# ---------------------------------------------------------------------------
# loss, training, evaluation
# ---------------------------------------------------------------------------

def semantic_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Cross entropy plus soft Dice (equal weights), the Dice averaged over
    the foreground classes. logits (K, ...), target integer (...)."""
    n_classes = logits.shape[0]
    ce = F.cross_entropy(logits[None], target[None].long())
    probs = torch.softmax(logits, dim=0)
    target_t = target.long()
    dices = []
    for c in range(1, n_classes):
        p = probs[c]
        t = (target_t == c).to(p.dtype)
        inter = (p * t).sum()
        dices.append(1.0 - (2.0 * inter + DICE_EPS)
                     / (p.sum() + t.sum() + DICE_EPS))
    return ce + torch.stack(dices).mean()


def _semantic_target(item, n_classes: int) -> np.ndarray:
    target = item.semantic if item.semantic is not None else item.labels
    name = getattr(item, "sample_id", None) or getattr(item, "volume_id", "?")
    if target is None:
        raise DatasetError(f"sample {name}: no semantic labels")
    if target.min() < 0 or target.max() >= n_classes:
        raise DatasetError(
            f"sample {name}: class ids span [{target.min()}, {target.max()}], "
            f"expected [0, {n_classes})")
    return target


def _model_space(model: SemanticModel, item):
    """(input array, integer target, inverse-map) at the model input size."""
    size = model.config.image_size
    if isinstance(model, SemanticModel3D):
        target = _semantic_target(item, model.n_classes)
        if item.voxels.shape[-2:] == (size, size):
            return item.voxels, target, None
        planes, labels, info = [], [], None
        for z in range(item.voxels.shape[0]):
            img, lab, info = resize_to_model(item.voxels[z], target[z], size)
            planes.append(img)
            labels.append(lab)
        return np.stack(planes), np.stack(labels), info
    target = _semantic_target(item, model.n_classes)
    if item.spatial_shape == (size, size):
        return item.image, target, None
    return resize_to_model(item.image, target, size)


def foreground_dice(prediction: np.ndarray, target: np.ndarray,
                    n_classes: int) -> float:
    """Mean Dice over foreground classes (absent-in-both classes skipped)."""
    scores = []
    for c in range(1, n_classes):
        p = prediction == c
        t = target == c
        denom = p.sum() + t.sum()
        if denom == 0:
            continue
        scores.append(2.0 * np.count_nonzero(p & t) / denom)
    return float(np.mean(scores)) if scores else 1.0


@dataclass
class SemanticReport:
    model_id: str
    dataset_id: str
    n_classes: int
    per_class: Dict[int, float] = field(default_factory=dict)
    mean_foreground: float = 0.0

    def to_csv(self) -> str:
        lines = ["class,dice"]
        lines += [f"{c},{self.per_class[c]!r}" for c in sorted(self.per_class)]
        lines.append(f"mean_foreground,{self.mean_foreground!r}")
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps(
            {"model": self.model_id, "dataset": self.dataset_id,
             "n_classes": self.n_classes,
             "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
             "mean_foreground_dice": self.mean_foreground},
            indent=2, sort_keys=True) + "\n"


def _predict_classes(model: SemanticModel, item) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax prediction and the integer target, both in original geometry."""
    inputs, target, info = _model_space(model, item)
    with torch.no_grad():
        logits = model(inputs)
    pred = logits.argmax(dim=0).cpu().numpy().astype(np.int32)
    if info is not None:
        original = _semantic_target(item, model.n_classes)
        if pred.ndim == 3:
            pred = np.stack([info.inverse_mask(p) for p in pred])
        else:
            pred = info.inverse_mask(pred)
        return pred, original
    return pred, target


def evaluate_semantic(model: SemanticModel, dataset,
                      split: Optional[str] = None,
                      model_id: str = "model") -> SemanticReport:
    """Per-class Dice of argmax predictions, aggregated over the split with
    global pixel counts (micro average)."""
    items = (dataset.split_samples(split) if isinstance(dataset, Dataset2D)
             else dataset.split_volumes(split)) if split else (
        dataset.samples if isinstance(dataset, Dataset2D) else dataset.volumes)
    inter = np.zeros(model.n_classes, dtype=np.int64)
    size = np.zeros(model.n_classes, dtype=np.int64)
    for item in items:
        pred, target = _predict_classes(model, item)
        for c in range(model.n_classes):
            p = pred == c
            t = target == c
            inter[c] += np.count_nonzero(p & t)
            size[c] += p.sum() + t.sum()
    report = SemanticReport(model_id=model_id, dataset_id=dataset.name,
                            n_classes=model.n_classes)
    fg = []
    for c in range(model.n_classes):
        score = 1.0 if size[c] == 0 else 2.0 * inter[c] / size[c]
        report.per_class[c] = float(score)
        if c > 0 and size[c] > 0:
            fg.append(score)
    report.mean_foreground = float(np.mean(fg)) if fg else 1.0
    return report


@dataclass
class SemanticTrainResult:
    best_path: Path
    latest_path: Path
    metrics_path: Path
    best_val_dice: Optional[float]


def train_semantic(model: SemanticModel, dataset, schedule: TrainSchedule,
                   out_dir) -> SemanticTrainResult:
    """Minimize CE + Dice on the train split; the checkpoint with the best
    validation foreground Dice is kept alongside the latest one."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.pfit"
    latest_path = out_dir / "latest.pfit"
    metrics_path = out_dir / "metrics.csv"

    is_3d = isinstance(model, SemanticModel3D)
    if is_3d != isinstance(dataset, Dataset3D):
        raise DatasetError("model and dataset dimensionality do not match")
    items = dataset.volumes if is_3d else dataset.samples
    train_items = [s for s in items if s.split == "train"] or list(items)
    val_items = [s for s in items if s.split == "val"]

    optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.lr,
                                  weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    iterations_per_epoch = max(1, len(train_items) // max(1, schedule.batch_size))
    order = rng.permutation(len(train_items))
    cursor = 0
    best_val: Optional[float] = None
    rows = ["iteration,epoch,lr,train_loss,val_dice"]

    def _val_dice() -> Optional[float]:
        if not val_items:
            return None
        scores = []
        for item in val_items:
            pred, target = _predict_classes(model, item)
            scores.append(foreground_dice(pred, target, model.n_classes))
        return float(np.mean(scores))

    for iteration in range(schedule.max_iterations):
        epoch = iteration // iterations_per_epoch
        if iteration and iteration % iterations_per_epoch == 0:
            order = rng.permutation(len(train_items))
            cursor = 0
        lr = schedule.lr * (schedule.lr_decay ** epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = [train_items[int(i)]
                 for i in order[cursor:cursor + schedule.batch_size]]
        cursor += schedule.batch_size

        losses = []
        for item in batch:
            inputs, target, _info = _model_space(model, item)
            logits = model(inputs)
            losses.append(semantic_loss(logits, torch.as_tensor(target)))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite semantic loss at "
                                     f"iteration {iteration + 1}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        val_dice: Optional[float] = None
        at_val = (schedule.val_interval > 0
                  and (iteration + 1) % schedule.val_interval == 0)
        if at_val or iteration + 1 == schedule.max_iterations:
            val_dice = _val_dice()
            if val_dice is not None and (best_val is None or val_dice > best_val):
                best_val = val_dice
                save_semantic_checkpoint(model, best_path)
            save_semantic_checkpoint(model, latest_path)
            metrics_path.write_text("\n".join(rows) + "\n")
        rows.append(",".join([
            str(iteration + 1), str(epoch), repr(lr),
            repr(float(loss.detach())),
            "" if val_dice is None else repr(val_dice)]))

    if not latest_path.is_file():
        save_semantic_checkpoint(model, latest_path)
    if not best_path.is_file():
        save_semantic_checkpoint(model, best_path)
    metrics_path.write_text("\n".join(rows) + "\n")
    return SemanticTrainResult(best_path=best_path, latest_path=latest_path,
                               metrics_path=metrics_path, best_val_dice=best_val)
