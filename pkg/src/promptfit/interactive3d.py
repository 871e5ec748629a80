"""Interactive volumetric segmentation by prompt propagation: segment the
seeded slices, then sweep outward along the depth axis, deriving prompts for
each slice from the previous slice's mask until the object ends, the volume
boundary is reached, or the slice-to-slice IOU drops below the stopping
threshold. Includes the prompt-derivation strategies and the validation
grid search over them.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import prompts as prompt_ops
from .data import Dataset3D, Volume, resize_to_model
from .interactive2d import dice
from .model.types import DimensionError, binary_iou, select_best_mask

DERIVE_OPTIONS = ("center_point", "multi_points", "box", "box_and_mask",
                  "points_and_mask", "points_and_box")
MULTIPOINT_OPTIONS = ("multi_points", "points_and_mask", "points_and_box")

# saturated-confidence logit used when a binary mask becomes a mask prompt
MASK_PROMPT_LOGIT = 8.0


@dataclass(frozen=True)
class PropagationStrategy:
    derive: str = "box_and_mask"
    stop_iou: float = 0.7
    n_points: int = 1

    def __post_init__(self):
        if self.derive not in DERIVE_OPTIONS:
            raise ValueError(f"unknown derive option {self.derive!r}; "
                             f"choices: {DERIVE_OPTIONS}")
        if not 0.0 <= self.stop_iou <= 1.0:
            raise ValueError("stop_iou must be in [0, 1]")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    def to_string(self) -> str:
        return f"derive={self.derive},stop_iou={self.stop_iou},n_points={self.n_points}"

    @classmethod
    def from_string(cls, text: str) -> "PropagationStrategy":
        kwargs = {}
        for part in text.split(","):
            key, _, value = part.strip().partition("=")
            if key == "derive":
                kwargs["derive"] = value
            elif key == "stop_iou":
                kwargs["stop_iou"] = float(value)
            elif key == "n_points":
                kwargs["n_points"] = int(value)
            elif key:
                raise ValueError(f"unknown strategy field {key!r}")
        return cls(**kwargs)


def default_grid() -> List[PropagationStrategy]:
    """All derivation options x stop_iou {0.5, 0.7, 0.8}, with 1 and 4
    points for the multi-point variants."""
    grid = []
    for derive in DERIVE_OPTIONS:
        for stop_iou in (0.5, 0.7, 0.8):
            points = (1, 4) if derive in MULTIPOINT_OPTIONS else (1,)
            for n_points in points:
                grid.append(PropagationStrategy(derive=derive,
                                                stop_iou=stop_iou,
                                                n_points=n_points))
    return grid


# ---------------------------------------------------------------------------
# prompt derivation
# ---------------------------------------------------------------------------

def center_point(mask: np.ndarray) -> Tuple[int, int]:
    """Foreground pixel nearest the centroid; ties resolve in row-major
    scan order."""
    coords = np.argwhere(np.asarray(mask).astype(bool))
    if coords.shape[0] == 0:
        raise prompt_ops.EmptyMaskError("empty mask has no center")
    centroid = coords.mean(axis=0)
    d2 = ((coords - centroid) ** 2).sum(axis=1)
    row, col = coords[int(np.argmin(d2))]
    return int(row), int(col)


def farthest_point_sample(mask: np.ndarray, n_points: int) -> List[Tuple[int, int]]:
    """Greedy farthest-point sampling over the foreground, seeded at the
    centroid-nearest pixel for spatial coverage."""
    coords = np.argwhere(np.asarray(mask).astype(bool))
    if coords.shape[0] == 0:
        raise prompt_ops.EmptyMaskError("empty mask has no interior points")
    points = [center_point(mask)]
    if n_points == 1 or coords.shape[0] == 1:
        return points[:1]
    dist = ((coords - np.asarray(points[0])) ** 2).sum(axis=1).astype(np.float64)
    while len(points) < min(n_points, coords.shape[0]):
        idx = int(np.argmax(dist))
        row, col = coords[idx]
        points.append((int(row), int(col)))
        dist = np.minimum(dist, ((coords - coords[idx]) ** 2).sum(axis=1))
    return points


def mask_prompt_from_binary(mask: np.ndarray) -> prompt_ops.Prompt:
    """Binary mask -> low-resolution logit prompt at saturated confidence."""
    logits = np.where(np.asarray(mask).astype(bool),
                      MASK_PROMPT_LOGIT, -MASK_PROMPT_LOGIT).astype(np.float32)
    return prompt_ops.downsample_mask(logits)


def derive_prompts(mask: np.ndarray, strategy: PropagationStrategy,
                   rng: Optional[np.random.Generator] = None,
                   ) -> List[prompt_ops.Prompt]:
    """Prompts for the next slice, derived from the previous slice's mask.
    Fully deterministic; raises EmptyMaskError on an empty mask."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise prompt_ops.EmptyMaskError("cannot derive prompts from an empty mask")
    out: List[prompt_ops.Prompt] = []
    derive = strategy.derive
    if derive == "center_point":
        out.append(prompt_ops.Prompt(prompt_ops.PromptKind.POINT_POSITIVE,
                                     point=center_point(mask)))
    if derive in MULTIPOINT_OPTIONS:
        out.extend(prompt_ops.Prompt(prompt_ops.PromptKind.POINT_POSITIVE,
                                     point=p)
                   for p in farthest_point_sample(mask, strategy.n_points))
    if derive in ("box", "box_and_mask", "points_and_box"):
        out.append(prompt_ops.box_from_mask(mask))
    if derive in ("box_and_mask", "points_and_mask"):
        out.append(mask_prompt_from_binary(mask))
    return out


# ---------------------------------------------------------------------------
# volume segmentation
# ---------------------------------------------------------------------------

def _predict_slice(model, embedding, prompt_list) -> np.ndarray:
    multimask = len(prompt_list) == 1 and prompt_list[0].is_point
    with torch.no_grad():
        output = model.predict_masks(embedding, prompt_list, multimask)
    return select_best_mask(output).mask


def segment_volume(model, volume, seed_prompts: Sequence[Tuple[int, prompt_ops.Prompt]],
                   strategy: PropagationStrategy) -> np.ndarray:
    """Segment one object through a volume from seeded prompts.

    ``volume`` is a Volume or a (D, H, W) array whose slices already match
    the model input size. Seeded slices are segmented from their prompts;
    propagation then walks outward in both depth directions, stopping at
    the boundary, an empty mask, or IOU(previous, new) < stop_iou (the
    below-threshold slice is discarded). Unvisited slices stay background.
    """
    voxels = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    if voxels.ndim != 3:
        raise DimensionError(f"expected a (D, H, W) volume, got {voxels.shape}")
    depth = voxels.shape[0]
    if not seed_prompts:
        raise ValueError("at least one seeded slice is required")
    seeds: Dict[int, List[prompt_ops.Prompt]] = {}
    for z, prompt in seed_prompts:
        if not 0 <= z < depth:
            raise ValueError(f"seed slice {z} out of range [0, {depth})")
        seeds.setdefault(int(z), []).append(prompt)

    embeddings: Dict[int, object] = {}

    def embed(z: int):
        if z not in embeddings:
            with torch.no_grad():
                embeddings[z] = model.encode_image(voxels[z])
        return embeddings[z]

    result = np.zeros(voxels.shape, dtype=bool)
    visited = set()
    for z, prompt_list in sorted(seeds.items()):
        result[z] = _predict_slice(model, embed(z), prompt_list)
        visited.add(z)

    for z0 in sorted(seeds):
        for direction in (-1, 1):
            prev = result[z0]
            z = z0 + direction
            while 0 <= z < depth and z not in visited:
                if not prev.any():
                    break
                prompt_list = derive_prompts(prev, strategy)
                new_mask = _predict_slice(model, embed(z), prompt_list)
                if not new_mask.any():
                    break
                if binary_iou(prev, new_mask) < strategy.stop_iou:
                    break
                result[z] = new_mask
                visited.add(z)
                prev = new_mask
                z += direction
    return result


# ---------------------------------------------------------------------------
# dataset evaluation and grid search
# ---------------------------------------------------------------------------

@dataclass
class VolumeResult:
    volume_id: str
    object_id: int
    start_kind: str
    dice: float


@dataclass
class Volume3DReport:
    model_id: str
    dataset_id: str
    strategy: PropagationStrategy
    start_kind: str
    results: List[VolumeResult] = field(default_factory=list)

    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.results])) if self.results else 0.0

    def std_dice(self) -> float:
        return float(np.std([r.dice for r in self.results])) if self.results else 0.0

    def to_csv(self) -> str:
        lines = ["volume_id,object_id,start_kind,dice"]
        lines += [f"{r.volume_id},{r.object_id},{r.start_kind},{r.dice!r}"
                  for r in self.results]
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps(
            {"model": self.model_id, "dataset": self.dataset_id,
             "strategy": self.strategy.to_string(),
             "start_kind": self.start_kind, "n_objects": len(self.results),
             "mean_dice": self.mean_dice(), "std_dice": self.std_dice()},
            indent=2, sort_keys=True) + "\n"


def _volume_in_model_space(model, vol: Volume):
    """Resize every slice to the model input; returns (voxels, labels,
    inverse-map or None)."""
    target = getattr(getattr(model, "config", None), "image_size", None)
    d, h, w = vol.voxels.shape
    if target is None or (h, w) == (target, target):
        return vol.voxels, vol.labels, None
    planes, labels, info = [], [], None
    for z in range(d):
        img, lab, info = resize_to_model(vol.voxels[z], vol.labels[z], target)
        planes.append(img)
        labels.append(lab)
    return np.stack(planes), np.stack(labels), info


def _evaluate_volume(model, vol: Volume, strategy: PropagationStrategy,
                     start_kind: str, seed: int) -> List[VolumeResult]:
    if vol.labels is None:
        return []
    voxels, labels, info = _volume_in_model_space(model, vol)
    results = []
    for object_id in vol.instance_ids():
        gt = labels == object_id
        zs = np.flatnonzero(gt.any(axis=(1, 2)))
        if zs.size == 0:
            continue
        z_mid = int((zs[0] + zs[-1]) // 2)
        slice_mask = gt[z_mid]
        rng = np.random.default_rng(
            [seed, zlib.crc32(vol.volume_id.encode()), object_id,
             0 if start_kind == "point" else 1])
        if start_kind == "point":
            seed_prompt = prompt_ops.sample_point(slice_mask, rng)
        else:
            seed_prompt = prompt_ops.box_from_mask(slice_mask)
        prediction = segment_volume(model, voxels, [(z_mid, seed_prompt)],
                                    strategy)
        if info is not None:
            prediction = np.stack([info.inverse_mask(p) for p in prediction])
        results.append(VolumeResult(
            volume_id=vol.volume_id, object_id=object_id,
            start_kind=start_kind,
            dice=dice(prediction, vol.labels == object_id)))
    return results


def evaluate_volume_dataset(model, dataset: Dataset3D,
                            strategy: PropagationStrategy, start_kind: str,
                            seed: int = 0, split: Optional[str] = None,
                            model_id: str = "model",
                            workers: int = 1) -> Volume3DReport:
    """Segment every annotated object from one prompt in the central slice
    of its extent and score the propagated result against the 3D ground
    truth. Volumes are independent and may be evaluated on several threads
    with read-only model access."""
    if start_kind not in ("point", "box"):
        raise ValueError(f"start_kind must be point or box, got {start_kind!r}")
    volumes = dataset.split_volumes(split) if split else dataset.volumes
    report = Volume3DReport(model_id=model_id, dataset_id=dataset.name,
                            strategy=strategy, start_kind=start_kind)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(
                lambda v: _evaluate_volume(model, v, strategy, start_kind, seed),
                volumes))
    else:
        chunks = [_evaluate_volume(model, v, strategy, start_kind, seed)
                  for v in volumes]
    for chunk in chunks:
        report.results.extend(chunk)
    return report


@dataclass
class GridSearchResult:
    best: PropagationStrategy
    rows: List[Tuple[PropagationStrategy, float, float]]

    def to_csv(self) -> str:
        lines = ["derive,stop_iou,n_points,mean_dice,std_dice"]
        lines += [f"{s.derive},{s.stop_iou},{s.n_points},{mean!r},{std!r}"
                  for s, mean, std in self.rows]
        return "\n".join(lines) + "\n"


def grid_search(model, validation_dataset: Dataset3D,
                strategy_grid: Optional[Sequence[PropagationStrategy]] = None,
                start_kind: str = "box", seed: int = 0,
                split: Optional[str] = None,
                workers: int = 1) -> GridSearchResult:
    """Evaluate every strategy on validation data; the best mean Dice wins,
    ties resolving to the earlier grid position."""
    grid = list(strategy_grid) if strategy_grid else default_grid()
    if not grid:
        raise ValueError("strategy grid must not be empty")
    rows = []
    for strategy in grid:
        report = evaluate_volume_dataset(model, validation_dataset, strategy,
                                         start_kind, seed=seed, split=split,
                                         workers=workers)
        rows.append((strategy, report.mean_dice(), report.std_dice()))
    best_index = int(np.argmax([mean for _s, mean, _d in rows]))
    return GridSearchResult(best=grid[best_index], rows=rows)
