"""Simulated interactive 2D annotation: for each ground-truth object, an
initial point or box prompt followed by correction rounds that add a
positive point in the false-negative region and a negative point in the
false-positive region, recording the Dice score after every prediction.

Every (sample, object, start kind) gets its own seeded random stream
derived from the evaluation seed, so different models see identical prompt
sequences and reports are reproducible byte for byte.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import prompts as prompt_ops
from .data import Dataset2D, ImageSample, resize_to_model
from .model.types import DimensionError, select_best_mask

DEFAULT_CORRECTIONS = 7  # 8 predictions total


def dice(a, b) -> float:
    """Dice coefficient 2|a&b| / (|a|+|b|); 1.0 when both masks are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.count_nonzero(a & b) / denom)


@dataclass
class InteractiveTrace:
    dataset_id: str
    sample_id: str
    object_id: int
    start_kind: str
    dice_per_iteration: List[float]
    prompts_used: Dict[str, int]


@dataclass(frozen=True)
class EvalSettings:
    n_corrections: int = DEFAULT_CORRECTIONS
    start_kinds: Tuple[str, ...] = ("point", "box")
    use_mask_prompt: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_corrections < 0:
            raise ValueError("n_corrections must be >= 0")
        for kind in self.start_kinds:
            if kind not in ("point", "box"):
                raise ValueError(f"unknown start kind {kind!r}")


def _object_rng(seed: int, sample_id: str, object_id: int,
                start_kind: str) -> np.random.Generator:
    # crc32 keeps the stream stable across processes (unlike hash())
    return np.random.default_rng(
        [seed, zlib.crc32(sample_id.encode()), object_id,
         0 if start_kind == "point" else 1])


def _predict(model, embedding, prompt_list, rng_unused=None):
    multimask = len(prompt_list) == 1 and prompt_list[0].is_point
    with torch.no_grad():
        output = model.predict_masks(embedding, prompt_list, multimask)
    selected = select_best_mask(output)  # inference: by predicted score
    logits = output.mask_logits[selected.index]
    if hasattr(logits, "detach"):
        logits = logits.detach().cpu().numpy()
    return selected.mask, np.asarray(logits)


def trace_object(model, embedding, mask: np.ndarray, start_kind: str,
                 n_corrections: int, use_mask_prompt: bool,
                 rng: np.random.Generator, metric_map=None,
                 metric_target: Optional[np.ndarray] = None,
                 ) -> Tuple[List[float], Dict[str, int]]:
    """Run the interaction loop against a precomputed embedding; returns the
    per-iteration Dice values and prompt counts.

    Prompting happens in model space; when the sample was resized,
    ``metric_map`` maps predictions back to the original geometry and the
    Dice is computed against ``metric_target`` there.
    """
    mask = np.asarray(mask).astype(bool)
    counts = {"points_positive": 0, "points_negative": 0, "boxes": 0,
              "mask_prompts": 0}
    if start_kind == "point":
        prompt_list = [prompt_ops.sample_point(mask, rng)]
        counts["points_positive"] += 1
    elif start_kind == "box":
        prompt_list = [prompt_ops.box_from_mask(mask, distortion=0.0)]
        counts["boxes"] += 1
    else:
        raise ValueError(f"unknown start kind {start_kind!r}")

    def _score(prediction: np.ndarray) -> float:
        if metric_map is not None:
            return dice(metric_map(prediction), metric_target)
        return dice(prediction, mask)

    prediction, logits = _predict(model, embedding, prompt_list)
    scores = [_score(prediction)]
    for _ in range(n_corrections):
        positive, negative = prompt_ops.sample_correction(prediction, mask, rng)
        if positive is None and negative is None:
            # prediction matches the target; further prompts cannot help
            scores.extend([scores[-1]] * (n_corrections + 1 - len(scores)))
            break
        if positive is not None:
            prompt_list.append(positive)
            counts["points_positive"] += 1
        if negative is not None:
            prompt_list.append(negative)
            counts["points_negative"] += 1
        if use_mask_prompt:
            prompt_list = [p for p in prompt_list
                           if p.kind is not prompt_ops.PromptKind.MASK]
            prompt_list.append(prompt_ops.downsample_mask(logits))
            counts["mask_prompts"] += 1
        prediction, logits = _predict(model, embedding, prompt_list)
        scores.append(_score(prediction))
    return scores, counts


def evaluate_object(model, image, mask, start_kind: str,
                    n_corrections: int = DEFAULT_CORRECTIONS,
                    use_mask_prompt: bool = False,
                    rng: Optional[np.random.Generator] = None,
                    dataset_id: str = "", sample_id: str = "",
                    object_id: int = 0) -> InteractiveTrace:
    """Simulate interactive annotation of one object."""
    rng = rng if rng is not None else np.random.default_rng(0)
    with torch.no_grad():
        embedding = model.encode_image(image)
    scores, counts = trace_object(model, embedding, mask, start_kind,
                                  n_corrections, use_mask_prompt, rng)
    return InteractiveTrace(dataset_id=dataset_id, sample_id=sample_id,
                            object_id=object_id, start_kind=start_kind,
                            dice_per_iteration=scores, prompts_used=counts)


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    settings: EvalSettings
    traces: List[InteractiveTrace] = field(default_factory=list)

    def _stack(self, start_kind: str,
               dataset_id: Optional[str] = None) -> np.ndarray:
        rows = [t.dice_per_iteration for t in self.traces
                if t.start_kind == start_kind
                and (dataset_id is None or t.dataset_id == dataset_id)]
        return np.asarray(rows, dtype=np.float64)

    def dataset_ids(self) -> List[str]:
        return sorted({t.dataset_id for t in self.traces})

    def mean_dice(self, start_kind: str,
                  dataset_id: Optional[str] = None) -> List[float]:
        rows = self._stack(start_kind, dataset_id)
        return [] if rows.size == 0 else [float(x) for x in rows.mean(axis=0)]

    def std_dice(self, start_kind: str,
                 dataset_id: Optional[str] = None) -> List[float]:
        rows = self._stack(start_kind, dataset_id)
        return [] if rows.size == 0 else [float(x) for x in rows.std(axis=0)]

    def to_csv(self) -> str:
        n = 1 + self.settings.n_corrections
        header = (["dataset_id", "sample_id", "object_id", "start_kind",
                   "points_positive", "points_negative", "boxes",
                   "mask_prompts"] + [f"dice_{i}" for i in range(n)])
        lines = [",".join(header)]
        for t in self.traces:
            row = [t.dataset_id, t.sample_id, str(t.object_id), t.start_kind,
                   str(t.prompts_used["points_positive"]),
                   str(t.prompts_used["points_negative"]),
                   str(t.prompts_used["boxes"]),
                   str(t.prompts_used["mask_prompts"])]
            row += [repr(x) for x in t.dice_per_iteration]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def summary(self) -> List[dict]:
        """Overall entry per start kind, plus per-dataset entries when the
        traces span more than one dataset id."""
        entries = [{"model": self.model_id, "dataset": self.dataset_id,
                    "start_kind": kind, "use_mask_prompt":
                        self.settings.use_mask_prompt,
                    "mean_dice": self.mean_dice(kind),
                    "std_dice": self.std_dice(kind)}
                   for kind in self.settings.start_kinds]
        ids = self.dataset_ids()
        if len(ids) > 1:
            for dataset_id in ids:
                for kind in self.settings.start_kinds:
                    entries.append({
                        "model": self.model_id, "dataset": dataset_id,
                        "start_kind": kind,
                        "use_mask_prompt": self.settings.use_mask_prompt,
                        "mean_dice": self.mean_dice(kind, dataset_id),
                        "std_dice": self.std_dice(kind, dataset_id)})
        return entries

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def plot_data_csv(self) -> str:
        """Bar-chart data: one row per (start kind, iteration)."""
        lines = ["model,start_kind,iteration,mean,std"]
        for kind in self.settings.start_kinds:
            means, stds = self.mean_dice(kind), self.std_dice(kind)
            for i, (m, s) in enumerate(zip(means, stds)):
                lines.append(f"{self.model_id},{kind},{i},{m!r},{s!r}")
        return "\n".join(lines) + "\n"

    def delta_csv(self, baseline: "EvalReport") -> str:
        """Per-iteration mean-Dice difference against a baseline report."""
        lines = ["start_kind,iteration,delta_mean"]
        for kind in self.settings.start_kinds:
            ours = self.mean_dice(kind)
            theirs = baseline.mean_dice(kind)
            for i in range(min(len(ours), len(theirs))):
                lines.append(f"{kind},{i},{ours[i] - theirs[i]!r}")
        return "\n".join(lines) + "\n"


def _eval_sample(model, sample: ImageSample, settings: EvalSettings,
                 dataset_id: str) -> List[InteractiveTrace]:
    image, labels = sample.image, sample.labels
    target_size = getattr(getattr(model, "config", None), "image_size", None)
    info = None
    if target_size is not None and sample.spatial_shape != (target_size,
                                                            target_size):
        image, labels, info = resize_to_model(sample.image, sample.labels,
                                              target_size)
    with torch.no_grad():
        embedding = model.encode_image(image)
    traces = []
    for object_id in sample.instance_ids():
        mask = labels == object_id
        if not mask.any():
            continue  # object vanished in the resize
        metric_map = info.inverse_mask if info is not None else None
        metric_target = (sample.labels == object_id) if info is not None else None
        for kind in settings.start_kinds:
            rng = _object_rng(settings.seed, sample.sample_id, object_id, kind)
            scores, counts = trace_object(model, embedding, mask, kind,
                                          settings.n_corrections,
                                          settings.use_mask_prompt, rng,
                                          metric_map=metric_map,
                                          metric_target=metric_target)
            traces.append(InteractiveTrace(
                dataset_id=dataset_id, sample_id=sample.sample_id,
                object_id=object_id, start_kind=kind,
                dice_per_iteration=scores, prompts_used=counts))
    return traces


def evaluate_dataset(model, dataset: Dataset2D, settings: EvalSettings,
                     model_id: str = "model",
                     split: Optional[str] = None) -> EvalReport:
    """Evaluate every annotated object of a dataset (optionally one split);
    traces are independent, so the per-sample work may run on several
    threads with read-only model access."""
    samples = dataset.split_samples(split) if split else dataset.samples
    report = EvalReport(model_id=model_id, dataset_id=dataset.name,
                        settings=settings)
    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            results = list(pool.map(
                lambda s: _eval_sample(model, s, settings, dataset.name),
                samples))
    else:
        results = [_eval_sample(model, s, settings, dataset.name)
                   for s in samples]
    for traces in results:
        report.traces.extend(traces)
    return report
