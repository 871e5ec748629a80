"""Prompt types and sampling: initial points/boxes from masks, correction
points from error regions, and low-resolution mask prompts.

All sampling draws from an explicit ``numpy.random.Generator`` so that runs
are reproducible from a seed. Functions are stateless and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

# Low-resolution mask prompts live at 1/4 of the model input resolution.
LOWRES_FACTOR = 4


class PromptKind(Enum):
    POINT_POSITIVE = "point_positive"
    POINT_NEGATIVE = "point_negative"
    BOX = "box"
    MASK = "mask"


@dataclass(frozen=True)
class Prompt:
    """Tagged union of the four prompt types.

    ``point`` is (row, col) in pixels, ``box`` is (row_min, col_min,
    row_max, col_max) with inclusive bounds, ``mask`` holds low-resolution
    logits (numpy array or torch tensor; logits are kept un-binarized so
    prediction confidence survives the round trip).
    """

    kind: PromptKind
    point: Optional[Tuple[int, int]] = None
    box: Optional[Tuple[int, int, int, int]] = None
    mask: Optional[object] = None

    def __post_init__(self):
        if self.kind in (PromptKind.POINT_POSITIVE, PromptKind.POINT_NEGATIVE):
            if self.point is None:
                raise ValueError(f"{self.kind.value} prompt needs a point")
        elif self.kind is PromptKind.BOX:
            if self.box is None:
                raise ValueError("box prompt needs box coordinates")
            r0, c0, r1, c1 = self.box
            if r0 > r1 or c0 > c1:
                raise ValueError(f"degenerate box {self.box}")
        elif self.kind is PromptKind.MASK:
            if self.mask is None:
                raise ValueError("mask prompt needs mask data")

    @property
    def is_point(self) -> bool:
        return self.kind in (PromptKind.POINT_POSITIVE, PromptKind.POINT_NEGATIVE)


@dataclass(frozen=True)
class ErrorRegions:
    """False negatives (target but not predicted) and false positives
    (predicted but not target). The two regions are disjoint by
    construction and both empty iff prediction equals target."""

    false_negative: np.ndarray
    false_positive: np.ndarray


class EmptyMaskError(ValueError):
    """Raised when a sampling operation receives a mask without foreground."""


def _as_bool(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {arr.shape}")
    return arr.astype(bool, copy=False) if arr.dtype != bool else arr


def sample_point(mask, rng: np.random.Generator) -> Prompt:
    """Sample a positive point uniformly over the foreground of ``mask``."""
    mask = _as_bool(mask)
    coords = np.argwhere(mask)
    if coords.shape[0] == 0:
        raise EmptyMaskError("cannot sample a point from an empty mask")
    idx = int(rng.integers(coords.shape[0]))
    row, col = coords[idx]
    return Prompt(PromptKind.POINT_POSITIVE, point=(int(row), int(col)))


def tight_box(mask) -> Tuple[int, int, int, int]:
    """Tight bounding box (row_min, col_min, row_max, col_max), inclusive."""
    mask = _as_bool(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("cannot compute a bounding box of an empty mask")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def box_from_mask(mask, distortion: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> Prompt:
    """Bounding-box prompt for ``mask``.

    With ``distortion`` > 0 each edge is shifted outward or inward by a
    uniform offset in [0, distortion * side_length], clamped to the image
    bounds and never collapsing below 1x1.
    """
    if distortion < 0:
        raise ValueError("distortion must be >= 0")
    mask = _as_bool(mask)
    h, w = mask.shape
    r0, c0, r1, c1 = tight_box(mask)
    if distortion > 0:
        if rng is None:
            raise ValueError("distortion > 0 requires an rng")
        side_r = float(r1 - r0 + 1)
        side_c = float(c1 - c0 + 1)
        r0 += int(np.rint(rng.uniform(-distortion * side_r, distortion * side_r)))
        r1 += int(np.rint(rng.uniform(-distortion * side_r, distortion * side_r)))
        c0 += int(np.rint(rng.uniform(-distortion * side_c, distortion * side_c)))
        c1 += int(np.rint(rng.uniform(-distortion * side_c, distortion * side_c)))
        r0, r1 = max(0, min(r0, h - 1)), max(0, min(r1, h - 1))
        c0, c1 = max(0, min(c0, w - 1)), max(0, min(c1, w - 1))
        if r0 > r1:
            r0 = r1 = min(h - 1, max(0, (r0 + r1) // 2))
        if c0 > c1:
            c0 = c1 = min(w - 1, max(0, (c0 + c1) // 2))
    return Prompt(PromptKind.BOX, box=(r0, c0, r1, c1))


def error_regions(prediction, target) -> ErrorRegions:
    """Per-pixel disagreement split into false negatives and false positives."""
    prediction = _as_bool(prediction)
    target = _as_bool(target)
    if prediction.shape != target.shape:
        raise ValueError(
            f"shape mismatch: prediction {prediction.shape} vs target {target.shape}")
    return ErrorRegions(
        false_negative=target & ~prediction,
        false_positive=~target & prediction,
    )


def sample_correction(prediction, target, rng: np.random.Generator,
                      ) -> Tuple[Optional[Prompt], Optional[Prompt]]:
    """One simulated correction: a positive point from the false-negative
    region and a negative point from the false-positive region.

    Empty regions yield ``None`` for that polarity; (None, None) means the
    prediction already matches the target and correcting cannot help.
    """
    regions = error_regions(prediction, target)
    positive = negative = None
    fn_coords = np.argwhere(regions.false_negative)
    if fn_coords.shape[0] > 0:
        row, col = fn_coords[int(rng.integers(fn_coords.shape[0]))]
        positive = Prompt(PromptKind.POINT_POSITIVE, point=(int(row), int(col)))
    fp_coords = np.argwhere(regions.false_positive)
    if fp_coords.shape[0] > 0:
        row, col = fp_coords[int(rng.integers(fp_coords.shape[0]))]
        negative = Prompt(PromptKind.POINT_NEGATIVE, point=(int(row), int(col)))
    return positive, negative


def downsample_mask(logits) -> Prompt:
    """Average-pool full-resolution logits down to the low-resolution mask
    prompt size (1/LOWRES_FACTOR per side).

    Accepts a numpy array or a torch tensor; a tensor is pooled with torch
    ops so gradients can flow through the prompt during training.
    """
    if hasattr(logits, "requires_grad"):  # torch tensor
        import torch.nn.functional as F

        if logits.dim() != 2:
            raise ValueError(f"expected 2D logits, got shape {tuple(logits.shape)}")
        h, w = logits.shape
        if h % LOWRES_FACTOR or w % LOWRES_FACTOR:
            raise ValueError(f"logits shape {(h, w)} not divisible by {LOWRES_FACTOR}")
        pooled = F.avg_pool2d(logits[None, None], LOWRES_FACTOR)[0, 0]
        return Prompt(PromptKind.MASK, mask=pooled)
    arr = np.asarray(logits, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected 2D logits, got shape {arr.shape}")
    h, w = arr.shape
    if h % LOWRES_FACTOR or w % LOWRES_FACTOR:
        raise ValueError(f"logits shape {(h, w)} not divisible by {LOWRES_FACTOR}")
    pooled = arr.reshape(h // LOWRES_FACTOR, LOWRES_FACTOR,
                         w // LOWRES_FACTOR, LOWRES_FACTOR).mean(axis=(1, 3))
    return Prompt(PromptKind.MASK, mask=pooled)
