"""Model contract types: configuration, image embeddings, decoder outputs,
and best-mask selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np


class DimensionError(ValueError):
    """Input array dimensions violate the model contract."""


class PromptUsageError(ValueError):
    """Prompt list violates the decoder contract (empty, duplicate box...)."""


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale stand-in for the ViT-b promptable-segmentation family.

    ``image_size`` must be divisible by ``patch_size``; ``patch_size`` must
    be a power of two >= 4 so the mask-prompt stem and the convolutional
    segmentation decoder have integral up/downsampling chains.
    """

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    encoder_depth: int = 4
    decoder_channels: int = 64
    with_segmentation_decoder: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}")
        if self.patch_size < 4 or self.patch_size & (self.patch_size - 1):
            raise ValueError("patch_size must be a power of two >= 4")
        if self.encoder_depth < 1:
            raise ValueError("encoder_depth must be >= 1")
        if self.embed_dim < 8 or self.embed_dim % 8:
            raise ValueError("embed_dim must be a positive multiple of 8")
        if self.decoder_channels < 8 or self.decoder_channels % 4:
            raise ValueError("decoder_channels must be a multiple of 4, >= 8")

    @property
    def embedding_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def lowres_mask_size(self) -> int:
        return self.image_size // 4

    def to_header(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "encoder_depth": self.encoder_depth,
            "decoder_channels": self.decoder_channels,
            "with_segmentation_decoder": self.with_segmentation_decoder,
        }

    @classmethod
    def from_header(cls, header: dict) -> "ModelConfig":
        return cls(
            image_size=int(header["image_size"]),
            patch_size=int(header["patch_size"]),
            embed_dim=int(header["embed_dim"]),
            encoder_depth=int(header["encoder_depth"]),
            decoder_channels=int(header["decoder_channels"]),
            with_segmentation_decoder=_parse_bool(header["with_segmentation_decoder"]),
        )


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("true", "1"):
        return True
    if str(value).lower() in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass
class ImageEmbedding:
    """Encoder output grid of shape (C_e, H_e, W_e). ``intermediates`` holds
    the per-block token maps the segmentation decoder taps (kept out of the
    embedding cache)."""

    grid: object
    intermediates: Optional[tuple] = None


@dataclass
class ModelOutput:
    """Decoder output: mask logits (K, H, W) and squashed quality scores
    (K,), K = 3 for the multi-mask head, 1 otherwise."""

    mask_logits: object
    iou_scores: object

    @property
    def k(self) -> int:
        return int(np.asarray(self.iou_scores.detach()
                              if hasattr(self.iou_scores, "detach")
                              else self.iou_scores).shape[0])


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


class SelectedMask(NamedTuple):
    mask: np.ndarray          # binary, full resolution
    predicted_iou: float
    index: int


def select_best_mask(output: ModelOutput,
                     true_mask: Optional[np.ndarray] = None) -> SelectedMask:
    """Pick one candidate mask from a decoder output.

    With ``true_mask`` (training) the candidate with the highest actual IOU
    against the ground truth wins; without it (inference) the highest
    predicted score wins. Ties break toward the lowest index.
    """
    logits = _to_numpy(output.mask_logits)
    scores = _to_numpy(output.iou_scores)
    if logits.ndim != 3 or logits.shape[0] != scores.shape[0]:
        raise DimensionError(
            f"inconsistent output shapes {logits.shape} / {scores.shape}")
    masks = logits > 0
    if true_mask is not None:
        ious = [binary_iou(m, true_mask) for m in masks]
        index = int(np.argmax(ious))
    else:
        index = int(np.argmax(scores))
    return SelectedMask(mask=masks[index], predicted_iou=float(scores[index]),
                        index=index)
