"""Shared fixtures: synthetic datasets, stub/oracle models, and a disk
cache for the trained checkpoints the acceptance suite reuses between runs
(training is seeded, so cached artifacts are reproducible)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from promptfit.data import Dataset2D, ImageSample, generate_synthetic, load_dataset
from promptfit.model.types import ImageEmbedding, ModelOutput

CACHE_DIR = Path(__file__).parent / ".cache"
CACHE_VERSION = "v1"  # bump to invalidate cached training artifacts


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def synthetic_2d(n: int, seed: int, size: int = 64) -> Path:
    root = CACHE_DIR / f"shapes2d_n{n}_s{seed}_{size}"
    if not (root / "manifest.json").is_file():
        generate_synthetic("shapes2d", n=n, seed=seed, size=size, out=root)
    return root


def synthetic_3d(n: int, seed: int, size: int = 32) -> Path:
    root = CACHE_DIR / f"shapes3d_n{n}_s{seed}_{size}"
    if not (root / "manifest.json").is_file():
        generate_synthetic("shapes3d", n=n, seed=seed, size=size, out=root)
    return root


@pytest.fixture(scope="session")
def shapes2d_small() -> Dataset2D:
    return load_dataset(synthetic_2d(12, seed=11))


def disk_sample(size: int = 64, center=(20, 20), radius: int = 8,
                second=None, sample_id: str = "s0") -> ImageSample:
    """One synthetic sample with one or two disks, built analytically."""
    rng = np.random.default_rng(len(sample_id) + size)
    img = rng.random((size, size), dtype=np.float32) * 0.25
    labels = np.zeros((size, size), dtype=np.int32)
    yy, xx = np.mgrid[0:size, 0:size]
    labels[(yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2] = 1
    if second is not None:
        (cy, cx), r2 = second
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r2 ** 2] = 2
    img[labels > 0] += 0.6
    return ImageSample(sample_id=sample_id, image=np.clip(img, 0, 1),
                       labels=labels)


# ---------------------------------------------------------------------------
# stub model for objective structural laws
# ---------------------------------------------------------------------------

class StubModel:
    """Fake promptable model with one parameter: every prediction is a
    fixed left-half-positive plane, so correction steps against a
    right-half target always find both error regions. Records every
    predict call for structural-law checks."""

    def __init__(self, size: int = 32):
        self.size = size
        self.param = torch.nn.Parameter(torch.tensor(0.25))
        base = np.full((size, size), -2.0, dtype=np.float32)
        base[:, : size // 2] = 2.0
        self._base = torch.tensor(base)
        self.calls = []

    def parameters(self):
        return [self.param]

    def encode_image(self, image):
        return ImageEmbedding(grid=np.asarray(image))

    def predict_masks(self, embedding, prompts, multimask):
        self.calls.append((list(prompts), bool(multimask)))
        k = 3 if multimask else 1
        logits = self._base[None].expand(k, -1, -1) * (1.0 + 0.01 * self.param)
        scores = torch.sigmoid(self.param).reshape(1).expand(k)
        return ModelOutput(mask_logits=logits, iou_scores=scores)

    def predict_semantic(self, embedding):
        return (self._base[None] * self.param)


def stub_sample(size: int = 32, n_instances: int = 2,
                seed: int = 0) -> ImageSample:
    """Targets live strictly in the right half so the stub's prediction
    always has non-empty false-negative and false-positive regions."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.int32)
    half = size // 2
    for idx in range(1, n_instances + 1):
        r0 = int(rng.integers(0, size - 6))
        c0 = int(rng.integers(half + 1, size - 5))
        labels[r0:r0 + 5, c0:c0 + 4] = idx
    return ImageSample(sample_id=f"stub{seed}",
                       image=np.zeros((size, size), dtype=np.float32),
                       labels=labels)


# ---------------------------------------------------------------------------
# oracle models
# ---------------------------------------------------------------------------

class OracleModel:
    """Returns the ground-truth instance mask addressed by the prompts:
    the label under the first positive point, else the instance with the
    largest overlap with the box or mask prompt. Saturated logits."""

    def __init__(self, images_and_labels):
        self._labels = {}
        for image, labels in images_and_labels:
            self._labels[self._key(image)] = np.asarray(labels)

    @staticmethod
    def _key(image) -> str:
        arr = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
        return hashlib.sha1(arr.tobytes()).hexdigest()

    @classmethod
    def for_volume(cls, volume) -> "OracleModel":
        return cls((volume.voxels[z], volume.labels[z])
                   for z in range(volume.voxels.shape[0]))

    @classmethod
    def for_samples(cls, samples) -> "OracleModel":
        return cls((s.image, s.labels) for s in samples)

    def encode_image(self, image):
        return np.asarray(image, dtype=np.float32)

    def _pick_instance(self, labels, prompts):
        from promptfit.prompts import PromptKind

        for p in prompts:
            if p.kind is PromptKind.POINT_POSITIVE:
                return int(labels[p.point])
        for p in prompts:
            if p.kind is PromptKind.BOX:
                r0, c0, r1, c1 = p.box
                window = labels[r0:r1 + 1, c0:c1 + 1]
                ids, counts = np.unique(window[window > 0], return_counts=True)
                return int(ids[np.argmax(counts)]) if ids.size else 0
        for p in prompts:
            if p.kind is PromptKind.MASK:
                low = np.asarray(p.mask) > 0
                scale = labels.shape[0] // low.shape[0]
                up = np.kron(low, np.ones((scale, scale), dtype=bool))
                ids, counts = np.unique(labels[up][labels[up] > 0],
                                        return_counts=True)
                return int(ids[np.argmax(counts)]) if ids.size else 0
        return 0

    def predict_masks(self, embedding, prompts, multimask):
        labels = self._labels[self._key(embedding)]
        instance = self._pick_instance(labels, prompts)
        mask = labels == instance if instance > 0 else np.zeros_like(labels,
                                                                     dtype=bool)
        k = 3 if multimask else 1
        logits = np.where(mask, 8.0, -8.0).astype(np.float32)
        return ModelOutput(mask_logits=np.repeat(logits[None], k, axis=0),
                           iou_scores=np.full(k, 0.9, dtype=np.float32))


class DilatedPromptModel:
    """Monotone toy model: predicts the union of all positive prompt pixels
    dilated by a fixed disk; negative prompts are ignored."""

    def __init__(self, size: int, radius: int = 4):
        self.size = size
        self.radius = radius

    def encode_image(self, image):
        return np.asarray(image, dtype=np.float32)

    def predict_masks(self, embedding, prompts, multimask):
        from promptfit.prompts import PromptKind

        mask = np.zeros((self.size, self.size), dtype=bool)
        yy, xx = np.mgrid[0:self.size, 0:self.size]
        for p in prompts:
            if p.kind is PromptKind.POINT_POSITIVE:
                r, c = p.point
                mask |= (yy - r) ** 2 + (xx - c) ** 2 <= self.radius ** 2
        k = 3 if multimask else 1
        logits = np.where(mask, 6.0, -6.0).astype(np.float32)
        return ModelOutput(mask_logits=np.repeat(logits[None], k, axis=0),
                           iou_scores=np.full(k, 0.5, dtype=np.float32))
