"""Datasets: on-disk layout, loading/validation, stratified splitting,
3D-to-2D flattening, synthetic shape generation, and model-input resizing.

On-disk layout (all formats chosen by this project):

    root/
      manifest.json          {"name": ..., "samples": [{"id", "image",
                              "labels", "semantic"?, "modality",
                              "dimensionality"}, ...]}
      images/0000.png        8/16-bit grayscale or RGB
      labels/0000.png        16-bit label map, 0 = background
      volumes/vol0000/       3D "stack directory": 0000.png ... + meta.json

Images are min-max normalized to [0, 1] at load time. Labels are integer
instance maps; the optional semantic map holds class ids.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """Malformed dataset layout or contents."""


@dataclass
class ImageSample:
    """One 2D image with its instance label map."""

    sample_id: str
    image: np.ndarray            # (H, W) or (3, H, W) float32 in [0, 1]
    labels: np.ndarray           # (H, W) int32, 0 = background
    modality: str = "unknown"
    semantic: Optional[np.ndarray] = None   # (H, W) int32 class ids
    split: Optional[str] = None
    provenance: Optional[Tuple[str, int]] = None  # (volume_id, slice_index)

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.image.shape[-2], self.image.shape[-1]

    def instance_ids(self) -> List[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i > 0]

    def instance_mask(self, instance_id: int) -> np.ndarray:
        return self.labels == instance_id


@dataclass
class Volume:
    """One 3D volume with optional instance labels."""

    volume_id: str
    voxels: np.ndarray           # (D, H, W) float32 in [0, 1]
    labels: Optional[np.ndarray] = None   # (D, H, W) int32
    modality: str = "unknown"
    semantic: Optional[np.ndarray] = None
    split: Optional[str] = None
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def instance_ids(self) -> List[int]:
        if self.labels is None:
            return []
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i > 0]


@dataclass
class Dataset2D:
    samples: List[ImageSample]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.samples)

    def split_samples(self, split: str) -> List[ImageSample]:
        return [s for s in self.samples if s.split == split]


@dataclass
class Dataset3D:
    volumes: List[Volume]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.volumes)

    def split_volumes(self, split: str) -> List[Volume]:
        return [v for v in self.volumes if v.split == split]


@dataclass
class SplitSpec:
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    stratify_by_modality: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3:
            raise ValueError("fractions must be (train, val, test)")
        if any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be non-negative")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {self.fractions}")


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def _normalize(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        return (img - lo) / (hi - lo)
    return np.zeros_like(img)


def read_image(path: Path) -> np.ndarray:
    """Read a PNG as float32 in [0, 1]; RGB comes back channels-first."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        return _normalize(arr.transpose(2, 0, 1))
    return _normalize(arr)


def read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DatasetError(f"label map {path} must be single-channel")
    return arr.astype(np.int32)


def write_image_u16(path: Path, values: np.ndarray) -> None:
    """Write float values in [0, 1] as a 16-bit grayscale PNG."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)


def write_labels(path: Path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 65535:
        raise DatasetError("label ids must fit into uint16")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _read_stack(stack_dir: Path) -> np.ndarray:
    slices = sorted(p for p in stack_dir.iterdir() if p.suffix == ".png")
    if not slices:
        raise DatasetError(f"stack directory {stack_dir} contains no slices")
    return np.stack([np.asarray(Image.open(p)) for p in slices])


def _write_stack(stack_dir: Path, volume: np.ndarray, as_labels: bool) -> None:
    stack_dir.mkdir(parents=True, exist_ok=True)
    for z in range(volume.shape[0]):
        path = stack_dir / f"{z:04d}.png"
        if as_labels:
            write_labels(path, volume[z])
        else:
            write_image_u16(path, volume[z])


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def load_dataset(root) -> "Dataset2D | Dataset3D":
    """Load a dataset from ``root`` per the manifest layout, validating
    shapes and label ids. Returns Dataset2D or Dataset3D depending on the
    manifest's dimensionality (mixed manifests are rejected)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {manifest_path}: {e}") from e
    entries = manifest.get("samples", [])
    if not entries:
        raise DatasetError(f"dataset {root} lists no samples")
    name = manifest.get("name", root.name)

    dims = {e.get("dimensionality", "2d") for e in entries}
    if len(dims) != 1:
        raise DatasetError(f"mixed dimensionalities in {manifest_path}: {sorted(dims)}")
    dim = dims.pop()
    if dim == "2d":
        return Dataset2D(samples=[_load_sample(root, e) for e in entries], name=name)
    if dim == "3d":
        return Dataset3D(volumes=[_load_volume(root, e) for e in entries], name=name)
    raise DatasetError(f"unknown dimensionality {dim!r} in {manifest_path}")


def _load_sample(root: Path, entry: dict) -> ImageSample:
    image_path = root / entry["image"]
    labels_path = root / entry["labels"]
    for p in (image_path, labels_path):
        if not p.is_file():
            raise DatasetError(f"missing file {p}")
    image = read_image(image_path)
    labels = read_labels(labels_path)
    if image.shape[-2:] != labels.shape:
        raise DatasetError(
            f"size mismatch between {image_path} {image.shape[-2:]} "
            f"and {labels_path} {labels.shape}")
    semantic = None
    if entry.get("semantic"):
        semantic = read_labels(root / entry["semantic"])
        if semantic.shape != labels.shape:
            raise DatasetError(f"semantic map {entry['semantic']} size mismatch")
    return ImageSample(
        sample_id=entry.get("id", image_path.stem),
        image=image, labels=labels,
        modality=entry.get("modality", "unknown"),
        semantic=semantic,
    )


def _load_volume(root: Path, entry: dict) -> Volume:
    image_dir = root / entry["image"]
    labels_dir = root / entry["labels"]
    for p in (image_dir, labels_dir):
        if not p.is_dir():
            raise DatasetError(f"missing stack directory {p}")
    meta_path = image_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    voxels = _normalize(_read_stack(image_dir).astype(np.float32))
    labels = _read_stack(labels_dir).astype(np.int32)
    if voxels.shape != labels.shape:
        raise DatasetError(
            f"size mismatch between {image_dir} {voxels.shape} "
            f"and {labels_dir} {labels.shape}")
    if "dims" in meta and tuple(meta["dims"]) != voxels.shape:
        raise DatasetError(f"{meta_path} dims {meta['dims']} != stack {voxels.shape}")
    semantic = None
    if entry.get("semantic"):
        semantic = _read_stack(root / entry["semantic"]).astype(np.int32)
    return Volume(
        volume_id=entry.get("id", image_dir.name),
        voxels=voxels, labels=labels,
        modality=entry.get("modality", meta.get("modality", "unknown")),
        semantic=semantic,
        spacing=tuple(meta.get("spacing", (1.0, 1.0, 1.0))),
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def make_split(dataset, spec: SplitSpec) -> Dict[str, str]:
    """Assign each sample id to train/val/test.

    Stratified per modality when requested: within each modality the split
    counts stay within one sample of the requested fractions (largest
    remainder). Deterministic for a fixed seed.
    """
    items = dataset.samples if isinstance(dataset, Dataset2D) else dataset.volumes
    ids_by_group: Dict[str, List[str]] = {}
    for item in items:
        sid = item.sample_id if isinstance(item, ImageSample) else item.volume_id
        group = item.modality if spec.stratify_by_modality else "all"
        ids_by_group.setdefault(group, []).append(sid)

    rng = np.random.default_rng(spec.seed)
    assignment: Dict[str, str] = {}
    for group in sorted(ids_by_group):
        ids = sorted(ids_by_group[group])
        order = rng.permutation(len(ids))
        n = len(ids)
        targets = [f * n for f in spec.fractions]
        counts = [int(math.floor(t)) for t in targets]
        remainders = [t - c for t, c in zip(targets, counts)]
        for _ in range(n - sum(counts)):
            k = int(np.argmax(remainders))
            counts[k] += 1
            remainders[k] = -1.0
        for frac, count in zip(spec.fractions, counts):
            if frac > 0 and count == 0:
                raise DatasetError(
                    f"stratification infeasible: modality {group!r} has {n} "
                    f"samples, cannot honor fractions {spec.fractions}")
        bounds = np.cumsum(counts)
        for pos, idx in enumerate(order):
            split = SPLIT_NAMES[int(np.searchsorted(bounds, pos, side="right"))]
            assignment[ids[int(idx)]] = split
    return assignment


def apply_split(dataset, assignment: Dict[str, str]) -> None:
    items = dataset.samples if isinstance(dataset, Dataset2D) else dataset.volumes
    for item in items:
        sid = item.sample_id if isinstance(item, ImageSample) else item.volume_id
        item.split = assignment.get(sid)


# ---------------------------------------------------------------------------
# 3D -> 2D flattening
# ---------------------------------------------------------------------------

def flatten_to_2d(dataset3d: Dataset3D) -> Dataset2D:
    """One ImageSample per slice that contains at least one labeled pixel.
    Provenance (volume id, slice index) is retained on every sample."""
    samples = []
    for vol in dataset3d.volumes:
        if vol.labels is None:
            continue
        for z in range(vol.voxels.shape[0]):
            if not (vol.labels[z] > 0).any():
                continue
            samples.append(ImageSample(
                sample_id=f"{vol.volume_id}_z{z:04d}",
                image=vol.voxels[z],
                labels=vol.labels[z].astype(np.int32),
                modality=vol.modality,
                semantic=None if vol.semantic is None else vol.semantic[z],
                split=vol.split,
                provenance=(vol.volume_id, z),
            ))
    return Dataset2D(samples=samples, name=f"{dataset3d.name}_2d")


# ---------------------------------------------------------------------------
# model-input resizing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResizeInfo:
    orig_shape: Tuple[int, int]
    scaled_shape: Tuple[int, int]
    target: int

    @property
    def identity(self) -> bool:
        return self.orig_shape == (self.target, self.target)

    def inverse_mask(self, mask: np.ndarray) -> np.ndarray:
        """Map a model-resolution mask/label map back onto the original
        grid (crop the padding, then nearest-neighbor resize)."""
        if self.identity:
            return mask
        sh, sw = self.scaled_shape
        cropped = mask[:sh, :sw]
        im = Image.fromarray(cropped.astype(np.int32), mode="I")
        out = im.resize((self.orig_shape[1], self.orig_shape[0]), Image.NEAREST)
        return np.asarray(out).astype(mask.dtype)


def resize_to_model(image: np.ndarray, labels: Optional[np.ndarray],
                    target: int) -> Tuple[np.ndarray, Optional[np.ndarray], ResizeInfo]:
    """Resize to the square model input: aspect preserved, bilinear for the
    image, nearest for labels, zero padding bottom/right."""
    h, w = image.shape[-2], image.shape[-1]
    info = ResizeInfo(orig_shape=(h, w), scaled_shape=(h, w), target=target)
    if (h, w) == (target, target):
        return image, labels, info
    scale = target / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    info = ResizeInfo(orig_shape=(h, w), scaled_shape=(nh, nw), target=target)

    def _resize_plane(plane: np.ndarray, resample) -> np.ndarray:
        im = Image.fromarray(plane.astype(np.float32), mode="F")
        return np.asarray(im.resize((nw, nh), resample), dtype=np.float32)

    if image.ndim == 3:
        scaled = np.stack([_resize_plane(c, Image.BILINEAR) for c in image])
        out_img = np.zeros((image.shape[0], target, target), dtype=np.float32)
        out_img[:, :nh, :nw] = scaled
    else:
        out_img = np.zeros((target, target), dtype=np.float32)
        out_img[:nh, :nw] = _resize_plane(image, Image.BILINEAR)

    out_labels = None
    if labels is not None:
        lab = Image.fromarray(labels.astype(np.int32), mode="I")
        lab = lab.resize((nw, nh), Image.NEAREST)
        out_labels = np.zeros((target, target), dtype=np.int32)
        out_labels[:nh, :nw] = np.asarray(lab)
    return out_img, out_labels, info


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

MODALITIES = ("bright", "dark")
SHAPE_CLASSES_2D = {"disk": 1, "rectangle": 2, "ellipse": 3}
SHAPE_CLASSES_3D = {"sphere": 1, "cylinder": 2, "cone": 3}
MIN_INSTANCE_PIXELS = 16


class GenerationError(RuntimeError):
    """Raised when shapes cannot be placed in the requested canvas."""


def _smooth_field(rng: np.random.Generator, shape: Tuple[int, ...],
                  coarse: int, amplitude: float) -> np.ndarray:
    """Low-frequency texture: coarse noise bilinearly upsampled."""
    grids = [np.linspace(0, coarse - 1, s) for s in shape]
    noise = rng.uniform(-1.0, 1.0, size=(coarse,) * len(shape))
    if len(shape) == 2:
        y, x = grids
        y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
        y1, x1 = np.minimum(y0 + 1, coarse - 1), np.minimum(x0 + 1, coarse - 1)
        fy, fx = (y - y0)[:, None], (x - x0)[None, :]
        field = (noise[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
                 + noise[np.ix_(y1, x0)] * fy * (1 - fx)
                 + noise[np.ix_(y0, x1)] * (1 - fy) * fx
                 + noise[np.ix_(y1, x1)] * fy * fx)
        return amplitude * field
    # 3D: interpolate along depth between 2D fields
    z = grids[0]
    z0 = np.floor(z).astype(int)
    z1 = np.minimum(z0 + 1, coarse - 1)
    fz = (z - z0)[:, None, None]
    planes = rng.uniform(-1.0, 1.0, size=(coarse, shape[1], shape[2]))
    return amplitude * (planes[z0] * (1 - fz) + planes[z1] * fz)


def shape_membership_2d(kind: str, params: dict, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        return ((yy - params["cy"]) ** 2 + (xx - params["cx"]) ** 2
                <= params["r"] ** 2)
    if kind == "rectangle":
        return ((yy >= params["r0"]) & (yy <= params["r1"])
                & (xx >= params["c0"]) & (xx <= params["c1"]))
    if kind == "ellipse":
        return (((yy - params["cy"]) / params["a"]) ** 2
                + ((xx - params["cx"]) / params["b"]) ** 2 <= 1.0)
    raise ValueError(f"unknown 2D shape kind {kind!r}")


def shape_membership_3d(kind: str, params: dict, size: int) -> np.ndarray:
    zz, yy, xx = np.mgrid[0:size, 0:size, 0:size]
    if kind == "sphere":
        return ((zz - params["cz"]) ** 2 + (yy - params["cy"]) ** 2
                + (xx - params["cx"]) ** 2 <= params["r"] ** 2)
    if kind == "cylinder":
        inside_z = (zz >= params["z0"]) & (zz <= params["z1"])
        return inside_z & ((yy - params["cy"]) ** 2 + (xx - params["cx"]) ** 2
                           <= params["r"] ** 2)
    if kind == "cone":
        z0, z1 = params["z0"], params["z1"]
        inside_z = (zz >= z0) & (zz <= z1)
        t = np.clip((zz - z0) / max(z1 - z0, 1), 0.0, 1.0)
        radius = params["r_base"] + (params["r_tip"] - params["r_base"]) * t
        return inside_z & ((yy - params["cy"]) ** 2 + (xx - params["cx"]) ** 2
                           <= radius ** 2)
    raise ValueError(f"unknown 3D shape kind {kind!r}")


def _sample_shape_2d(rng: np.random.Generator, size: int) -> Tuple[str, dict]:
    kind = ("disk", "rectangle", "ellipse")[int(rng.integers(3))]
    rmax = max(3, size // 6)
    if kind == "disk":
        r = int(rng.integers(3, rmax + 1))
        return kind, {"r": r,
                      "cy": int(rng.integers(r + 1, size - r - 1)),
                      "cx": int(rng.integers(r + 1, size - r - 1))}
    if kind == "rectangle":
        h = int(rng.integers(4, max(5, size // 4) + 1))
        w = int(rng.integers(4, max(5, size // 4) + 1))
        r0 = int(rng.integers(1, size - h - 1))
        c0 = int(rng.integers(1, size - w - 1))
        return kind, {"r0": r0, "c0": c0, "r1": r0 + h - 1, "c1": c0 + w - 1}
    a = int(rng.integers(3, rmax + 1))
    b = int(rng.integers(3, rmax + 1))
    return kind, {"a": a, "b": b,
                  "cy": int(rng.integers(a + 1, size - a - 1)),
                  "cx": int(rng.integers(b + 1, size - b - 1))}


def _sample_shape_3d(rng: np.random.Generator, size: int) -> Tuple[str, dict]:
    kind = ("sphere", "cylinder", "cone")[int(rng.integers(3))]
    rmax = max(3, size // 5)
    if kind == "sphere":
        r = int(rng.integers(3, rmax + 1))
        c = [int(rng.integers(r + 1, size - r - 1)) for _ in range(3)]
        return kind, {"r": r, "cz": c[0], "cy": c[1], "cx": c[2]}
    r = int(rng.integers(3, rmax + 1))
    length = int(rng.integers(5, max(6, size // 2) + 1))
    z0 = int(rng.integers(1, size - length - 1))
    cy = int(rng.integers(r + 1, size - r - 1))
    cx = int(rng.integers(r + 1, size - r - 1))
    if kind == "cylinder":
        return kind, {"r": r, "z0": z0, "z1": z0 + length - 1, "cy": cy, "cx": cx}
    return kind, {"r_base": float(r), "r_tip": 1.2, "z0": z0,
                  "z1": z0 + length - 1, "cy": cy, "cx": cx}


def _place_shapes(rng: np.random.Generator, size: int, n_shapes: int,
                  sampler, membership, min_voxels: int) -> List[Tuple[str, dict, np.ndarray]]:
    placed: List[Tuple[str, dict, np.ndarray]] = []
    occupied = None
    for _ in range(n_shapes):
        for _attempt in range(60):
            kind, params = sampler(rng, size)
            mask = membership(kind, params, size)
            if mask.sum() < min_voxels:
                continue
            if occupied is not None and (mask & occupied).any():
                continue
            occupied = mask if occupied is None else (occupied | mask)
            placed.append((kind, params, mask))
            break
    return placed


def _render(rng: np.random.Generator, size: int, modality: str,
            shapes: Sequence[Tuple[str, dict, np.ndarray]], ndim: int,
            ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    shape = (size,) * ndim
    base = rng.uniform(0.12, 0.25)
    img = base + _smooth_field(rng, shape, coarse=5, amplitude=0.05)
    img += rng.uniform(-0.02, 0.02, size=shape)
    labels = np.zeros(shape, dtype=np.int32)
    semantic = np.zeros(shape, dtype=np.int32)
    classes = SHAPE_CLASSES_2D if ndim == 2 else SHAPE_CLASSES_3D
    for idx, (kind, _params, mask) in enumerate(shapes, start=1):
        level = rng.uniform(0.65, 0.85)
        img[mask] = level + rng.uniform(-0.03, 0.03, size=int(mask.sum()))
        labels[mask] = idx
        semantic[mask] = classes[kind]
    img = np.clip(img, 0.0, 1.0)
    if modality == "dark":
        img = 1.0 - img
    return img.astype(np.float32), labels, semantic


def generate_synthetic(kind: str, n: int, seed: int, size: Optional[int],
                       out) -> Path:
    """Generate a synthetic shape dataset on disk, fully determined by the
    seed. 2D: 1-5 non-overlapping disks/rectangles/ellipses per image over a
    textured background; 3D: 1-3 spheres/cylinders/cones per volume. Each
    instance has at least 16 foreground pixels and >= 0.3 intensity contrast
    against the background. Shape parameters are recorded in geometry.json
    so labels can be checked against analytic membership."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("shapes2d", "shapes3d"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    size = size or (64 if kind == "shapes2d" else 32)
    min_size = 24 if kind == "shapes2d" else 16
    if size < min_size:
        raise GenerationError(f"size {size} too small to place shapes (min {min_size})")
    rng = np.random.default_rng(seed)
    entries, geometry = [], []

    if kind == "shapes2d":
        (root / "images").mkdir(exist_ok=True)
        (root / "labels").mkdir(exist_ok=True)
        (root / "semantic").mkdir(exist_ok=True)
        for i in range(n):
            modality = MODALITIES[i % 2]
            n_shapes = int(rng.integers(1, 6))
            shapes = _place_shapes(rng, size, n_shapes, _sample_shape_2d,
                                   shape_membership_2d, MIN_INSTANCE_PIXELS)
            if not shapes:
                raise GenerationError(f"could not place any shape on a {size}px canvas")
            img, labels, semantic = _render(rng, size, modality, shapes, ndim=2)
            sid = f"{i:04d}"
            write_image_u16(root / "images" / f"{sid}.png", img)
            write_labels(root / "labels" / f"{sid}.png", labels)
            write_labels(root / "semantic" / f"{sid}.png", semantic)
            entries.append({"id": sid, "image": f"images/{sid}.png",
                            "labels": f"labels/{sid}.png",
                            "semantic": f"semantic/{sid}.png",
                            "modality": modality, "dimensionality": "2d"})
            geometry.append({"id": sid, "shapes": [
                {"kind": k, "params": p, "label_id": j + 1}
                for j, (k, p, _m) in enumerate(shapes)]})
    else:
        for i in range(n):
            modality = MODALITIES[i % 2]
            n_shapes = int(rng.integers(1, 4))
            shapes = _place_shapes(rng, size, n_shapes, _sample_shape_3d,
                                   shape_membership_3d, MIN_INSTANCE_PIXELS)
            if not shapes:
                raise GenerationError(f"could not place any shape in a {size}^3 volume")
            vox, labels, semantic = _render(rng, size, modality, shapes, ndim=3)
            vid = f"vol{i:04d}"
            image_dir = root / "volumes" / vid
            _write_stack(image_dir, vox, as_labels=False)
            _write_stack(root / "volumes" / f"{vid}_labels", labels, as_labels=True)
            _write_stack(root / "volumes" / f"{vid}_semantic", semantic, as_labels=True)
            (image_dir / "meta.json").write_text(json.dumps(
                {"dims": list(vox.shape), "spacing": [1.0, 1.0, 1.0],
                 "modality": modality}, sort_keys=True, indent=2) + "\n")
            entries.append({"id": vid, "image": f"volumes/{vid}",
                            "labels": f"volumes/{vid}_labels",
                            "semantic": f"volumes/{vid}_semantic",
                            "modality": modality, "dimensionality": "3d"})
            geometry.append({"id": vid, "shapes": [
                {"kind": k, "params": p, "label_id": j + 1}
                for j, (k, p, _m) in enumerate(shapes)]})

    manifest = {"name": root.name, "samples": entries}
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (root / "geometry.json").write_text(
        json.dumps(geometry, sort_keys=True, indent=2) + "\n")
    return root
