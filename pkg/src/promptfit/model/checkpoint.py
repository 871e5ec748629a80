"""Checkpoint container: a single little-endian binary file.

Layout:

    magic "PFIT" | uint32 format_version | uint32 header_len | header UTF-8
    uint32 n_entries | entries sorted by name

    entry := uint16 name_len | name UTF-8 | uint8 ndim | uint32 dims...
             | float32 data

The header is ``key=value`` lines: the model configuration plus a ``kind``
tag (interactive / semantic2d / semantic3d) and kind-specific extras.
Parameters are stored as float32, so float32 models round-trip bit-exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np
import torch

from .types import ModelConfig

MAGIC = b"PFIT"
FORMAT_VERSION = 1

KIND_INTERACTIVE = "interactive"
KIND_SEMANTIC_2D = "semantic2d"
KIND_SEMANTIC_3D = "semantic3d"


class CheckpointFormatError(ValueError):
    """Bad magic or unsupported format version."""


class CheckpointIntegrityError(ValueError):
    """Truncated file or parameter-name mismatch."""


@dataclass
class Checkpoint:
    parameters: Dict[str, np.ndarray]
    header: Dict[str, str]
    format_version: int = FORMAT_VERSION

    @property
    def kind(self) -> str:
        return self.header.get("kind", KIND_INTERACTIVE)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_header(self.header)


def _encode_header(header: Dict[str, str]) -> bytes:
    lines = [f"{k}={header[k]}" for k in sorted(header)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_header(blob: bytes) -> Dict[str, str]:
    header = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        header[key] = value
    return header


def write_checkpoint(path, header: Dict[str, str],
                     parameters: Dict[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename in the target directory)."""
    path = Path(path)
    header_blob = _encode_header({k: str(v) for k, v in header.items()})
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<I", len(header_blob)))
            f.write(header_blob)
            f.write(struct.pack("<I", len(parameters)))
            for name in sorted(parameters):
                arr = np.ascontiguousarray(parameters[name], dtype="<f4")
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    view = memoryview(data)
    offset = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointIntegrityError(
                f"{path}: truncated while reading {what} "
                f"(need {n} bytes at offset {offset}, file has {len(data)})")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a {MAGIC.decode()} checkpoint")
    version, = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {version} unsupported "
            f"(expected {FORMAT_VERSION})")
    header_len, = struct.unpack("<I", take(4, "header length"))
    header = _decode_header(bytes(take(header_len, "header")))
    n_entries, = struct.unpack("<I", take(4, "entry count"))
    parameters: Dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        name_len, = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        ndim, = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape")) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        blob = take(4 * count, f"data of {name}")
        parameters[name] = np.frombuffer(bytes(blob), dtype="<f4").reshape(shape)
    if offset != len(data):
        raise CheckpointIntegrityError(
            f"{path}: {len(data) - offset} trailing bytes after last entry")
    return Checkpoint(parameters=parameters, header=header,
                      format_version=version)


def model_parameters(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {name: p.detach().cpu().to(torch.float32).numpy()
            for name, p in model.named_parameters()}


def load_parameters_into(model: torch.nn.Module,
                         parameters: Dict[str, np.ndarray],
                         source: str = "checkpoint") -> None:
    """Strict load: the checkpoint's name set must equal the model's."""
    model_names = {name for name, _ in model.named_parameters()}
    ckpt_names = set(parameters)
    missing = sorted(model_names - ckpt_names)
    extra = sorted(ckpt_names - model_names)
    if missing or extra:
        raise CheckpointIntegrityError(
            f"{source}: parameter names do not match model"
            + (f"; missing: {missing}" if missing else "")
            + (f"; unexpected: {extra}" if extra else ""))
    with torch.no_grad():
        for name, param in model.named_parameters():
            arr = parameters[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointIntegrityError(
                    f"{source}: {name} has shape {tuple(arr.shape)}, "
                    f"model expects {tuple(param.shape)}")
            param.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)))


def save_checkpoint(model, path) -> None:
    """Persist a PromptableSegmenter (parameters + config)."""
    header = dict(model.config.to_header())
    header["kind"] = KIND_INTERACTIVE
    write_checkpoint(path, header, model_parameters(model))


def load_checkpoint(path):
    """Rebuild a PromptableSegmenter from a checkpoint file."""
    from .reference import PromptableSegmenter

    ckpt = read_checkpoint(path)
    if ckpt.kind != KIND_INTERACTIVE:
        raise CheckpointFormatError(
            f"{path}: kind {ckpt.kind!r} is not an interactive model "
            "(use the semantic loaders)")
    model = PromptableSegmenter(ckpt.model_config)
    load_parameters_into(model, ckpt.parameters, source=str(path))
    return model
