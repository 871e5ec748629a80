"""Architecture-compatibility checker for checkpoints.

A checkpoint is compatible with annotation tools built around the base
architecture iff its parameter names are exactly the base name set for its
declared configuration (a complete segmentation-decoder extension is
allowed and reported, not flagged), it contains no adapter-style keys, and
it keeps the base input image size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Set

from .checkpoint import read_checkpoint
from .types import ModelConfig

ADAPTER_MARKERS = ("adapter", "lora")


@dataclass
class CompatibilityReport:
    compatible: bool
    violations: List[str] = field(default_factory=list)
    extensions: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"compatible": self.compatible, "violations": self.violations,
             "extensions": self.extensions}, indent=2, sort_keys=True) + "\n"


def expected_parameter_names(config: ModelConfig,
                             with_segmentation_decoder: bool) -> Set[str]:
    """Name set of the reference architecture for ``config``. Derived from a
    throwaway instance so it can never drift from the real model."""
    from dataclasses import replace

    from .reference import PromptableSegmenter

    cfg = replace(config, with_segmentation_decoder=with_segmentation_decoder)
    model = PromptableSegmenter(cfg)
    return {name for name, _ in model.named_parameters()}


def check_compatibility(checkpoint_path,
                        base_config: Optional[ModelConfig] = None,
                        ) -> CompatibilityReport:
    """Check one checkpoint file against the base architecture contract."""
    base_config = base_config or ModelConfig()
    ckpt = read_checkpoint(checkpoint_path)
    violations: List[str] = []
    extensions: List[str] = []

    declared = ckpt.model_config
    if declared.image_size != base_config.image_size:
        violations.append(
            f"input size changed: {declared.image_size} != base "
            f"{base_config.image_size}")

    present = set(ckpt.parameters)
    adapter_keys = sorted(
        name for name in present
        if any(marker in name.lower() for marker in ADAPTER_MARKERS))
    for name in adapter_keys:
        violations.append(f"adapter-style parameter: {name}")
    present -= set(adapter_keys)

    core = expected_parameter_names(declared, with_segmentation_decoder=False)
    seg_ext = expected_parameter_names(declared,
                                       with_segmentation_decoder=True) - core

    missing = sorted(core - present)
    if missing:
        violations.append(f"missing base parameters: {missing}")
    seg_present = present & seg_ext
    extra = sorted(present - core - seg_ext)
    if extra:
        violations.append(f"unexpected parameters: {extra}")
    if seg_present:
        if seg_present == seg_ext:
            extensions.append("segmentation_decoder (joint-pretraining head)")
        else:
            violations.append(
                f"incomplete segmentation decoder: missing "
                f"{sorted(seg_ext - seg_present)}")

    return CompatibilityReport(compatible=not violations,
                               violations=violations, extensions=extensions)
