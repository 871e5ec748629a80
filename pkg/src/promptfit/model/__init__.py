from .checkpoint import (Checkpoint, CheckpointFormatError,
                         CheckpointIntegrityError, load_checkpoint,
                         read_checkpoint, save_checkpoint, write_checkpoint)
from .compat import CompatibilityReport, check_compatibility
from .reference import PromptableSegmenter
from .types import (DimensionError, ImageEmbedding, ModelConfig, ModelOutput,
                    PromptUsageError, SelectedMask, binary_iou,
                    select_best_mask)

__all__ = [
    "Checkpoint", "CheckpointFormatError", "CheckpointIntegrityError",
    "CompatibilityReport", "DimensionError", "ImageEmbedding", "ModelConfig",
    "ModelOutput", "PromptUsageError", "PromptableSegmenter", "SelectedMask",
    "binary_iou", "check_compatibility", "load_checkpoint", "read_checkpoint",
    "save_checkpoint", "select_best_mask", "write_checkpoint",
]
