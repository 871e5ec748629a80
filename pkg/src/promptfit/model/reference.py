"""The desk-scale reference promptable segmenter: a miniature ViT encoder,
prompt encoder, and dual-head mask decoder, with an optional convolutional
segmentation decoder for joint semantic pretraining.

Forward passes are pure functions of (parameters, inputs); inference may run
concurrently as long as no training loop is mutating the parameters.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from ..prompts import Prompt, PromptKind
from .nets import (ConvSegmentationDecoder, ImageEncoder, MaskDecoder,
                   PromptEncoder, init_parameters)
from .types import (DimensionError, ImageEmbedding, ModelConfig, ModelOutput,
                    PromptUsageError)


class PromptableSegmenter(nn.Module):
    """Reference implementation of the promptable-model contract."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        self.image_encoder = ImageEncoder(self.config)
        self.prompt_encoder = PromptEncoder(self.config)
        self.mask_decoder = MaskDecoder(self.config)
        if self.config.with_segmentation_decoder:
            self.segmentation_decoder = ConvSegmentationDecoder(self.config,
                                                                n_classes=1)
        init_parameters(self, seed)

    # -- image encoding ----------------------------------------------------

    def _prepare_image(self, image) -> Tensor:
        dtype = self.prompt_encoder._dtype
        x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image)
                            else image, dtype=dtype)
        if x.dim() == 2:
            x = x[None].expand(3, -1, -1)
        if x.dim() != 3 or x.shape[0] != 3:
            raise DimensionError(
                f"expected (H, W) or (3, H, W) image, got {tuple(x.shape)}")
        s = self.config.image_size
        if x.shape[-2:] != (s, s):
            raise DimensionError(
                f"image is {tuple(x.shape[-2:])}, model expects ({s}, {s}); "
                "resize via the data module first")
        return x * 2.0 - 1.0

    def encode_image(self, image) -> ImageEmbedding:
        """Encode one (H, W) or (3, H, W) image in [0, 1]."""
        return self.encode_image_batch([image])[0]

    def encode_image_batch(self, images: Sequence) -> List[ImageEmbedding]:
        batch = torch.stack([self._prepare_image(im) for im in images])
        grids, inters = self.image_encoder.forward_features(batch)
        if not torch.isfinite(grids).all():
            raise FloatingPointError("image encoder produced non-finite values")
        return [ImageEmbedding(grid=grids[i],
                               intermediates=tuple(t[i] for t in inters))
                for i in range(len(images))]

    # -- prompt handling ---------------------------------------------------

    def _validate_prompts(self, prompts: Sequence[Prompt]) -> None:
        if not prompts:
            raise PromptUsageError("prompt list must not be empty")
        s = self.config.image_size
        n_box = n_mask = 0
        for p in prompts:
            if p.is_point:
                r, c = p.point
                if not (0 <= r < s and 0 <= c < s):
                    raise PromptUsageError(f"point {p.point} outside image of size {s}")
            elif p.kind is PromptKind.BOX:
                n_box += 1
                r0, c0, r1, c1 = p.box
                if not (0 <= r0 <= r1 < s and 0 <= c0 <= c1 < s):
                    raise PromptUsageError(f"box {p.box} outside image of size {s}")
            elif p.kind is PromptKind.MASK:
                n_mask += 1
                m = p.mask
                shape = tuple(m.shape)
                low = self.config.lowres_mask_size
                if shape != (low, low):
                    raise DimensionError(
                        f"mask prompt is {shape}, expected ({low}, {low})")
        if n_box > 1:
            raise PromptUsageError(f"at most one box prompt allowed, got {n_box}")
        if n_mask > 1:
            raise PromptUsageError(f"at most one mask prompt allowed, got {n_mask}")

    def _encode_prompt_sets(self, prompt_sets: Sequence[Sequence[Prompt]],
                            ) -> Tuple[Tensor, Tensor, Tensor]:
        """Vectorized prompt encoding for a batch of prompt sets. Returns
        zero-padded sparse tokens (B, Nmax, C), their validity mask (B,
        Nmax), and the dense embeddings (B, C, He, We)."""
        pe = self.prompt_encoder
        coords: List[Tuple[int, int]] = []
        types: List[int] = []
        set_idx: List[int] = []
        pos_idx: List[int] = []
        mask_inputs: List[Tensor] = []
        mask_rows: List[int] = []
        counts = []
        for b, prompts in enumerate(prompt_sets):
            n = 0
            for p in prompts:
                if p.is_point:
                    coords.append(p.point)
                    types.append(pe.POINT_POSITIVE
                                 if p.kind is PromptKind.POINT_POSITIVE
                                 else pe.POINT_NEGATIVE)
                    set_idx.append(b)
                    pos_idx.append(n)
                    n += 1
                elif p.kind is PromptKind.BOX:
                    r0, c0, r1, c1 = p.box
                    coords.extend([(r0, c0), (r1, c1)])
                    types.extend([pe.BOX_TOPLEFT, pe.BOX_BOTTOMRIGHT])
                    set_idx.extend([b, b])
                    pos_idx.extend([n, n + 1])
                    n += 2
                elif p.kind is PromptKind.MASK:
                    mask_inputs.append(torch.as_tensor(p.mask, dtype=pe._dtype))
                    mask_rows.append(b)
            counts.append(n)

        batch = len(prompt_sets)
        n_max = max(counts)
        c = self.config.embed_dim
        sparse = torch.zeros(batch, n_max, c, dtype=pe._dtype, device=pe._device)
        valid = torch.zeros(batch, n_max, dtype=torch.bool, device=pe._device)
        if coords:
            tokens = pe.point_tokens(
                torch.tensor(coords, dtype=pe._dtype, device=pe._device),
                torch.tensor(types, dtype=torch.long, device=pe._device))
            sparse = sparse.index_put((torch.tensor(set_idx),
                                       torch.tensor(pos_idx)), tokens)
            valid[set_idx, pos_idx] = True

        side = self.config.embedding_size
        rows: List[Optional[Tensor]] = [None] * batch
        if mask_inputs:
            encoded = pe.encode_masks(torch.stack(mask_inputs))
            for j, b in enumerate(mask_rows):
                rows[b] = encoded[j]
        no_mask = pe.no_mask_dense(side)
        dense = torch.stack([r if r is not None else no_mask for r in rows])
        return sparse, valid, dense

    @staticmethod
    def _is_single_point(prompts: Sequence[Prompt]) -> bool:
        return len(prompts) == 1 and prompts[0].is_point

    # -- mask prediction ---------------------------------------------------

    def _grid(self, embedding) -> Tensor:
        grid = embedding.grid if isinstance(embedding, ImageEmbedding) else embedding
        grid = torch.as_tensor(grid, dtype=self.prompt_encoder._dtype)
        side = self.config.embedding_size
        if grid.shape != (self.config.embed_dim, side, side):
            raise DimensionError(
                f"embedding grid {tuple(grid.shape)} does not match config "
                f"({self.config.embed_dim}, {side}, {side})")
        return grid

    def predict_masks(self, embedding, prompts: Sequence[Prompt],
                      multimask: bool) -> ModelOutput:
        """Decode masks for one prompt set; K = 3 if multimask else 1."""
        self._validate_prompts(prompts)
        sparse, valid, dense = self._encode_prompt_sets([prompts])
        masks, scores = self.mask_decoder.decode_tokens(
            self._grid(embedding)[None], sparse, valid, dense)
        sel = self.mask_decoder.head_slice(multimask)
        logits = self.mask_decoder.upsample_logits(masks[:, sel])
        return ModelOutput(mask_logits=logits[0], iou_scores=scores[0, sel])

    def predict_masks_batch(self, embeddings: Sequence,
                            prompt_sets: Sequence[Sequence[Prompt]],
                            multimask: Sequence[bool]) -> List[ModelOutput]:
        """Batched decoding; equivalent to predict_masks per set (padding
        tokens are masked out of every attention step)."""
        if not (len(embeddings) == len(prompt_sets) == len(multimask)):
            raise PromptUsageError("batched prediction needs equal-length inputs")
        for prompts in prompt_sets:
            self._validate_prompts(prompts)
        sparse, valid, dense = self._encode_prompt_sets(prompt_sets)
        grids = torch.stack([self._grid(e) for e in embeddings])
        masks, scores = self.mask_decoder.decode_tokens(grids, sparse, valid,
                                                        dense)
        results: List[Optional[ModelOutput]] = [None] * len(prompt_sets)
        for flag in (False, True):
            idx = [i for i, m in enumerate(multimask) if bool(m) == flag]
            if not idx:
                continue
            sel = self.mask_decoder.head_slice(flag)
            logits = self.mask_decoder.upsample_logits(masks[idx][:, sel])
            for j, i in enumerate(idx):
                results[i] = ModelOutput(mask_logits=logits[j],
                                         iou_scores=scores[i, sel])
        return results  # type: ignore[return-value]

    # -- semantic pretraining head ------------------------------------------

    def predict_semantic(self, embedding) -> Tensor:
        """Binary segmentation logits (1, H, W) from the joint-pretraining
        decoder; requires with_segmentation_decoder."""
        if not self.config.with_segmentation_decoder:
            raise PromptUsageError(
                "model was built without a segmentation decoder")
        if not isinstance(embedding, ImageEmbedding) or embedding.intermediates is None:
            raise PromptUsageError(
                "semantic prediction needs an embedding with intermediates")
        inters = [t[None] for t in embedding.intermediates]
        return self.segmentation_decoder(inters)[0]
