import numpy as np
import pytest
import torch

from promptfit.prompts import (EmptyMaskError, Prompt, PromptKind,
                               box_from_mask, downsample_mask, error_regions,
                               sample_correction, sample_point, tight_box)


def test_sample_point_single_candidate():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    p = sample_point(mask, np.random.default_rng(0))
    assert p.kind is PromptKind.POINT_POSITIVE
    assert p.point == (4, 4)


def test_sample_point_uniform_two_pixels():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1, 2] = mask[6, 5] = True
    rng = np.random.default_rng(7)
    hits = sum(sample_point(mask, rng).point == (1, 2) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) < 0.02


def test_sample_point_always_foreground():
    rng = np.random.default_rng(3)
    for _ in range(300):
        mask = rng.random((12, 12)) > 0.7
        if not mask.any():
            continue
        p = sample_point(mask, rng)
        assert mask[p.point]


def test_sample_point_empty_mask():
    with pytest.raises(EmptyMaskError):
        sample_point(np.zeros((4, 4), dtype=bool), np.random.default_rng(0))


def test_tight_box_example():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:6, 3:8] = True  # rows 2-5, cols 3-7
    p = box_from_mask(mask, distortion=0.0)
    assert p.box == (2, 3, 5, 7)


def test_box_distortion_bound():
    mask = np.zeros((60, 60), dtype=bool)
    mask[10:50, 10:50] = True  # 40 px per side
    tight = tight_box(mask)
    rng = np.random.default_rng(5)
    for _ in range(1000):
        r0, c0, r1, c1 = box_from_mask(mask, distortion=0.1, rng=rng).box
        for got, want in zip((r0, c0, r1, c1), tight):
            assert abs(got - want) <= 4  # 0.1 * 40
        assert 0 <= r0 <= r1 < 60 and 0 <= c0 <= c1 < 60


def test_box_full_image_clamped():
    mask = np.ones((16, 16), dtype=bool)
    rng = np.random.default_rng(0)
    for _ in range(100):
        r0, c0, r1, c1 = box_from_mask(mask, distortion=0.2, rng=rng).box
        assert 0 <= r0 <= r1 <= 15 and 0 <= c0 <= c1 <= 15


def test_box_never_collapses():
    mask = np.zeros((20, 20), dtype=bool)
    mask[9:11, 9:11] = True
    rng = np.random.default_rng(1)
    for _ in range(500):
        r0, c0, r1, c1 = box_from_mask(mask, distortion=0.5, rng=rng).box
        assert r1 >= r0 and c1 >= c0


def test_box_rasterized_idempotent():
    mask = np.zeros((20, 20), dtype=bool)
    mask[4:9, 6:14] = True
    box = box_from_mask(mask, distortion=0.0).box
    rast = np.zeros_like(mask)
    rast[box[0]:box[2] + 1, box[1]:box[3] + 1] = True
    assert box_from_mask(rast, distortion=0.0).box == box


def test_error_regions_equal_and_complement():
    target = np.random.default_rng(0).random((8, 8)) > 0.5
    regions = error_regions(target, target)
    assert not regions.false_negative.any()
    assert not regions.false_positive.any()
    regions = error_regions(~target, target)
    assert np.array_equal(regions.false_negative, target)
    assert np.array_equal(regions.false_positive, ~target)


def test_error_regions_brute_force():
    rng = np.random.default_rng(13)
    prediction = rng.random((32, 32)) > 0.5
    target = rng.random((32, 32)) > 0.5
    regions = error_regions(prediction, target)
    for i in range(32):
        for j in range(32):
            assert regions.false_negative[i, j] == (target[i, j]
                                                    and not prediction[i, j])
            assert regions.false_positive[i, j] == (prediction[i, j]
                                                    and not target[i, j])
    # disjointness and XOR identity
    assert not (regions.false_negative & regions.false_positive).any()
    assert np.array_equal(regions.false_negative | regions.false_positive,
                          prediction ^ target)


def test_error_regions_shape_mismatch():
    with pytest.raises(ValueError):
        error_regions(np.zeros((4, 4), bool), np.zeros((5, 4), bool))


def test_sample_correction_perfect_prediction():
    target = np.random.default_rng(0).random((8, 8)) > 0.5
    assert sample_correction(target, target, np.random.default_rng(1)) == (None,
                                                                           None)


def test_sample_correction_single_missing_pixel():
    target = np.zeros((8, 8), dtype=bool)
    target[3, 3] = True
    prediction = np.zeros_like(target)
    positive, negative = sample_correction(prediction, target,
                                           np.random.default_rng(0))
    assert positive.point == (3, 3)
    assert positive.kind is PromptKind.POINT_POSITIVE
    assert negative is None


def test_sample_correction_regions_property():
    rng = np.random.default_rng(23)
    for _ in range(500):
        prediction = rng.random((10, 10)) > 0.5
        target = rng.random((10, 10)) > 0.5
        positive, negative = sample_correction(prediction, target, rng)
        if positive is not None:
            assert target[positive.point] and not prediction[positive.point]
        if negative is not None:
            assert prediction[negative.point] and not target[negative.point]


def test_downsample_constant_and_shape():
    p = downsample_mask(np.full((64, 64), 2.5, dtype=np.float32))
    assert p.kind is PromptKind.MASK
    assert p.mask.shape == (16, 16)
    assert np.allclose(p.mask, 2.5)


def test_downsample_checker_pattern():
    pattern = np.indices((64, 64)).sum(axis=0)
    # alternating +-1 at period 2 averages to zero in every 4x4 block
    logits = np.where(pattern % 2 == 0, 1.0, -1.0).astype(np.float32)
    pooled = downsample_mask(logits).mask
    assert np.allclose(pooled, 0.0)


def test_downsample_matches_direct_pooling():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(32, 32)).astype(np.float32)
    pooled = downsample_mask(logits).mask
    for i in range(8):
        for j in range(8):
            block = logits[4 * i:4 * i + 4, 4 * j:4 * j + 4]
            assert pooled[i, j] == pytest.approx(block.mean(), abs=1e-6)


def test_downsample_torch_keeps_gradients():
    logits = torch.randn(64, 64, requires_grad=True)
    p = downsample_mask(logits)
    assert torch.is_tensor(p.mask)
    p.mask.sum().backward()
    assert logits.grad is not None


def test_prompt_validation():
    with pytest.raises(ValueError):
        Prompt(PromptKind.BOX, box=(5, 2, 3, 4))
    with pytest.raises(ValueError):
        Prompt(PromptKind.POINT_POSITIVE)


def test_sampling_reproducible():
    mask = np.random.default_rng(0).random((16, 16)) > 0.6
    a = [sample_point(mask, np.random.default_rng(42)).point for _ in range(5)]
    b = [sample_point(mask, np.random.default_rng(42)).point for _ in range(5)]
    assert a == b
