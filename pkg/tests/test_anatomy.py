"""Tests for preprocessing, cropping, token extraction, and report parsing."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomvlp.anatomy import (AnatomyError, CropPolicy, ReportParseError,
                               center_crop, crop_and_filter, extract_tokens,
                               flip_view, parse_report, pool_mask, preprocess)
from anatomvlp.phantom import PhantomSpec, generate_case


class TestPreprocess:
    def test_clamp_floor(self):
        assert preprocess(np.array([[[-2000.0]]])).item() == 0.0

    def test_midpoint(self):
        assert preprocess(np.array([[[0.0]]])).item() == 0.5

    def test_clamp_ceiling(self):
        assert preprocess(np.array([[[1000.0]]])).item() == 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(AnatomyError):
            preprocess(np.array([[[np.nan]]]))

    def test_idempotent_on_unit_range(self):
        rng = np.random.default_rng(0)
        v = rng.random((4, 4, 4)).astype(np.float32)
        once = preprocess(v, 0.0, 1.0)
        twice = preprocess(once, 0.0, 1.0)
        assert np.allclose(once, twice)

    def test_bad_bounds(self):
        with pytest.raises(AnatomyError):
            preprocess(np.zeros((2, 2, 2)), 1.0, -1.0)


def make_case():
    return generate_case(PhantomSpec(volume_shape=(32, 32, 16), anatomy_count=3, seed=2), 0)


class TestCrop:
    def test_full_volume_keeps_all(self):
        case = make_case()
        view = crop_and_filter(case, CropPolicy(patch_shape=(32, 32, 16)),
                               np.random.default_rng(0))
        assert view.surviving_ids == [0, 1, 2]

    def test_disjoint_window_drops_anatomy(self):
        case = make_case()
        # pick a window that misses anatomy 0's bounding box entirely
        coords = np.argwhere(case.masks[0])
        max0 = coords[:, 0].max()
        if max0 + 8 > 32:
            pytest.skip("layout leaves no disjoint window")
        view = crop_and_filter(case, CropPolicy(patch_shape=(8, 32, 16)),
                               None, offset=(int(max0) + 1, 0, 0))
        assert 0 not in view.surviving_ids

    def test_bisected_anatomy_excluded(self):
        case = make_case()
        coords = np.argwhere(case.masks[0])
        mid = int(coords[:, 0].mean())
        view = crop_and_filter(case, CropPolicy(patch_shape=(32 - mid, 32, 16)),
                               None, offset=(mid, 0, 0))
        assert 0 not in view.surviving_ids

    def test_flip_consistency(self):
        case = make_case()
        view = center_crop(case, CropPolicy(patch_shape=(32, 32, 16)))
        flipped = flip_view(view)
        assert np.array_equal(flipped.volume, view.volume[:, ::-1, :])
        assert np.array_equal(flipped.masks, view.masks[:, :, ::-1, :])

    def test_oversized_patch_rejected(self):
        case = make_case()
        with pytest.raises(AnatomyError):
            crop_and_filter(case, CropPolicy(patch_shape=(64, 64, 64)),
                            np.random.default_rng(0))


class TestExtractTokens:
    def test_single_cell_identity(self):
        fm = torch.randn(5, 2, 2, 2)
        mask = np.zeros((4, 4, 4), dtype=np.uint8)
        mask[2, 2, 2] = 1  # cell (1, 1, 1) at stride 2
        at = extract_tokens(fm, mask, anatomy_id=0)
        assert at.tokens.shape == (1, 5)
        assert torch.equal(at.tokens[0], fm[:, 1, 1, 1])

    def test_full_grid_row_major(self):
        fm = torch.randn(3, 2, 2, 2)
        mask = np.ones((4, 4, 4), dtype=np.uint8)
        at = extract_tokens(fm, mask, anatomy_id=1)
        assert at.tokens.shape == (8, 3)
        flat = fm.reshape(3, -1).T  # row-major spatial order
        assert torch.equal(at.tokens, flat)

    def test_two_cells_ordering(self):
        fm = torch.randn(3, 2, 2, 2)
        mask = np.zeros((4, 4, 4), dtype=np.uint8)
        mask[0, 0, 0] = 1   # cell (0,0,0) -> flat 0
        mask[3, 3, 3] = 1   # cell (1,1,1) -> flat 7
        at = extract_tokens(fm, mask, anatomy_id=0)
        assert torch.equal(at.tokens[0], fm[:, 0, 0, 0])
        assert torch.equal(at.tokens[1], fm[:, 1, 1, 1])

    def test_empty_pooled_mask_errors(self):
        fm = torch.randn(3, 2, 2, 2)
        mask = np.zeros((4, 4, 4), dtype=np.uint8)
        with pytest.raises(AnatomyError, match="vanished"):
            extract_tokens(fm, mask, anatomy_id=0)

    def test_non_integer_stride_rejected(self):
        fm = torch.randn(3, 3, 2, 2)
        mask = np.ones((4, 4, 4), dtype=np.uint8)
        with pytest.raises(AnatomyError):
            extract_tokens(fm, mask, anatomy_id=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_token_count_equals_pooled_popcount(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((8, 8, 4)) < 0.3).astype(np.uint8)
        fm = torch.randn(4, 4, 4, 2)
        pooled = pool_mask(mask, (2, 2, 2))
        if pooled.sum() == 0:
            with pytest.raises(AnatomyError):
                extract_tokens(fm, mask, anatomy_id=0)
        else:
            at = extract_tokens(fm, mask, anatomy_id=0)
            assert at.tokens.shape[0] == int(pooled.sum())


class TestParseReport:
    def test_normal_template(self):
        assert parse_report("The liver is unremarkable.") == (0, None)

    def test_abnormal_template(self):
        assert parse_report("There is a blob in the liver.") == (1, "blob")

    def test_unmatched_errors(self):
        with pytest.raises(ReportParseError):
            parse_report("Lorem ipsum.")

    def test_roundtrip_on_generated_cases(self):
        spec = PhantomSpec(volume_shape=(32, 32, 16), anatomy_count=4,
                           anomaly_prevalence=0.5, seed=9)
        for idx in range(10):
            case = generate_case(spec, idx)
            for j, s in enumerate(case.report_sentences):
                flag, name = parse_report(s)
                assert flag == case.labels[j]
                assert name == case.anomalies[j]
