import numpy as np
import pytest

from tablex.datagen import (
    DocAnnotation,
    GenerationError,
    PageConfig,
    annotation_from_dict,
    annotation_to_dict,
    crop_table_annotation,
    synthesize_page,
    unwarp_points,
    warp_curved,
    warp_points,
)
from tablex.splitter import make_separator_gt

STRAIGHT = PageConfig()
CURVED = PageConfig(curve_amplitude=(2.0, 5.0), curve_wavelength=420.0)


class TestConfigValidation:
    def test_row_bounds_enforced(self):
        with pytest.raises(GenerationError):
            PageConfig(rows=(1, 5)).validate()
        with pytest.raises(GenerationError):
            PageConfig(rows=(2, 13)).validate()

    def test_col_and_count_bounds(self):
        with pytest.raises(GenerationError):
            PageConfig(cols=(2, 9)).validate()
        with pytest.raises(GenerationError):
            PageConfig(table_count=(0, 2)).validate()

    def test_page_too_small_rejected(self):
        with pytest.raises(GenerationError):
            PageConfig(height=100).validate()

    def test_amplitude_vs_wavelength(self):
        with pytest.raises(GenerationError):
            PageConfig(curve_amplitude=(0.0, 80.0), curve_wavelength=400.0).validate()


class TestDeterminism:
    def test_identical_output_same_seed(self):
        img_a, ann_a = synthesize_page(STRAIGHT, seed=7)
        img_b, ann_b = synthesize_page(STRAIGHT, seed=7)
        assert np.array_equal(img_a, img_b)
        assert annotation_to_dict(ann_a) == annotation_to_dict(ann_b)

    def test_different_seeds_differ(self):
        img_a, _ = synthesize_page(STRAIGHT, seed=1)
        img_b, _ = synthesize_page(STRAIGHT, seed=2)
        assert not np.array_equal(img_a, img_b)


class TestSpans:
    def test_zero_span_prob_all_unit(self):
        cfg = PageConfig(span_prob=0.0)
        for seed in range(5):
            _, ann = synthesize_page(cfg, seed)
            for t in ann.tables:
                for c in t.cells:
                    assert c.rowspan == 1 and c.colspan == 1

    def test_spans_appear_with_high_prob(self):
        cfg = PageConfig(span_prob=0.6)
        found = False
        for seed in range(5):
            _, ann = synthesize_page(cfg, seed)
            for t in ann.tables:
                if any(c.rowspan > 1 or c.colspan > 1 for c in t.cells):
                    found = True
        assert found

    def test_guard_cells_present(self):
        cfg = PageConfig(span_prob=0.5, empty_cell_prob=0.3)
        for seed in range(10):
            _, ann = synthesize_page(cfg, seed)
            for t in ann.tables:
                for r in range(t.grid_rows):
                    assert any(
                        c.start_row == c.end_row == r and c.content_ids for c in t.cells
                    )
                for col in range(t.grid_cols):
                    assert any(
                        c.start_col == c.end_col == col and c.content_ids for c in t.cells
                    )


class TestAnnotationValidity:
    @pytest.mark.parametrize("cfg", [STRAIGHT, CURVED], ids=["straight", "curved"])
    def test_validator_over_many_seeds(self, cfg):
        for seed in range(60):
            _, ann = synthesize_page(cfg, seed)
            ann.validate()  # raises on any inconsistency

    def test_validator_thousand_seeds(self):
        # small pages keep the sweep fast; validation must never trip
        small = PageConfig(width=384, height=512, table_count=(1, 1),
                           rows=(2, 4), cols=(2, 4), span_prob=0.35,
                           empty_cell_prob=0.15)
        small_curved = PageConfig(width=384, height=512, table_count=(1, 1),
                                  rows=(2, 4), cols=(2, 4), span_prob=0.35,
                                  empty_cell_prob=0.15,
                                  curve_amplitude=(1.5, 4.0), curve_wavelength=400.0)
        for seed in range(800):
            _, ann = synthesize_page(small, seed)
            ann.validate()
        for seed in range(200):
            _, ann = synthesize_page(small_curved, 5000 + seed)
            ann.validate()

    @pytest.mark.parametrize("cfg", [STRAIGHT, CURVED], ids=["straight", "curved"])
    def test_separator_gt_always_valid(self, cfg):
        # every generated table admits a separator ground truth
        for seed in range(30):
            _, ann = synthesize_page(cfg, seed)
            for idx in range(len(ann.tables)):
                crop = crop_table_annotation(ann, idx)
                gt = make_separator_gt(crop.table, crop.contents, crop.size)
                for region in gt.row_regions + gt.col_regions:
                    assert region.thickness >= 8.0 - 1e-9

    def test_json_roundtrip(self):
        _, ann = synthesize_page(CURVED, seed=3)
        d = annotation_to_dict(ann)
        back = annotation_to_dict(annotation_from_dict(d))
        assert d == back


class TestWarp:
    def test_zero_amplitude_identity(self):
        img, ann = synthesize_page(STRAIGHT, seed=5)
        img2, ann2 = warp_curved(img, ann, amplitude=0.0, wavelength=400.0)
        assert img2 is img and ann2 is ann

    def test_point_warp_inverts(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 600, size=(200, 2))
        w = warp_points(pts, 4.0, 380.0, 0.7, 1.3)
        back = unwarp_points(w, 4.0, 380.0, 0.7, 1.3)
        assert np.abs(back - pts).max() < 0.5

    def test_separators_single_valued(self):
        for seed in range(10):
            _, ann = synthesize_page(CURVED, seed=seed)
            for t in ann.tables:
                for p in t.row_separators:
                    assert (np.diff(p[:, 0]) > 0).all()
                for p in t.col_separators:
                    assert (np.diff(p[:, 1]) > 0).all()

    def test_warp_recorded(self):
        _, ann = synthesize_page(CURVED, seed=4)
        assert ann.warp is not None
        assert ann.warp["amplitude"] > 0


class TestCrop:
    def test_table_crop_frames_table(self):
        _, ann = synthesize_page(STRAIGHT, seed=11)
        crop = crop_table_annotation(ann, 0)
        h, w = crop.size
        q = crop.table.quad
        assert q[:, 0].min() >= -1 and q[:, 0].max() <= w + 1
        assert q[:, 1].min() >= -1 and q[:, 1].max() <= h + 1
        for b in crop.contents.values():
            assert b.x >= -1 and b.y >= -1 and b.x2 <= w + 1 and b.y2 <= h + 1
