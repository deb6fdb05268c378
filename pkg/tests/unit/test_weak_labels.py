"""
Tests for weak-label synthesis and box preprocessing
"""

import itertools
import os
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "src"))

from errors import LabelError
from formats import UNLABELED
from weak_labels import (
    AnnotationType,
    BoxLabel,
    BoxRule,
    SparseLabel,
    Sparsity,
    asp_encode,
    label_noise,
    max_inscribed_rectangle,
    preprocess_box,
    sparsity_for,
    synthesize_weak_label,
)

ALL_TYPES = list(AnnotationType)


def random_mask(rng, size=24, max_classes=2):
    """Overlapping random ellipses; later classes overwrite earlier ones"""
    mask = np.zeros((size, size), dtype=np.uint8)
    rows, cols = np.mgrid[0:size, 0:size]
    for c in range(1, int(rng.integers(1, max_classes + 1)) + 1):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.6, size / 3, 2)
        inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        if not inside.any():
            inside[int(min(cy, size - 1)), int(min(cx, size - 1))] = True
        mask[inside] = c
    return mask


def centered_square(size=20, side=10):
    mask = np.zeros((size, size), dtype=np.uint8)
    start = (size - side) // 2
    mask[start : start + side, start : start + side] = 1
    return mask


def _check_sound(label: SparseLabel, mask: np.ndarray):
    assert label_noise(label, mask) == 0
    for c in np.unique(mask):
        assert (label.label_map == c).any(), f"class {c} has no labeled pixel"


@pytest.mark.unit
class TestSynthesizeWeakLabel:
    def test_point_seeds_are_shrunken_rectangle_midpoints(self):
        mask = centered_square()
        label = synthesize_weak_label(mask, AnnotationType.POINT, np.random.default_rng(0))
        assert label.seeds == [(7, 9), (11, 9), (9, 7), (9, 11)]
        for r, c in label.seeds:
            assert label.label_map[r, c] == 1
        assert label.sparsity == Sparsity.SPARSE

    def test_point_blobs_are_clipped_to_mask(self):
        mask = centered_square()
        label = synthesize_weak_label(mask, AnnotationType.POINT, np.random.default_rng(0))
        fg = label.label_map == 1
        assert fg.sum() < mask.sum()
        assert not (fg & (mask == 0)).any()

    def test_block_on_full_foreground_erodes(self):
        mask = np.ones((20, 20), dtype=np.uint8)
        label = synthesize_weak_label(mask, AnnotationType.BLOCK, np.random.default_rng(0))
        assert 0 < (label.label_map == 1).sum() < mask.size
        assert not (label.label_map == 0).any()

    def test_scribble_is_thin_and_inside(self):
        mask = centered_square(32, 16)
        label = synthesize_weak_label(mask, AnnotationType.SCRIBBLE, np.random.default_rng(0))
        fg = label.label_map == 1
        assert 0 < fg.sum() < 0.5 * mask.sum()
        assert label.sparsity == Sparsity.MEDIUM

    def test_scribble2_is_deterministic_for_a_seed(self):
        mask = centered_square(32, 16)
        a = synthesize_weak_label(mask, AnnotationType.SCRIBBLE2, np.random.default_rng(5))
        b = synthesize_weak_label(mask, AnnotationType.SCRIBBLE2, np.random.default_rng(5))
        np.testing.assert_array_equal(a.label_map, b.label_map)

    def test_background_labels_stay_near_object(self):
        mask = np.zeros((40, 40), dtype=np.uint8)
        mask[18:22, 18:22] = 1
        label = synthesize_weak_label(mask, AnnotationType.BLOCK, np.random.default_rng(0))
        rows, cols = np.nonzero(label.label_map == 0)
        assert rows.size > 0
        assert rows.min() >= 16 and rows.max() <= 23
        assert cols.min() >= 16 and cols.max() <= 23

    def test_tiny_region_falls_back_to_single_seed(self):
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[5, 5:7] = 1
        label = synthesize_weak_label(mask, AnnotationType.POINT, np.random.default_rng(0))
        assert len(label.seeds) == 1
        _check_sound(label, mask)

    def test_empty_mask_rejected(self):
        with pytest.raises(LabelError):
            synthesize_weak_label(np.zeros((8, 8), dtype=np.uint8), AnnotationType.SCRIBBLE, np.random.default_rng(0))

    @pytest.mark.parametrize("annotation", ALL_TYPES, ids=[a.value for a in ALL_TYPES])
    def test_fuzzed_masks_are_noise_free(self, annotation):
        rng = np.random.default_rng(42)
        for _ in range(60):
            mask = random_mask(rng)
            label = synthesize_weak_label(mask, annotation, rng, list(BoxRule)[int(rng.integers(2))])
            _check_sound(label, mask)

    @pytest.mark.slow
    def test_thousand_fuzzed_masks_all_types(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            mask = random_mask(rng, size=int(rng.integers(8, 33)), max_classes=3)
            for annotation in ALL_TYPES:
                for rule in (BoxRule.TO_BLOCK, BoxRule.TO_SCRIBBLE) if "bbox" in annotation.value else (None,):
                    label = synthesize_weak_label(mask, annotation, rng, rule or BoxRule.TO_BLOCK)
                    _check_sound(label, mask)

    def test_box_labels_keep_the_original_box(self):
        mask = centered_square()
        label = synthesize_weak_label(mask, AnnotationType.BBOX, np.random.default_rng(0), BoxRule.TO_BLOCK)
        assert len(label.boxes) == 1
        box = label.boxes[0]
        assert (box.x0, box.y0, box.x1, box.y1) == (5, 5, 15, 15)
        assert label.sparsity == Sparsity.DENSE


@pytest.mark.unit
class TestPreprocessBox:
    def test_to_block_shrinks_thirty_percent_per_side(self):
        label = preprocess_box(BoxLabel(5, 5, 15, 15), BoxRule.TO_BLOCK, (20, 20))
        fg = np.argwhere(label.label_map == 1)
        assert len(fg) == 16
        assert fg.min(axis=0).tolist() == [8, 8]
        assert fg.max(axis=0).tolist() == [11, 11]

    @pytest.mark.parametrize("rule", list(BoxRule))
    def test_foreground_smaller_than_box_and_background_outside(self, rule):
        box = BoxLabel(4, 6, 16, 14)
        label = preprocess_box(box, rule, (24, 24))
        inside = box.raster((24, 24))
        assert 0 < (label.label_map == 1).sum() < box.area
        assert not ((label.label_map == 0) & inside).any()
        assert (label.label_map == 0).any()

    def test_to_scribble_is_medium(self):
        label = preprocess_box(BoxLabel(2, 2, 18, 18), BoxRule.TO_SCRIBBLE, (20, 20))
        assert label.sparsity == Sparsity.MEDIUM

    def test_to_scribble_ring_touches_every_edge_midpoint(self):
        mask = np.zeros((64, 64), dtype=bool)
        mask[10:50, 12:52] = True
        box = BoxLabel.from_mask(mask)
        ring = np.argwhere(preprocess_box(box, BoxRule.TO_SCRIBBLE, mask.shape).label_map == 1)
        rows, cols = ring[:, 0], ring[:, 1]
        assert rows.max() - rows.min() + 1 >= 0.9 * 40
        assert cols.max() - cols.min() + 1 >= 0.9 * 40
        for midpoint in [(10, 31.5), (49, 31.5), (29.5, 12), (29.5, 51)]:
            assert np.hypot(rows - midpoint[0], cols - midpoint[1]).min() <= 1.5
        assert mask[rows, cols].all()

    def test_rotated_box_is_rasterised(self):
        region = np.zeros((32, 32), dtype=bool)
        for i in range(6, 26):
            region[i, i - 2 : i + 3] = True
        box = BoxLabel.rotated_from_mask(region)
        label = preprocess_box(box, BoxRule.TO_BLOCK, region.shape)
        assert (label.label_map == 1).any()
        assert not ((label.label_map == 0) & box.raster(region.shape)).any()

    def test_zero_area_rejected(self):
        with pytest.raises(LabelError):
            preprocess_box(BoxLabel(3, 3, 3, 9), BoxRule.TO_BLOCK, (12, 12))

    def test_outside_image_rejected(self):
        with pytest.raises(LabelError):
            preprocess_box(BoxLabel(5, 5, 20, 9), BoxRule.TO_BLOCK, (12, 12))


@pytest.mark.unit
class TestBoxGeometry:
    def test_encompassing_box(self):
        region = np.zeros((10, 10), dtype=bool)
        region[2:5, 3:8] = True
        box = BoxLabel.from_mask(region)
        assert (box.x0, box.y0, box.x1, box.y1) == (3, 2, 8, 5)
        assert box.area == 15

    def test_rotated_box_of_aligned_rectangle_has_rectangle_area(self):
        region = np.zeros((12, 12), dtype=bool)
        region[3:7, 2:10] = True
        box = BoxLabel.rotated_from_mask(region)
        assert box.area == pytest.approx(32.0, rel=1e-6)

    def test_rotated_box_of_diagonal_band_is_tighter(self):
        region = np.zeros((32, 32), dtype=bool)
        for i in range(4, 28):
            region[i, i - 1 : i + 2] = True
        assert BoxLabel.rotated_from_mask(region).area < BoxLabel.from_mask(region).area

    def test_rotated_box_contains_region(self):
        region = random_mask(np.random.default_rng(3), size=24, max_classes=1) > 0
        box = BoxLabel.rotated_from_mask(region)
        pts = np.argwhere(region).astype(float) - np.asarray(box.center)
        c, s = np.cos(box.angle), np.sin(box.angle)
        local = pts @ np.array([[c, s], [-s, c]])
        assert np.all(np.abs(local) <= np.asarray(box.size) / 2.0 + 1e-6)

    def test_dict_round_trip_keeps_rotation(self):
        region = np.zeros((16, 16), dtype=bool)
        region[4:9, 3:12] = True
        box = BoxLabel.rotated_from_mask(region)
        again = BoxLabel.from_dict(box.to_dict())
        assert again.angle == box.angle and again.size == box.size

    def test_max_inscribed_rectangle_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            region = rng.uniform(size=(7, 8)) > 0.3
            if not region.any():
                continue
            r0, c0, r1, c1 = max_inscribed_rectangle(region)
            assert region[r0 : r1 + 1, c0 : c1 + 1].all()
            best = 0
            for a, b in itertools.combinations_with_replacement(range(7), 2):
                for c, d in itertools.combinations_with_replacement(range(8), 2):
                    if region[a : b + 1, c : d + 1].all():
                        best = max(best, (b - a + 1) * (d - c + 1))
            assert (r1 - r0 + 1) * (c1 - c0 + 1) == best


@pytest.mark.unit
class TestSparsityPrompt:
    @pytest.mark.parametrize("level", list(Sparsity))
    def test_one_plane_hot(self, level):
        planes = asp_encode(level, 4, 6).data
        assert planes.shape == (3, 4, 6)
        assert planes.sum() == 24
        assert np.all(planes[int(level)] == 1.0)

    def test_sparsity_for_box_rules(self):
        assert sparsity_for(AnnotationType.BBOX, BoxRule.TO_SCRIBBLE) == Sparsity.MEDIUM
        assert sparsity_for(AnnotationType.ROTATED_BBOX, BoxRule.TO_BLOCK) == Sparsity.DENSE
        assert sparsity_for(AnnotationType.POINT) == Sparsity.SPARSE


@pytest.mark.unit
class TestSparseLabelIO:
    def test_save_and_load(self, tmp_path):
        mask = centered_square()
        label = synthesize_weak_label(mask, AnnotationType.POINT, np.random.default_rng(0))
        label.save(tmp_path / "weak.pgm")
        restored = SparseLabel.load(tmp_path / "weak.pgm", label.to_meta())
        np.testing.assert_array_equal(restored.label_map, label.label_map)
        assert restored.seeds == label.seeds
        assert restored.annotation_type == AnnotationType.POINT
        assert (restored.label_map == UNLABELED).any()
