import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptseg.masks import (
    BoxPrompt,
    EmptyMaskError,
    MaskShapeError,
    box_from_mask,
    connected_components,
    dice_coefficient,
    error_regions,
    iou,
    largest_error_component,
    mask_center,
    sample_correction_click,
    sample_point_in_mask,
)

from oracles import (
    brute_force_center,
    flood_fill_components,
    largest_error_component_reference,
    sort_components,
)

small_masks = arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16)))


def mask_from_pixels(shape, pixels):
    m = np.zeros(shape, dtype=bool)
    for r, c in pixels:
        m[r, c] = True
    return m


class TestIou:
    def test_identical_nonempty(self):
        m = mask_from_pixels((4, 4), [(1, 1), (2, 2)])
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = mask_from_pixels((4, 4), [(0, 0)])
        b = mask_from_pixels((4, 4), [(3, 3)])
        assert iou(a, b) == 0.0

    def test_partial_overlap(self):
        # |a∧b| = 1, |a∨b| = 3 on a 1x3 grid
        a = mask_from_pixels((1, 3), [(0, 0), (0, 1)])
        b = mask_from_pixels((1, 3), [(0, 1), (0, 2)])
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty_is_perfect(self):
        e = np.zeros((3, 3), dtype=bool)
        assert iou(e, e) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(MaskShapeError):
            iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))


class TestDice:
    def test_identical(self):
        m = mask_from_pixels((4, 4), [(1, 1), (2, 3)])
        assert dice_coefficient(m, m) == 1.0

    def test_disjoint(self):
        a = mask_from_pixels((4, 4), [(0, 0)])
        b = mask_from_pixels((4, 4), [(3, 3)])
        assert dice_coefficient(a, b) == 0.0

    def test_two_two_overlap_one(self):
        a = mask_from_pixels((2, 3), [(0, 0), (0, 1)])
        b = mask_from_pixels((2, 3), [(0, 1), (1, 2)])
        assert dice_coefficient(a, b) == pytest.approx(0.5)

    def test_both_empty(self):
        e = np.zeros((2, 2), dtype=bool)
        assert dice_coefficient(e, e) == 1.0

    @given(small_masks, st.data())
    def test_dice_iou_relation(self, a, data):
        b = data.draw(arrays(bool, st.just(a.shape)))
        j = iou(a, b)
        assert dice_coefficient(a, b) == pytest.approx(2 * j / (1 + j))

    @given(small_masks, st.data())
    def test_symmetry(self, a, data):
        b = data.draw(arrays(bool, st.just(a.shape)))
        assert iou(a, b) == iou(b, a)
        assert dice_coefficient(a, b) == dice_coefficient(b, a)


class TestConnectedComponents:
    def test_empty_mask(self):
        assert connected_components(np.zeros((4, 4), bool)) == []

    def test_full_mask(self):
        m = np.ones((3, 3), dtype=bool)
        comps = connected_components(m)
        assert len(comps) == 1
        assert np.array_equal(comps[0], m)

    def test_diagonal_connectivity(self):
        m = mask_from_pixels((3, 3), [(0, 0), (1, 1)])
        assert len(connected_components(m, connectivity=4)) == 2
        assert len(connected_components(m, connectivity=8)) == 1

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            connected_components(np.ones((2, 2), bool), connectivity=6)

    def test_sort_order_deterministic(self):
        # two areas of 2: the one whose first pixel scans earlier leads
        m = mask_from_pixels((3, 4), [(0, 2), (0, 3), (2, 0), (2, 1), (1, 0)])
        comps = connected_components(m)
        assert np.count_nonzero(comps[0]) == 3
        assert np.count_nonzero(comps[1]) == 2

    @given(small_masks, st.sampled_from([4, 8]))
    @settings(max_examples=60, deadline=None)
    def test_matches_flood_fill_oracle(self, m, connectivity):
        got = connected_components(m, connectivity)
        expected = sort_components(flood_fill_components(m, connectivity))
        assert len(got) == len(expected)
        for g, e in zip(got, expected):
            assert np.array_equal(g, e)

    @given(small_masks)
    @settings(max_examples=40, deadline=None)
    def test_partition(self, m):
        comps = connected_components(m)
        union = np.zeros_like(m)
        for comp in comps:
            assert not (union & comp).any()  # pairwise disjoint
            union |= comp
        assert np.array_equal(union, m)


class TestErrorRegions:
    def test_equal_masks(self):
        m = mask_from_pixels((3, 3), [(1, 1)])
        regions = error_regions(m, m)
        assert not regions.false_negative.any()
        assert not regions.false_positive.any()

    def test_empty_prediction(self):
        gt = mask_from_pixels((3, 3), [(0, 1), (1, 1)])
        regions = error_regions(np.zeros_like(gt), gt)
        assert np.array_equal(regions.false_negative, gt)
        assert not regions.false_positive.any()

    def test_mixed_case(self):
        gt = mask_from_pixels((4, 4), [(0, 0), (0, 1), (1, 1)])
        pred = mask_from_pixels((4, 4), [(1, 1), (3, 3)])
        regions = error_regions(pred, gt)
        assert np.count_nonzero(regions.false_negative) == 2
        assert np.count_nonzero(regions.false_positive) == 1

    @given(small_masks, st.data())
    def test_disjoint_and_xor(self, pred, data):
        gt = data.draw(arrays(bool, st.just(pred.shape)))
        regions = error_regions(pred, gt)
        assert not (regions.false_negative & regions.false_positive).any()
        assert np.array_equal(regions.false_negative | regions.false_positive, pred ^ gt)


class TestCorrectionClick:
    def test_larger_fn_wins(self):
        gt = mask_from_pixels((6, 6), [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)])
        pred = mask_from_pixels((6, 6), [(4, 4), (4, 5)])
        click = sample_correction_click(pred, gt)
        assert click.positive
        assert gt[click.row, click.col]

    def test_converged(self):
        m = mask_from_pixels((3, 3), [(1, 1)])
        assert sample_correction_click(m, m) is None

    def test_single_pixel_fp(self):
        gt = np.zeros((3, 3), dtype=bool)
        pred = mask_from_pixels((3, 3), [(2, 0)])
        click = sample_correction_click(pred, gt)
        assert (click.row, click.col, click.positive) == (2, 0, False)

    def test_random_placement_stays_inside(self):
        rng = np.random.default_rng(0)
        gt = np.zeros((8, 8), dtype=bool)
        gt[2:6, 2:6] = True
        pred = np.zeros_like(gt)
        for _ in range(20):
            click = sample_correction_click(pred, gt, rng=rng, placement="random")
            assert gt[click.row, click.col] and click.positive

    def test_random_placement_requires_rng(self):
        gt = mask_from_pixels((3, 3), [(0, 0)])
        with pytest.raises(ValueError):
            sample_correction_click(np.zeros_like(gt), gt, placement="random")

    @given(small_masks, st.data())
    @settings(max_examples=60, deadline=None)
    def test_selection_matches_reference(self, pred, data):
        gt = data.draw(arrays(bool, st.just(pred.shape)))
        got = largest_error_component(pred, gt)
        expected = largest_error_component_reference(pred, gt)
        if expected is None:
            assert got is None
        else:
            assert got is not None
            assert np.array_equal(got[0], expected[0])
            assert got[1] == expected[1]

    @given(small_masks, st.data())
    @settings(max_examples=40, deadline=None)
    def test_click_lands_in_selected_component(self, pred, data):
        gt = data.draw(arrays(bool, st.just(pred.shape)))
        click = sample_correction_click(pred, gt)
        selected = largest_error_component(pred, gt)
        if selected is None:
            assert click is None
        else:
            comp, is_fn = selected
            assert comp[click.row, click.col]
            assert click.positive == is_fn


class TestMaskCenter:
    def test_matches_brute_force_on_small_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m = rng.random((9, 9)) < 0.45
            if not m.any():
                m[4, 4] = True
            assert mask_center(m) == brute_force_center(m)

    def test_plus_shape_center(self):
        m = mask_from_pixels((5, 5), [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)])
        assert mask_center(m) == (2, 2)


class TestBoxFromMask:
    def test_tight(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:5, 3:6] = True
        assert box_from_mask(m) == BoxPrompt(2, 3, 4, 5)

    def test_margin_clamped(self):
        m = np.zeros((6, 6), dtype=bool)
        m[2:5, 3:6] = True
        assert box_from_mask(m, margin=10) == BoxPrompt(0, 0, 5, 5)

    def test_full_image_any_margin(self):
        m = np.ones((4, 7), dtype=bool)
        for margin in (0, 1, 100):
            assert box_from_mask(m, margin) == BoxPrompt(0, 0, 3, 6)

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMaskError):
            box_from_mask(np.zeros((3, 3), bool))

    @given(small_masks)
    @settings(max_examples=60)
    def test_tight_box_is_minimal(self, m):
        if not m.any():
            return
        box = box_from_mask(m, margin=0)
        rows, cols = np.nonzero(m)
        assert box.row_min == rows.min() and box.row_max == rows.max()
        assert box.col_min == cols.min() and box.col_max == cols.max()


class TestSamplePoint:
    def test_single_pixel(self):
        m = mask_from_pixels((5, 5), [(3, 1)])
        p = sample_point_in_mask(m, np.random.default_rng(0))
        assert (p.row, p.col, p.positive) == (3, 1, True)

    def test_deterministic_given_seed(self):
        m = np.zeros((10, 10), dtype=bool)
        m[1:9, 1:9] = True
        p1 = sample_point_in_mask(m, np.random.default_rng(123))
        p2 = sample_point_in_mask(m, np.random.default_rng(123))
        assert p1 == p2

    def test_uniformity_chi_square(self):
        # 10x10 all-foreground, 10k draws: each pixel within 3 sigma of uniform
        m = np.ones((10, 10), dtype=bool)
        rng = np.random.default_rng(42)
        counts = np.zeros(100)
        n = 10_000
        for _ in range(n):
            p = sample_point_in_mask(m, rng)
            counts[p.row * 10 + p.col] += 1
        expected = n / 100
        sigma = (n * (1 / 100) * (99 / 100)) ** 0.5
        assert np.all(np.abs(counts - expected) <= 3.2 * sigma)

    def test_empty_rejected(self):
        with pytest.raises(EmptyMaskError):
            sample_point_in_mask(np.zeros((2, 2), bool), np.random.default_rng(0))
