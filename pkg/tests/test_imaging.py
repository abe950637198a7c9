import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fodloc.errors import BoundsError, DimensionError, FormatError
from fodloc.imaging import (
    BoundingBox,
    DifferenceMap,
    ImagePatch,
    SegmentationMap,
    crop,
    difference_map,
    extreme_points,
    min_area_filter,
    otsu_threshold,
    ssim_map,
    stitch_patches,
    stitch_segmentation,
    threshold_map,
)
from .conftest import random_patch


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------

def otsu_bruteforce(values, bins=256):
    """Exhaustive between-class variance maximizer over all bin splits."""
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    p = hist / hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2
    mu = (p * centers).sum()
    if (p * (centers - mu) ** 2).sum() < 1e-12:
        return None
    best_k, best_v = None, -1.0
    for k in range(bins - 1):
        w0 = p[:k + 1].sum()
        w1 = 1.0 - w0
        if w0 <= 0 or w1 <= 0:
            continue
        mu0 = (p[:k + 1] * centers[:k + 1]).sum() / w0
        mu1 = (p[k + 1:] * centers[k + 1:]).sum() / w1
        v = w0 * w1 * (mu0 - mu1) ** 2
        if v > best_v + 1e-18:
            best_v, best_k = v, k
    return float(edges[best_k + 1])


def ssim_reference(a, b, window):
    """Direct per-pixel SSIM with a uniform window and reflect padding."""
    r = window // 2
    out = np.zeros(a.shape[:2])
    for ch in range(a.shape[2]):
        x = np.pad(a[:, :, ch], r, mode="reflect")
        y = np.pad(b[:, :, ch], r, mode="reflect")
        c1, c2 = 0.01**2, 0.03**2
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                wx = x[i:i + window, j:j + window]
                wy = y[i:i + window, j:j + window]
                mx, my = wx.mean(), wy.mean()
                vx, vy = wx.var(), wy.var()
                cxy = (wx * wy).mean() - mx * my
                s = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
                    (mx**2 + my**2 + c1) * (vx + vy + c2)
                )
                out[i, j] += (1 - s) / 2
    return np.clip(out / a.shape[2], 0, 1)


# ---------------------------------------------------------------------------
# difference maps
# ---------------------------------------------------------------------------

class TestDifferenceMap:
    def test_identical_inputs_give_zero(self, rng):
        p = random_patch(rng)
        assert difference_map(p, p).values.max() == 0.0

    def test_full_range(self):
        a = ImagePatch(np.zeros((8, 8, 3)))
        b = ImagePatch(np.ones((8, 8, 3)))
        assert np.all(difference_map(a, b).values == 1.0)

    def test_channel_average(self):
        a = ImagePatch(np.full((1, 1, 3), [0.2, 0.4, 0.6]))
        b = ImagePatch(np.full((1, 1, 3), [0.4, 0.4, 0.2]))
        assert difference_map(a, b).values[0, 0] == pytest.approx(0.2)

    def test_symmetric(self, patch_pair):
        a, b = patch_pair
        assert np.array_equal(difference_map(a, b).values, difference_map(b, a).values)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            difference_map(random_patch(rng, 8, 8), random_patch(rng, 8, 9))


class TestSsimMap:
    def test_identical_inputs_give_zero(self, rng):
        p = random_patch(rng, 16, 16)
        assert ssim_map(p, p).values.max() < 1e-9

    def test_constant_offset_uniform(self):
        a = ImagePatch(np.full((16, 16, 3), 0.3))
        b = ImagePatch(np.full((16, 16, 3), 0.7))
        values = ssim_map(a, b).values
        assert values.std() < 1e-12
        assert values.mean() > 0.1

    def test_matches_reference(self, rng):
        a, b = random_patch(rng, 16, 16), random_patch(rng, 16, 16)
        got = ssim_map(a, b, window=7).values
        want = ssim_reference(a.pixels, b.pixels, 7)
        assert np.abs(got - want).max() < 1e-6

    def test_window_validation(self, patch_pair):
        a, b = patch_pair
        with pytest.raises(ValueError):
            ssim_map(a, b, window=4)


# ---------------------------------------------------------------------------
# Otsu thresholding
# ---------------------------------------------------------------------------

class TestOtsu:
    def test_constant_map_degenerate(self):
        assert otsu_threshold(DifferenceMap(np.full((16, 16), 0.25))) is None

    def test_subbin_map_degenerate(self):
        values = np.full((16, 16), 0.001)
        values[0, 0] = 0.0035  # same 1/256 bin
        assert otsu_threshold(DifferenceMap(values)) is None

    def test_two_spikes_lowest_separating_bin(self):
        values = np.zeros((4, 4))
        values[:2] = 1.0
        assert otsu_threshold(DifferenceMap(values)) == pytest.approx(1 / 256)

    def test_matches_bruteforce_on_random_maps(self, rng):
        for _ in range(60):
            kind = rng.integers(3)
            if kind == 0:
                values = rng.uniform(0, 1, size=(20, 20))
            elif kind == 1:
                lo, hi = sorted(rng.uniform(0, 1, size=2))
                values = np.where(rng.random((20, 20)) < 0.5, lo, hi)
            else:
                values = np.clip(rng.normal(0.3, 0.1, size=(20, 20)), 0, 1)
            got = otsu_threshold(DifferenceMap(values))
            want = otsu_bruteforce(values)
            assert got == want

    def test_rejects_empty(self):
        with pytest.raises(DimensionError):
            otsu_threshold(DifferenceMap(np.zeros((0, 0))))


class TestThresholdMap:
    def test_all_below_threshold_one(self, rng):
        d = DifferenceMap(rng.uniform(0, 1, size=(8, 8)))
        assert threshold_map(d, 1.0).n_segmented == 0

    def test_strict_inequality_at_boundary(self):
        d = DifferenceMap(np.array([[0.5, 0.6]]))
        mask = threshold_map(d, 0.5).mask
        assert mask.tolist() == [[0, 1]]

    def test_simple_split(self):
        d = DifferenceMap(np.array([[0.1, 0.9]]))
        assert threshold_map(d, 0.5).mask.tolist() == [[0, 1]]

    def test_threshold_out_of_range(self):
        with pytest.raises(ValueError):
            threshold_map(DifferenceMap(np.zeros((2, 2))), 1.5)


# ---------------------------------------------------------------------------
# extreme points, min-area, crop
# ---------------------------------------------------------------------------

class TestExtremePoints:
    def test_empty_mask(self):
        assert extreme_points(SegmentationMap(np.zeros((8, 8)))) is None

    def test_single_pixel(self):
        mask = np.zeros((10, 10))
        mask[5, 7] = 1
        assert extreme_points(SegmentationMap(mask)) == BoundingBox(7, 5, 8, 6)

    def test_three_pixels(self):
        mask = np.zeros((12, 12))
        for r, c in ((2, 5), (7, 1), (4, 9)):
            mask[r, c] = 1
        assert extreme_points(SegmentationMap(mask)) == BoundingBox(1, 2, 10, 8)

    def test_box_contains_all_segmented_pixels(self, rng):
        for _ in range(25):
            mask = (rng.random((16, 16)) < 0.2).astype(np.uint8)
            box = extreme_points(SegmentationMap(mask))
            rows, cols = np.nonzero(mask)
            if rows.size == 0:
                assert box is None
                continue
            assert np.all((cols >= box.x_min) & (cols < box.x_max))
            assert np.all((rows >= box.y_min) & (rows < box.y_max))
            # touches all four extremes
            assert cols.min() == box.x_min and cols.max() == box.x_max - 1
            assert rows.min() == box.y_min and rows.max() == box.y_max - 1


class TestMinAreaFilter:
    def test_zero_is_identity(self, rng):
        seg = SegmentationMap((rng.random((8, 8)) < 0.5).astype(np.uint8))
        assert np.array_equal(min_area_filter(seg, 0).mask, seg.mask)

    def test_small_mask_cleared(self):
        mask = np.zeros((8, 8))
        mask[2, 2:5] = 1
        assert min_area_filter(SegmentationMap(mask), 5).n_segmented == 0

    def test_large_mask_kept(self):
        mask = np.zeros((8, 8))
        mask[2:4, 2:7] = 1
        seg = min_area_filter(SegmentationMap(mask), 5)
        assert np.array_equal(seg.mask, mask.astype(np.uint8))


class TestCrop:
    def test_full_patch(self, rng):
        p = random_patch(rng, 10, 12)
        c = crop(p, BoundingBox(0, 0, 12, 10))
        assert np.array_equal(c.pixels, p.pixels)

    def test_single_pixel(self, rng):
        p = random_patch(rng, 6, 6)
        c = crop(p, BoundingBox(0, 0, 1, 1))
        assert np.array_equal(c.pixels[0, 0], p.pixels[0, 0])

    def test_dimensions(self, rng):
        p = random_patch(rng, 100, 100)
        c = crop(p, BoundingBox(10, 20, 60, 90))
        assert c.pixels.shape == (70, 50, 3)

    def test_out_of_bounds(self, rng):
        with pytest.raises(BoundsError):
            crop(random_patch(rng, 8, 8), BoundingBox(4, 4, 9, 9))

    def test_crop_reembed_lossless(self, rng):
        p = random_patch(rng, 20, 20)
        box = BoundingBox(3, 5, 11, 14)
        c = crop(p, box)
        rebuilt = p.pixels.copy()
        rebuilt[box.y_min:box.y_max, box.x_min:box.x_max] = c.pixels
        assert np.array_equal(rebuilt, p.pixels)


# ---------------------------------------------------------------------------
# stitching
# ---------------------------------------------------------------------------

class TestStitch:
    def test_single_cell(self, rng):
        seg = SegmentationMap((rng.random((8, 8)) < 0.5).astype(np.uint8))
        assert np.array_equal(stitch_segmentation([[seg]]).mask, seg.mask)

    def test_two_wide(self, rng):
        a = SegmentationMap(np.zeros((4, 4)))
        b = SegmentationMap(np.ones((4, 4)))
        out = stitch_segmentation([[a, b]])
        assert out.mask.shape == (4, 8)
        assert out.mask[:, 4:].all() and not out.mask[:, :4].any()

    def test_grid_8x4(self):
        grid = [
            [SegmentationMap(np.zeros((448, 448), dtype=np.uint8)) for _ in range(8)]
            for _ in range(4)
        ]
        assert stitch_segmentation(grid).mask.shape == (1792, 3584)

    def test_missing_cell(self):
        seg = SegmentationMap(np.zeros((4, 4)))
        with pytest.raises(DimensionError):
            stitch_segmentation([[seg, None]])

    def test_ragged_grid(self):
        seg = SegmentationMap(np.zeros((4, 4)))
        with pytest.raises(DimensionError):
            stitch_segmentation([[seg, seg], [seg]])


class TestTypes:
    def test_patch_rejects_out_of_range(self):
        with pytest.raises(FormatError):
            ImagePatch(np.full((4, 4, 3), 1.5))

    def test_patch_rejects_grayscale(self):
        with pytest.raises(FormatError):
            ImagePatch(np.zeros((4, 4)))

    def test_box_rejects_degenerate(self):
        with pytest.raises(FormatError):
            BoundingBox(5, 5, 5, 9)

    def test_box_geometry(self):
        box = BoundingBox(10, 20, 60, 90)
        assert (box.width, box.height, box.area) == (50, 70, 3500)

    def test_mask_must_be_binary(self):
        with pytest.raises(FormatError):
            SegmentationMap(np.full((2, 2), 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_extreme_points_of_thresholded_map_property(seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 1, size=(12, 12))
    t = float(rng.uniform(0, 1))
    seg = threshold_map(DifferenceMap(values), t)
    box = extreme_points(seg)
    rows, cols = np.nonzero(seg.mask)
    if rows.size == 0:
        assert box is None
    else:
        assert box.x_min == cols.min() and box.x_max == cols.max() + 1
        assert box.y_min == rows.min() and box.y_max == rows.max() + 1
