"""Pixel-level primitives: difference maps, Otsu thresholding, segmentation
maps, extreme-point boxes, cropping and grid stitching."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BoundsError, DimensionError, FormatError

OTSU_DEGENERATE_VARIANCE = 1e-12


def _check_pixels(pixels, channels=3):
    pixels = np.asarray(pixels)
    if channels is not None:
        if pixels.ndim != 3 or pixels.shape[2] != channels:
            raise FormatError(f"expected HxWx{channels} pixel grid, got shape {pixels.shape}")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise FormatError("pixel intensities must lie in [0, 1]")
    return pixels.astype(np.float64) if pixels.dtype.kind != "f" else pixels


@dataclass
class ImagePatch:
    """An NxMx3 pixel block in [0, 1]; the unit of reconstruction."""

    pixels: np.ndarray
    row: Optional[int] = None
    col: Optional[int] = None

    def __post_init__(self):
        self.pixels = _check_pixels(self.pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class DifferenceMap:
    """Single-channel per-pixel reconstruction difference in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise FormatError(f"difference map must be 2-D, got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise FormatError("difference values must lie in [0, 1]")


@dataclass
class SegmentationMap:
    """Binary anomaly mask plus the threshold that produced it.

    ``threshold_used`` is None for composite maps (stitched grids)."""

    mask: np.ndarray
    threshold_used: Optional[float] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 2:
            raise FormatError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise FormatError("mask must be binary")
        self.mask = self.mask.astype(np.uint8)

    @property
    def n_segmented(self):
        return int(self.mask.sum())


@dataclass(frozen=True)
class BoundingBox:
    """Integer pixel box, half-open: [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if int(v) != v:
                raise FormatError("box coordinates must be integers")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise FormatError(
                f"degenerate box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def shifted(self, dx, dy):
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def inside(self, width, height):
        return 0 <= self.x_min and 0 <= self.y_min and self.x_max <= width and self.y_max <= height


@dataclass
class CroppedLocalization:
    """Pixels cut from a patch at a localization box."""

    pixels: np.ndarray
    box: BoundingBox

    def __post_init__(self):
        self.pixels = _check_pixels(self.pixels)
        if self.pixels.shape[:2] != (self.box.height, self.box.width):
            raise DimensionError("crop dimensions must equal box dimensions")


# ---------------------------------------------------------------------------
# difference maps
# ---------------------------------------------------------------------------

def difference_map(original, reconstruction):
    """Channel-averaged absolute difference between a patch and its
    reconstruction.  Values near zero mark well-reconstructed regions, values
    near one anomalous ones."""
    a, b = original.pixels, reconstruction.pixels
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return DifferenceMap(np.abs(b - a).mean(axis=2))


def _box_mean(img, radius):
    """Mean filter with reflect padding, same output size."""
    k = 2 * radius + 1
    padded = np.pad(img, radius, mode="reflect")
    csum = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    h, w = img.shape
    return (
        csum[k:k + h, k:k + w]
        - csum[:h, k:k + w]
        - csum[k:k + h, :w]
        + csum[:h, :w]
    ) / (k * k)


def ssim_map(original, reconstruction, window=7):
    """Structural-dissimilarity map: (1 - local SSIM) / 2, channel-averaged.

    Alternative difference backend; the absolute difference is the default.
    Uses a uniform window and reflect padding.
    """
    a, b = original.pixels, reconstruction.pixels
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    radius = window // 2
    c1, c2 = 0.01**2, 0.03**2
    out = np.zeros(a.shape[:2])
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _box_mean(x, radius), _box_mean(y, radius)
        vx = _box_mean(x * x, radius) - mx * mx
        vy = _box_mean(y * y, radius) - my * my
        cxy = _box_mean(x * y, radius) - mx * my
        ssim = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        out += (1.0 - ssim) / 2.0
    out /= a.shape[2]
    return DifferenceMap(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# thresholding and segmentation
# ---------------------------------------------------------------------------

def otsu_threshold(diff, bins=256):
    """Threshold maximizing between-class variance over the binned histogram.

    The histogram spans the full [0, 1] intensity range.  Candidate
    thresholds are bin upper edges; ties break toward the lowest bin.
    Returns None (degenerate) when the binned values carry no variance,
    i.e. every pixel falls into one bin - the "no segmentation" outcome of
    an autoencoder that reconstructs its input too well.
    """
    values = diff.values
    if values.size == 0:
        raise DimensionError("cannot threshold an empty map")
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    total = hist.sum()
    p = hist / total
    centers = (edges[:-1] + edges[1:]) / 2.0
    mean_all = (p * centers).sum()
    total_var = (p * (centers - mean_all) ** 2).sum()
    if total_var < OTSU_DEGENERATE_VARIANCE:
        return None
    # cumulative class probability / mean below each candidate threshold
    w0 = np.cumsum(p)[:-1]
    mu0 = np.cumsum(p * centers)[:-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(bins - 1)
    between[valid] = (mean_all * w0 - mu0)[valid] ** 2 / (w0 * w1)[valid]
    best = int(np.argmax(between))  # argmax takes the first (lowest) maximum
    return float(edges[best + 1])


def threshold_map(diff, t):
    """Binarize a difference map: mask = 1 where value > t (strict)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {t}")
    return SegmentationMap((diff.values > t).astype(np.uint8), threshold_used=float(t))


def extreme_points(seg):
    """Bounding box spanning the leftmost/rightmost/topmost/bottommost
    segmented pixels, half-open; None for an empty mask."""
    rows, cols = np.nonzero(seg.mask)
    if rows.size == 0:
        return None
    return BoundingBox(
        int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1
    )


def min_area_filter(seg, min_pixels=0):
    """Suppress masks with fewer than ``min_pixels`` segmented pixels.

    Default 0 leaves every mask untouched."""
    if min_pixels < 0:
        raise ValueError("min_pixels must be >= 0")
    if seg.n_segmented < min_pixels:
        return SegmentationMap(np.zeros_like(seg.mask), threshold_used=seg.threshold_used)
    return seg


def crop(patch, box):
    """Exact pixel copy of the box region of a patch."""
    if not box.inside(patch.width, patch.height):
        raise BoundsError(
            f"box ({box.x_min},{box.y_min},{box.x_max},{box.y_max}) outside "
            f"{patch.width}x{patch.height} patch"
        )
    pixels = patch.pixels[box.y_min:box.y_max, box.x_min:box.x_max].copy()
    return CroppedLocalization(pixels, box)


# ---------------------------------------------------------------------------
# stitching
# ---------------------------------------------------------------------------

def _stitch_grid(grid, getter):
    if not grid or not grid[0]:
        raise DimensionError("grid must be non-empty")
    n_cols = len(grid[0])
    cell = getter(grid[0][0])
    for r, row in enumerate(grid):
        if len(row) != n_cols:
            raise DimensionError(f"grid row {r} has {len(row)} cells, expected {n_cols}")
        for c, item in enumerate(row):
            if item is None:
                raise DimensionError(f"missing grid cell ({r}, {c})")
            if getter(item).shape != cell.shape:
                raise DimensionError(f"grid cell ({r}, {c}) has mismatched size")
    return np.block([[getter(item) for item in row] for row in grid])


def stitch_segmentation(grid):
    """Mosaic a complete rectangular grid (list of rows) of segmentation maps
    into one full-frame map.  Patches are disjoint, so no blending."""
    return SegmentationMap(_stitch_grid(grid, lambda s: s.mask), threshold_used=None)


def stitch_patches(grid):
    """Mosaic a complete rectangular grid (list of rows) of image patches
    back into a full pixel array; inverse of grid splitting."""
    return _stitch_grid(grid, lambda p: p.pixels)
