"""Dataset handling: real frame ingest, annotation CSVs, and the
deterministic synthetic pavement-scene generator.

The synthetic generator stands in for field-collected imagery at desk scale:
clean patches are textured pavement (smooth gray base, gentle gradient,
band-limited noise, occasional lane markings), debris patches additionally
composite small high-contrast shapes whose tight boxes become ground truth.
"""

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import AnnotationError, ConfigError, FodlocError, FormatError, SizeError
from .imaging import BoundingBox, ImagePatch, _check_pixels

ANNOTATION_HEADER = ["patch_id", "x_min", "y_min", "x_max", "y_max", "label"]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    """A full-resolution RGB image with intensities in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.pixels = _check_pixels(self.pixels)
        if self.height < 1 or self.width < 1:
            raise FormatError("frame must be at least 1x1")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchSpec:
    """Patch geometry: width N and height M in pixels."""

    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError(f"patch size must be >= 16, got {self.width}x{self.height}")


@dataclass
class GroundTruth:
    """An annotated debris box within one patch."""

    patch_id: str
    box: BoundingBox
    label: str


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Knobs of the synthetic scene generator; the seed fully determines
    the output."""

    seed: int = 0
    patch_size: PatchSpec = PatchSpec(128, 128)
    # texture: the micro-noise is amplitude-bounded (hard clip), so a model
    # that learns the smooth components reconstructs clean patches to within
    # one 1/256 histogram bin
    base_gray: Tuple[float, float] = (0.35, 0.55)
    gradient_amplitude: float = 0.06
    noise_amplitude: float = 0.0015
    noise_scale: float = 3.0
    marking_prob: float = 0.10
    crack_prob: float = 0.0
    marking_softness: float = 4.0
    # objects
    object_count: Tuple[int, int] = (1, 1)
    object_size: Tuple[int, int] = (16, 40)
    object_shapes: Tuple[str, ...] = ("disk", "square", "triangle", "bar")
    object_color: Tuple[float, float] = (0.70, 1.0)
    object_edge_softness: float = 0.8
    fraction_clean: float = 0.0

    def __post_init__(self):
        lo, hi = self.object_size
        if not (0 < lo <= hi):
            raise ConfigError(f"bad object size range ({lo}, {hi})")
        if hi >= min(self.patch_size.width, self.patch_size.height):
            raise ConfigError("object sizes must be smaller than the patch")
        if not 0 <= self.fraction_clean <= 1:
            raise ConfigError("fraction_clean must be in [0, 1]")
        if self.object_count[0] < 0 or self.object_count[0] > self.object_count[1]:
            raise ConfigError(f"bad object count range {self.object_count}")
        unknown = set(self.object_shapes) - {"disk", "square", "triangle", "bar"}
        if unknown:
            raise ConfigError(f"unknown object shapes: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def load_frame(path):
    """Load a PNG/JPEG image as a Frame with intensities in [0, 1]."""
    path = Path(path)
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise FormatError(f"{path.name}: expected a 3-channel RGB image, got mode {img.mode!r}")
        pixels = np.asarray(img, dtype=np.float64) / 255.0
    return Frame(pixels, source_id=path.stem)


def save_png(path, pixels):
    """Write [0, 1] float pixels to an 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# resizing and patching
# ---------------------------------------------------------------------------

def bilinear_resize(pixels, out_w, out_h):
    """Bilinear resample with half-pixel centers to (out_h, out_w, C)."""
    h, w = pixels.shape[:2]
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    top = pixels[np.ix_(y0, x0)] * (1 - fx) + pixels[np.ix_(y0, x1)] * fx
    bot = pixels[np.ix_(y1, x0)] * (1 - fx) + pixels[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def resize_to_grid(frame, spec):
    """Resize a frame down to the nearest patch-grid multiple (floor) of the
    patch size, bilinear."""
    cols = frame.width // spec.width
    rows = frame.height // spec.height
    if cols < 1 or rows < 1:
        raise SizeError(
            f"frame {frame.width}x{frame.height} smaller than one "
            f"{spec.width}x{spec.height} patch"
        )
    out_w, out_h = cols * spec.width, rows * spec.height
    if (out_w, out_h) == (frame.width, frame.height):
        return frame
    resized = np.clip(bilinear_resize(frame.pixels, out_w, out_h), 0.0, 1.0)
    return Frame(resized, source_id=frame.source_id)


def split_into_patches(frame, spec):
    """Row-major list of non-overlapping patches with grid coordinates."""
    if frame.width % spec.width or frame.height % spec.height:
        raise SizeError(
            f"frame {frame.width}x{frame.height} is not a multiple of "
            f"{spec.width}x{spec.height}; resize_to_grid first"
        )
    patches = []
    for r in range(frame.height // spec.height):
        for c in range(frame.width // spec.width):
            block = frame.pixels[
                r * spec.height:(r + 1) * spec.height,
                c * spec.width:(c + 1) * spec.width,
            ].copy()
            patches.append(ImagePatch(block, row=r, col=c))
    return patches


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def load_annotations(path, patch_size=None):
    """Parse an annotation CSV into GroundTruth records.

    When ``patch_size`` is given, every box is validated against the patch
    bounds.  Malformed rows raise AnnotationError with their line number.
    """
    truths = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise AnnotationError("empty file, expected header") from None
        if header != ANNOTATION_HEADER:
            raise AnnotationError(f"bad header {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise AnnotationError(f"expected 6 fields, got {len(row)}", line=lineno)
            patch_id, label = row[0], row[5]
            try:
                x_min, y_min, x_max, y_max = (int(v) for v in row[1:5])
            except ValueError:
                raise AnnotationError(f"non-integer coordinates {row[1:5]}", line=lineno) from None
            try:
                box = BoundingBox(x_min, y_min, x_max, y_max)
            except FodlocError as exc:
                raise AnnotationError(str(exc), line=lineno) from None
            if patch_size is not None and not box.inside(patch_size.width, patch_size.height):
                raise AnnotationError(
                    f"box ({x_min},{y_min},{x_max},{y_max}) outside "
                    f"{patch_size.width}x{patch_size.height} patch",
                    line=lineno,
                )
            truths.append(GroundTruth(patch_id, box, label))
    return truths


def save_annotations(path, truths):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for gt in truths:
            writer.writerow(
                [gt.patch_id, gt.box.x_min, gt.box.y_min, gt.box.x_max, gt.box.y_max, gt.label]
            )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _gaussian_blur(img, sigma):
    """Separable gaussian blur, reflect padding."""
    radius = max(1, int(round(3 * sigma)))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    from numpy.lib.stride_tricks import sliding_window_view

    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(img, pad, mode="reflect")
        img = sliding_window_view(padded, 2 * radius + 1, axis=axis) @ kernel
    return img


def _pixel_grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _shape_distance(shape, u, v, w, h):
    """Signed inside-distance of local coordinates to a shape with the given
    extents (positive inside)."""
    if shape == "disk":
        return w / 2.0 - np.hypot(u, v * (w / h))
    if shape in ("square", "bar"):
        return np.minimum(w / 2.0 - np.abs(u), h / 2.0 - np.abs(v))
    if shape == "triangle":
        # isoceles triangle, apex at (0, -h/2), base corners (+-w/2, h/2);
        # inside distance = min signed distance to the three edge lines
        base = h / 2.0 - v
        slanted = ((v + h / 2.0) * w / 2.0 - np.abs(u) * h) / np.hypot(h, w / 2.0)
        return np.minimum(base, slanted)
    raise ConfigError(f"unknown shape {shape!r}")


def _raster_object(shape, h, w, cx, cy, target_w, target_h, angle, softness):
    """Rasterize a soft object mask whose binary (alpha > 0.5) bounding box
    hits the target extents to within a pixel."""
    xs, ys = _pixel_grid(h, w)
    cos_a, sin_a = np.cos(angle), np.sin(angle)

    def render(scale_x, scale_y):
        dx = (xs - cx) / scale_x
        dy = (ys - cy) / scale_y
        u = cos_a * dx + sin_a * dy
        v = -sin_a * dx + cos_a * dy
        sd = _shape_distance(shape, u, v, target_w, target_h)
        return np.clip(0.5 + sd / max(softness, 1e-6), 0.0, 1.0)

    alpha = render(1.0, 1.0)
    binary = alpha > 0.5
    if not binary.any():
        return alpha, binary
    rows, cols = np.nonzero(binary)
    got_w = cols.max() - cols.min() + 1
    got_h = rows.max() - rows.min() + 1
    if got_w != target_w or got_h != target_h:
        alpha = render(target_w / got_w, target_h / got_h)
        binary = alpha > 0.5
    return alpha, binary


def _render_texture(rng, cfg):
    h, w = cfg.patch_size.height, cfg.patch_size.width
    xs, ys = _pixel_grid(h, w)
    tex = np.full((h, w), rng.uniform(*cfg.base_gray))
    # gentle illumination gradient
    theta = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.3, 1.0) * cfg.gradient_amplitude
    tex += amp * 2.0 * (np.cos(theta) * (xs / w - 0.5) + np.sin(theta) * (ys / h - 0.5))
    # amplitude-bounded band-limited micro-noise
    if cfg.noise_amplitude > 0:
        noise = _gaussian_blur(rng.standard_normal((h, w)), cfg.noise_scale)
        std = noise.std()
        if std > 0:
            tex += np.clip(2.0 * cfg.noise_amplitude * noise / std,
                           -cfg.noise_amplitude, cfg.noise_amplitude)
    # lane marking: a soft bright stripe
    if rng.random() < cfg.marking_prob:
        phi = rng.uniform(0, np.pi)
        px, py = rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h)
        width = rng.uniform(10, 20)
        delta = rng.uniform(0.08, 0.16)
        dist = np.abs(-np.sin(phi) * (xs - px) + np.cos(phi) * (ys - py))
        profile = np.clip((width / 2 - dist) / max(cfg.marking_softness, 1e-6) + 0.5, 0, 1)
        tex += delta * profile
    # crack: a thin dark random polyline
    if rng.random() < cfg.crack_prob:
        n_seg = int(rng.integers(3, 6))
        pts = [np.array([rng.uniform(0, w), rng.uniform(0, h)])]
        for _ in range(n_seg):
            step = rng.uniform(-0.35, 0.35, size=2) * np.array([w, h])
            pts.append(pts[-1] + step)
        dist = np.full((h, w), np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            denom = max(float(ab @ ab), 1e-9)
            t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0, 1)
            dist = np.minimum(dist, np.hypot(xs - a[0] - t * ab[0], ys - a[1] - t * ab[1]))
        depth = rng.uniform(0.08, 0.2)
        tex -= depth * np.clip((1.5 - dist) / 1.2 + 0.5, 0, 1)
    # replicate to RGB with a slight constant color cast
    cast = rng.uniform(-0.01, 0.01, size=3)
    return np.clip(tex[:, :, None] + cast[None, None, :], 0.0, 1.0)


def generate_synthetic_scene(config, return_masks=False):
    """Generate one synthetic patch and its ground truth, deterministically
    from the config seed.

    Returns ``(ImagePatch, truths)``; with ``return_masks=True`` a list of
    binary object masks is appended (one per ground truth), which the tests
    use as the bounding-box oracle.
    """
    rng = np.random.default_rng(config.seed)
    h, w = config.patch_size.height, config.patch_size.width
    img = _render_texture(rng, config)

    truths = []
    masks = []
    clean = rng.random() < config.fraction_clean
    count = 0 if clean else int(rng.integers(config.object_count[0], config.object_count[1] + 1))
    lo, hi = config.object_size
    # draw targets off the range ends so the +-1 px raster slack stays inside
    t_lo, t_hi = (lo + 1, hi - 1) if hi - lo >= 3 else (lo, hi)
    for _ in range(count):
        shape = str(rng.choice(config.object_shapes))
        if shape in ("disk", "square"):
            tw = th = int(rng.integers(t_lo, t_hi + 1))
        elif shape == "bar":
            tw = int(rng.integers(max(t_lo, (t_lo + t_hi) // 2), t_hi + 1))
            th = max(t_lo, tw // 3)
        else:
            tw = int(rng.integers(t_lo, t_hi + 1))
            th = int(rng.integers(t_lo, t_hi + 1))
        margin_x, margin_y = tw / 2 + 2, th / 2 + 2
        cx = rng.uniform(margin_x, w - margin_x)
        cy = rng.uniform(margin_y, h - margin_y)
        angle = 0.0 if shape == "disk" else rng.uniform(0, np.pi)
        color = rng.uniform(*config.object_color, size=3)
        alpha, binary = _raster_object(
            shape, h, w, cx, cy, tw, th, angle, config.object_edge_softness
        )
        rows, cols = np.nonzero(binary)
        if rows.size == 0:
            continue
        box = BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
        img = img * (1 - alpha[:, :, None]) + color[None, None, :] * alpha[:, :, None]
        truths.append(GroundTruth("", box, shape))
        masks.append(binary)

    patch = ImagePatch(np.clip(img, 0.0, 1.0))
    if return_masks:
        return patch, truths, masks
    return patch, truths


# ---------------------------------------------------------------------------
# dataset building
# ---------------------------------------------------------------------------

def _derived_seed(seed, split_code, index):
    ss = np.random.SeedSequence(entropy=(int(seed), int(split_code), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def build_dataset(config, n_train_clean, n_test, out_dir):
    """Write a synthetic dataset: clean train patches, test patches with an
    annotation CSV, and a JSONL manifest.  Deterministic for a fixed seed."""
    if n_train_clean < 0 or n_test < 0:
        raise ConfigError("patch counts must be >= 0")
    out_dir = Path(out_dir)
    (out_dir / "train").mkdir(parents=True, exist_ok=True)
    (out_dir / "test").mkdir(parents=True, exist_ok=True)

    records = []
    truths = []
    for split, code, count in (("train", 0, n_train_clean), ("test", 1, n_test)):
        for i in range(count):
            patch_id = f"{split}{i:06d}"
            scene_cfg = dataclasses.replace(
                config,
                seed=_derived_seed(config.seed, code, i),
                fraction_clean=1.0 if split == "train" else config.fraction_clean,
            )
            patch, gts = generate_synthetic_scene(scene_cfg)
            rel = f"{split}/{patch_id}.png"
            save_png(out_dir / rel, patch.pixels)
            records.append(
                {
                    "path": rel,
                    "split": split,
                    "width": config.patch_size.width,
                    "height": config.patch_size.height,
                }
            )
            for gt in gts:
                truths.append(GroundTruth(patch_id, gt.box, gt.label))

    save_annotations(out_dir / "annotations.csv", truths)
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_split(dataset_dir, split):
    """Load all patches of one manifest split; returns (ids, patches)."""
    dataset_dir = Path(dataset_dir)
    ids, patches = [], []
    for rec in read_manifest(dataset_dir / "manifest.jsonl"):
        if rec["split"] != split:
            continue
        frame = load_frame(dataset_dir / rec["path"])
        ids.append(Path(rec["path"]).stem)
        patches.append(ImagePatch(frame.pixels))
    return ids, patches


def load_split_array(dataset_dir, split):
    """Memory-lean loader: one manifest split as (ids, float32 NHWC array)."""
    dataset_dir = Path(dataset_dir)
    ids, arrays = [], []
    for rec in read_manifest(dataset_dir / "manifest.jsonl"):
        if rec["split"] != split:
            continue
        path = dataset_dir / rec["path"]
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise FormatError(f"{path.name}: expected RGB, got {img.mode!r}")
            arrays.append(np.asarray(img, dtype=np.float32) / np.float32(255.0))
        ids.append(Path(rec["path"]).stem)
    if not arrays:
        return ids, np.zeros((0, 0, 0, 3), dtype=np.float32)
    return ids, np.stack(arrays)
