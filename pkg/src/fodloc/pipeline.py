"""End-to-end inference: reconstruct, difference, threshold, box, classify.

Per patch: forward -> difference map -> Otsu threshold -> segmentation map
-> minimum-area filter -> extreme-point box.  A degenerate Otsu outcome
(the autoencoder reproduced the patch within one histogram bin) yields no
detection.  Frame-level orchestration resizes, splits, localizes each patch
and stitches the masks back together.
"""

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import imaging, model as model_mod
from .data import resize_to_grid, save_png, split_into_patches
from .errors import AnnotationError, FodlocError
from .imaging import BoundingBox, SegmentationMap

log = logging.getLogger(__name__)

DETECTION_HEADER = [
    "patch_id", "x_min", "y_min", "x_max", "y_max", "mean_difference", "label", "score",
]

UNKNOWN_LABEL = "unknown"


@dataclass
class Detection:
    """One localization; label/score are present iff classification ran."""

    patch_id: str
    box: BoundingBox
    mean_difference: float
    label: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        if (self.label is None) != (self.score is None):
            raise ValueError("label and score must be set together")


@dataclass(frozen=True)
class UnknownPolicy:
    """Below ``score_threshold`` a crop is labeled unknown; when ``save_dir``
    is set, such crops are persisted for later manual labeling."""

    score_threshold: float = 0.5
    save_dir: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")


def localize_patch(model, patch, patch_id="", min_pixels=0, bins=256, use_ssim=False):
    """Localize the anomaly in one patch; None when the difference map is
    degenerate or the (filtered) mask is empty.

    Returns ``(detection, segmentation_map)``; the map is empty for None
    detections so frames can still be stitched.
    """
    recon = model_mod.forward(model, patch)
    if use_ssim:
        diff = imaging.ssim_map(patch, recon)
    else:
        diff = imaging.difference_map(patch, recon)
    empty = SegmentationMap(np.zeros(diff.values.shape, dtype=np.uint8), threshold_used=None)
    t = imaging.otsu_threshold(diff, bins=bins)
    if t is None:
        return None, empty
    seg = imaging.min_area_filter(imaging.threshold_map(diff, t), min_pixels)
    box = imaging.extreme_points(seg)
    if box is None:
        return None, empty
    inside = diff.values[box.y_min:box.y_max, box.x_min:box.x_max]
    det = Detection(patch_id=patch_id, box=box, mean_difference=float(inside.mean()))
    return det, seg


def localize_frame(model, frame, spec, min_pixels=0, use_ssim=False):
    """Resize to the patch grid, localize every patch, stitch the masks and
    translate boxes into frame coordinates.

    Returns ``(detections, full_frame_segmentation)``.
    """
    resized = resize_to_grid(frame, spec)
    patches = split_into_patches(resized, spec)
    n_cols = resized.width // spec.width
    n_rows = resized.height // spec.height
    grid = [[None] * n_cols for _ in range(n_rows)]
    detections = []
    for patch in patches:
        patch_id = f"{frame.source_id}_r{patch.row}_c{patch.col}"
        det, seg = localize_patch(
            model, patch, patch_id=patch_id, min_pixels=min_pixels, use_ssim=use_ssim
        )
        grid[patch.row][patch.col] = seg
        if det is not None:
            detections.append(
                Detection(
                    patch_id=det.patch_id,
                    box=det.box.shifted(patch.col * spec.width, patch.row * spec.height),
                    mean_difference=det.mean_difference,
                )
            )
    return detections, imaging.stitch_segmentation(grid)


def classify_detections(classifier, patch, detections, policy=UnknownPolicy()):
    """Crop and classify each detection on this patch; scores below the
    policy threshold are labeled unknown (and the crop saved when a save
    directory is configured).  Returns new Detection records with labels."""
    labeled = []
    for index, det in enumerate(detections):
        cropped = imaging.crop(patch, det.box)
        pred = model_mod.classify(classifier, cropped)
        if pred.score < policy.score_threshold:
            label, score = UNKNOWN_LABEL, pred.score
            if policy.save_dir is not None:
                path = Path(policy.save_dir) / f"{det.patch_id}_{index}.png"
                try:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_png(path, cropped.pixels)
                except OSError as exc:
                    warnings.warn(f"could not save unknown crop {path}: {exc}")
        else:
            label, score = pred.label, pred.score
        labeled.append(
            Detection(
                patch_id=det.patch_id,
                box=det.box,
                mean_difference=det.mean_difference,
                label=label,
                score=float(score),
            )
        )
    return labeled


# ---------------------------------------------------------------------------
# detection report I/O
# ---------------------------------------------------------------------------

def write_detections_csv(path, detections):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_HEADER)
        for d in detections:
            writer.writerow([
                d.patch_id, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max,
                f"{d.mean_difference:.6f}",
                d.label if d.label is not None else "",
                f"{d.score:.6f}" if d.score is not None else "",
            ])


def read_detections_csv(path):
    detections = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DETECTION_HEADER:
            raise AnnotationError(f"bad detection header {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DETECTION_HEADER):
                raise AnnotationError(
                    f"expected {len(DETECTION_HEADER)} fields, got {len(row)}", line=lineno
                )
            try:
                box = BoundingBox(int(row[1]), int(row[2]), int(row[3]), int(row[4]))
                mean_diff = float(row[5])
            except (ValueError, FodlocError) as exc:
                raise AnnotationError(str(exc), line=lineno) from None
            label = row[6] or None
            score = float(row[7]) if row[7] else None
            detections.append(Detection(row[0], box, mean_diff, label=label, score=score))
    return detections
