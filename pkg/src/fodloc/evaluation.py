"""Scoring: IoU, detection-rate reports, threshold sweeps and the
architecture ablation harness.

A localization is correct when its IoU with a ground-truth box exceeds the
threshold (strict) after greedy one-to-one matching in descending IoU
order.  Detection rate is correct localizations over expected localizations;
patches with no ground truth contribute only false positives.
"""

import csv
import dataclasses
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FodlocError
from .imaging import ImagePatch, difference_map, otsu_threshold
from .pipeline import localize_patch
from .training import train_autoencoder

log = logging.getLogger(__name__)

NONE_WEAK = "none_weak"
NONE_STRONG = "none_strong"
SCORED = "scored"
FAILED = "failed"


@dataclass
class MatchRecord:
    """Outcome of matching one patch's predictions against its truths."""

    patch_id: str
    n_ground_truth: int
    n_correct: int
    n_false_positive: int
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)


@dataclass
class EvalReport:
    iou_threshold: float
    n_ground_truth: int
    n_correct: int
    n_false_positive: int
    detection_rate: float
    empty_ground_truth: bool
    records: List[MatchRecord] = field(default_factory=list)


@dataclass
class SweepCurve:
    """(iou_threshold, detection_rate) pairs; the rate is non-increasing."""

    points: List[Tuple[float, float]]

    def thresholds(self):
        return [p[0] for p in self.points]

    def rates(self):
        return [p[1] for p in self.points]


@dataclass
class AblationRow:
    name: str
    status: str  # scored | none_weak | none_strong | failed
    detection_rate: Optional[float]
    clean_mse: Optional[float]
    degenerate_fraction: Optional[float] = None
    median_clean_difference: Optional[float] = None
    error: Optional[str] = None


def iou(a, b):
    """Intersection-over-union of two half-open integer boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / float(a.area + b.area - inter)


def match_detections(preds, gts, iou_threshold, patch_id=""):
    """Greedy one-to-one matching in descending IoU order.

    A ground truth counts correct iff its matched prediction has
    IoU > iou_threshold; unmatched predictions are false positives.
    """
    pairs = []
    for pi, p in enumerate(preds):
        box_p = getattr(p, "box", p)
        for gi, g in enumerate(gts):
            box_g = getattr(g, "box", g)
            v = iou(box_p, box_g)
            if v > 0:
                pairs.append((v, pi, gi))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g = set(), set()
    matched = []
    for v, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        matched.append((pi, gi, v))
    n_correct = sum(1 for _, _, v in matched if v > iou_threshold)
    n_fp = len(preds) - sum(1 for _, _, v in matched if v > iou_threshold)
    return MatchRecord(
        patch_id=patch_id,
        n_ground_truth=len(gts),
        n_correct=n_correct,
        n_false_positive=n_fp,
        pairs=matched,
    )


def detection_rate(records, iou_threshold=0.3):
    """Aggregate per-patch match records into an EvalReport.

    ``records`` may be MatchRecords or a pre-counted ``(n_correct,
    n_ground_truth)`` tuple.  An empty ground-truth set yields rate 0 with
    the empty flag raised.
    """
    if isinstance(records, tuple):
        n_correct, n_gt = records
        n_fp = 0
        recs = []
    else:
        recs = list(records)
        n_correct = sum(r.n_correct for r in recs)
        n_gt = sum(r.n_ground_truth for r in recs)
        n_fp = sum(r.n_false_positive for r in recs)
    rate = n_correct / n_gt if n_gt else 0.0
    return EvalReport(
        iou_threshold=iou_threshold,
        n_ground_truth=n_gt,
        n_correct=n_correct,
        n_false_positive=n_fp,
        detection_rate=rate,
        empty_ground_truth=n_gt == 0,
        records=recs,
    )


def evaluate_detections(preds, gts, iou_threshold=0.3):
    """Group predictions and truths by patch_id, match, and score."""
    by_patch_p = defaultdict(list)
    by_patch_g = defaultdict(list)
    for p in preds:
        by_patch_p[p.patch_id].append(p)
    for g in gts:
        by_patch_g[g.patch_id].append(g)
    records = []
    for pid in sorted(set(by_patch_p) | set(by_patch_g)):
        records.append(
            match_detections(by_patch_p[pid], by_patch_g[pid], iou_threshold, patch_id=pid)
        )
    return detection_rate(records, iou_threshold)


def threshold_sweep(preds, gts, thresholds):
    """Detection rate at each IoU threshold, using the same predictions.

    Matching is threshold-independent (pure IoU), so the curve is
    non-increasing by construction.
    """
    thresholds = list(thresholds)
    if any(not 0 < t < 1 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    if any(b >= a for a, b in zip(thresholds[1:], thresholds[:-1])):
        raise ValueError("thresholds must be strictly increasing")
    points = []
    for t in thresholds:
        points.append((t, evaluate_detections(preds, gts, t).detection_rate))
    return SweepCurve(points)


def classifier_accuracy(model, crops, labels):
    """Fraction of argmax-correct predictions over labeled crops."""
    from .model import classify

    if len(crops) == 0:
        raise FodlocError("empty evaluation set")
    correct = 0
    for c, lab in zip(crops, labels):
        if classify(model, c).label == lab:
            correct += 1
    return correct / len(crops)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def _clean_stats(model, clean_patches):
    """Per-patch reconstruction MSE, mean difference, and Otsu-degenerate
    flags on clean patches."""
    mses, mean_diffs, degen = [], [], []
    for patch in clean_patches:
        recon = model.reconstruct(patch.pixels[None].astype(np.float32))[0]
        recon = np.clip(recon.astype(np.float64), 0.0, 1.0)
        mses.append(float(np.mean((recon - patch.pixels) ** 2)))
        d = difference_map(patch, ImagePatch(recon))
        mean_diffs.append(float(d.values.mean()))
        degen.append(otsu_threshold(d) is None)
    return mses, mean_diffs, degen


def run_ablation(
    specs,
    train_patches,
    fod_patches,
    fod_truths,
    clean_patches,
    cfg,
    iou_threshold=0.3,
    weak_delta=0.2,
):
    """Train every spec on the same data and emit one leaderboard row each.

    ``specs`` is a sequence of ``(name, AutoencoderSpec)``.  A model is
    classified none_strong when Otsu is degenerate on a majority of the
    debris patches (it reconstructs debris too), none_weak when the median
    clean-patch difference exceeds ``weak_delta`` (it cannot even
    reconstruct pavement), and is otherwise scored by detection rate at the
    IoU threshold.  Training failures are recorded and the run continues.
    """
    rows = []
    for name, spec in specs:
        try:
            model, _ = train_autoencoder(train_patches, spec, cfg)
        except FodlocError as exc:
            log.warning("ablation run %s failed: %s", name, exc)
            rows.append(AblationRow(name, FAILED, None, None, error=str(exc)))
            continue

        mses, mean_diffs, _ = _clean_stats(model, clean_patches)
        clean_mse = float(np.mean(mses))
        median_clean_diff = float(np.median(mean_diffs))

        fod_degen = 0
        records = []
        for i, patch in enumerate(fod_patches):
            det, _ = localize_patch(model, patch, patch_id=str(i))
            if det is None:
                fod_degen += 1
                preds = []
            else:
                preds = [det]
            records.append(match_detections(preds, fod_truths[i], iou_threshold, str(i)))
        degen_frac = fod_degen / max(len(fod_patches), 1)

        if degen_frac > 0.5:
            rows.append(
                AblationRow(
                    name, NONE_STRONG, None, clean_mse,
                    degenerate_fraction=degen_frac,
                    median_clean_difference=median_clean_diff,
                )
            )
        elif median_clean_diff > weak_delta:
            rows.append(
                AblationRow(
                    name, NONE_WEAK, None, clean_mse,
                    degenerate_fraction=degen_frac,
                    median_clean_difference=median_clean_diff,
                )
            )
        else:
            report = detection_rate(records, iou_threshold)
            rows.append(
                AblationRow(
                    name, SCORED, report.detection_rate, clean_mse,
                    degenerate_fraction=degen_frac,
                    median_clean_difference=median_clean_diff,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_report_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iou_threshold", "n_ground_truth", "n_correct",
                    "n_false_positive", "detection_rate"])
        w.writerow([report.iou_threshold, report.n_ground_truth, report.n_correct,
                    report.n_false_positive, f"{report.detection_rate:.6f}"])


def write_sweep_csv(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iou_threshold", "detection_rate"])
        for t, r in curve.points:
            w.writerow([f"{t:.3f}", f"{r:.6f}"])


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "status", "detection_rate", "clean_mse",
                    "degenerate_fraction", "median_clean_difference"])
        for r in rows:
            w.writerow([
                r.name, r.status,
                f"{r.detection_rate:.6f}" if r.detection_rate is not None else "",
                f"{r.clean_mse:.8f}" if r.clean_mse is not None else "",
                f"{r.degenerate_fraction:.4f}" if r.degenerate_fraction is not None else "",
                f"{r.median_clean_difference:.6f}" if r.median_clean_difference is not None else "",
            ])
