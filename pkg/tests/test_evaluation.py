import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fodloc.evaluation import (
    AblationRow,
    detection_rate,
    evaluate_detections,
    iou,
    match_detections,
    threshold_sweep,
    write_ablation_csv,
    write_report_csv,
    write_sweep_csv,
)
from fodloc.imaging import BoundingBox
from fodloc.pipeline import Detection


def rasterized_iou(a, b):
    """Pixel-count oracle: rasterize both boxes on a shared canvas."""
    w = max(a.x_max, b.x_max) + 1
    h = max(a.y_max, b.y_max) + 1
    ca = np.zeros((h, w), dtype=bool)
    cb = np.zeros((h, w), dtype=bool)
    ca[a.y_min:a.y_max, a.x_min:a.x_max] = True
    cb[b.y_min:b.y_max, b.x_min:b.x_max] = True
    union = np.logical_or(ca, cb).sum()
    return np.logical_and(ca, cb).sum() / union


def random_box(rng, limit=60):
    x0 = int(rng.integers(0, limit - 2))
    y0 = int(rng.integers(0, limit - 2))
    w = int(rng.integers(1, limit - x0))
    h = int(rng.integers(1, limit - y0))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def det(box, pid="p", md=0.5):
    return Detection(pid, box, md)


class TestIoU:
    def test_identical(self):
        b = BoundingBox(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 5, 5), BoundingBox(5, 5, 9, 9)) == 0.0

    def test_known_overlap(self):
        a = BoundingBox(0, 0, 10, 10)
        b = BoundingBox(5, 5, 15, 15)
        assert iou(a, b) == pytest.approx(25 / 175)

    def test_symmetry_and_range(self, rng):
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0

    def test_matches_rasterized_oracle(self, rng):
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == pytest.approx(rasterized_iou(a, b), abs=1e-9)


class TestMatchDetections:
    def test_single_match_above_threshold(self):
        gt = BoundingBox(0, 0, 10, 10)
        pred = BoundingBox(0, 0, 10, 14)  # IoU = 10/14 ~ 0.71
        rec = match_detections([det(pred)], [gt], 0.3)
        assert rec.n_correct == 1 and rec.n_false_positive == 0

    def test_one_to_one(self):
        gt = BoundingBox(0, 0, 10, 10)
        preds = [det(BoundingBox(0, 0, 10, 11)), det(BoundingBox(0, 0, 11, 10))]
        rec = match_detections(preds, [gt], 0.3)
        assert rec.n_correct == 1
        assert rec.n_false_positive == 1

    def test_no_predictions(self):
        rec = match_detections([], [BoundingBox(0, 0, 4, 4)], 0.3)
        assert rec.n_correct == 0 and rec.n_ground_truth == 1

    def test_match_below_threshold_not_correct(self):
        gt = BoundingBox(0, 0, 10, 10)
        pred = BoundingBox(8, 8, 18, 18)  # IoU small
        rec = match_detections([det(pred)], [gt], 0.3)
        assert rec.n_correct == 0 and rec.n_false_positive == 1

    def test_greedy_descending_order(self):
        # pred0 overlaps both gts; pred1 only gt0.  Greedy assigns pred0 to
        # its best gt first, leaving the other for pred1.
        gt0 = BoundingBox(0, 0, 10, 10)
        gt1 = BoundingBox(20, 0, 30, 10)
        pred0 = BoundingBox(0, 0, 10, 9)     # strong on gt0
        pred1 = BoundingBox(0, 0, 10, 20)    # weaker on gt0
        rec = match_detections([det(pred0), det(pred1)], [gt0, gt1], 0.3)
        assigned = {pi: gi for pi, gi, _ in rec.pairs}
        assert assigned[0] == 0
        assert 1 not in assigned or assigned[1] != 0

    def test_never_two_gts_for_one_pred(self, rng):
        for _ in range(50):
            preds = [det(random_box(rng)) for _ in range(rng.integers(0, 5))]
            gts = [random_box(rng) for _ in range(rng.integers(0, 5))]
            rec = match_detections(preds, gts, 0.3)
            pis = [pi for pi, _, _ in rec.pairs]
            gis = [gi for _, gi, _ in rec.pairs]
            assert len(pis) == len(set(pis)) and len(gis) == len(set(gis))


class TestDetectionRate:
    def test_all_matched(self):
        recs = [match_detections([det(BoundingBox(0, 0, 5, 5))],
                                 [BoundingBox(0, 0, 5, 5)], 0.3)]
        assert detection_rate(recs).detection_rate == 1.0

    def test_paper_arithmetic(self):
        assert detection_rate((370, 447)).detection_rate == pytest.approx(0.8277, abs=5e-5)
        assert detection_rate((369, 447)).detection_rate == pytest.approx(0.8255, abs=5e-5)

    def test_empty_ground_truth_convention(self):
        report = detection_rate((0, 0))
        assert report.detection_rate == 0.0
        assert report.empty_ground_truth

    def test_order_invariance(self, rng):
        recs = []
        for i in range(10):
            preds = [det(random_box(rng), pid=str(i))]
            gts = [random_box(rng)]
            recs.append(match_detections(preds, gts, 0.3, patch_id=str(i)))
        a = detection_rate(recs).detection_rate
        b = detection_rate(list(reversed(recs))).detection_rate
        assert a == b


class TestThresholdSweep:
    def test_single_point_equals_detection_rate(self, rng):
        preds = [det(random_box(rng), pid=str(i)) for i in range(5)]
        gts = []
        for i, p in enumerate(preds):
            g = random_box(rng)
            g = type(g)(g.x_min, g.y_min, g.x_max, g.y_max)
            gts.append(type("G", (), {"patch_id": str(i), "box": g})())
        curve = threshold_sweep(preds, gts, [0.3])
        report = evaluate_detections(preds, gts, 0.3)
        assert curve.points[0] == (0.3, report.detection_rate)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            threshold_sweep([], [], [0.5, 0.3])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            threshold_sweep([], [], [0.0, 0.5])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_sweep_nonincreasing_property(seed, n):
    rng = np.random.default_rng(seed)
    preds, gts = [], []
    for i in range(n):
        for _ in range(int(rng.integers(0, 3))):
            preds.append(det(random_box(rng), pid=str(i)))
        for _ in range(int(rng.integers(0, 3))):
            gts.append(type("G", (), {"patch_id": str(i), "box": random_box(rng)})())
    curve = threshold_sweep(preds, gts, [round(0.1 * k, 1) for k in range(1, 10)])
    rates = curve.rates()
    assert all(a >= b - 1e-12 for a, b in zip(rates, rates[1:]))


class TestCsvWriters:
    def test_report_csv(self, tmp_path):
        report = detection_rate((370, 447))
        write_report_csv(tmp_path / "r.csv", report)
        text = (tmp_path / "r.csv").read_text()
        assert "0.827740" in text

    def test_sweep_csv(self, tmp_path):
        curve = threshold_sweep([], [], [0.3, 0.5])
        write_sweep_csv(tmp_path / "s.csv", curve)
        assert len((tmp_path / "s.csv").read_text().strip().splitlines()) == 3

    def test_ablation_csv(self, tmp_path):
        rows = [
            AblationRow("conv", "scored", 0.75, 1e-4, 0.1, 0.01),
            AblationRow("skip", "none_strong", None, 1e-6, 0.9, 0.001),
        ]
        write_ablation_csv(tmp_path / "a.csv", rows)
        lines = (tmp_path / "a.csv").read_text().strip().splitlines()
        assert len(lines) == 3 and "none_strong" in lines[2]
