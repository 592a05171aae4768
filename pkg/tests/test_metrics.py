import numpy as np
import pytest

from orthoadapt.errors import DataError, DimensionError, UsageError
from orthoadapt.metrics import ConfusionMatrix, RunReport, macc, miou, report


def brute_force_scores(pred, gt, k):
    """Set-based oracle: per-class pixel index sets, no confusion matrix."""
    pred_sets = {c: {i for i, p in enumerate(pred.ravel()) if p == c} for c in range(k)}
    gt_sets = {c: {i for i, g in enumerate(gt.ravel()) if g == c} for c in range(k)}
    ious, accs = [], []
    for c in range(k):
        union = pred_sets[c] | gt_sets[c]
        if union:
            ious.append(len(pred_sets[c] & gt_sets[c]) / len(union))
        if gt_sets[c]:
            accs.append(len(pred_sets[c] & gt_sets[c]) / len(gt_sets[c]))
    return sum(ious) / len(ious), sum(accs) / len(accs)


class TestUpdate:
    def test_perfect_prediction_is_diagonal(self, rng):
        gt = rng.integers(0, 4, size=(5, 6))
        cm = ConfusionMatrix(4).update(gt, gt)
        assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
        assert cm.total == 30

    def test_single_pixel(self):
        cm = ConfusionMatrix(3).update(np.array([[2]]), np.array([[1]]))
        assert cm.counts[1, 2] == 1 and cm.total == 1

    def test_additivity(self, rng):
        p1, g1 = rng.integers(0, 3, size=(2, 4, 4))
        p2, g2 = rng.integers(0, 3, size=(2, 4, 4))
        seq = ConfusionMatrix(3).update(p1, g1).update(p2, g2)
        joint = ConfusionMatrix(3).update(np.concatenate([p1, p2]), np.concatenate([g1, g2]))
        np.testing.assert_array_equal(seq.counts, joint.counts)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            ConfusionMatrix(2).update(np.array([2]), np.array([0]))
        with pytest.raises(DataError):
            ConfusionMatrix(2).update(np.array([0]), np.array([-1]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ConfusionMatrix(2).update(np.zeros((2, 2), int), np.zeros((2, 3), int))


class TestScores:
    def test_perfect(self, rng):
        gt = rng.integers(0, 5, size=(8, 8))
        cm = ConfusionMatrix(5).update(gt, gt)
        assert miou(cm) == 1.0 and macc(cm) == 1.0

    def test_closed_form_half_half(self):
        gt = np.array([[0, 0, 1, 1]])
        cm = ConfusionMatrix(2).update(np.zeros_like(gt), gt)
        np.testing.assert_allclose(cm.per_class_iou(), [0.5, 0.0])
        assert miou(cm) == 0.25
        assert macc(cm) == 0.5

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            k = int(rng.integers(2, 6))
            shape = tuple(rng.integers(1, 7, size=2))
            gt = rng.integers(0, k, size=shape)
            pred = rng.integers(0, k, size=shape)
            cm = ConfusionMatrix(k).update(pred, gt)
            m, a = brute_force_scores(pred, gt, k)
            assert miou(cm) == pytest.approx(m, abs=1e-15)
            assert macc(cm) == pytest.approx(a, abs=1e-15)

    def test_empty_matrix(self):
        with pytest.raises(UsageError):
            miou(ConfusionMatrix(3))

    def test_iou_bounded_by_accuracy(self, rng):
        for _ in range(50):
            gt = rng.integers(0, 4, size=(6, 6))
            pred = rng.integers(0, 4, size=(6, 6))
            cm = ConfusionMatrix(4).update(pred, gt)
            iou, acc = cm.per_class_iou(), cm.per_class_acc()
            present = ~np.isnan(acc)
            assert np.all(0 <= iou[present])
            assert np.all(iou[present] <= acc[present] + 1e-15)
            assert np.all(acc[present] <= 1)

    def test_relabeling_invariance(self, rng):
        gt = rng.integers(0, 4, size=(7, 7))
        pred = rng.integers(0, 4, size=(7, 7))
        perm = rng.permutation(4)
        a = ConfusionMatrix(4).update(pred, gt)
        b = ConfusionMatrix(4).update(perm[pred], perm[gt])
        np.testing.assert_allclose(b.per_class_iou()[perm], a.per_class_iou())
        assert miou(a) == pytest.approx(miou(b), abs=1e-15)

    def test_partition_merge(self, rng):
        preds = rng.integers(0, 3, size=(6, 5, 5))
        gts = rng.integers(0, 3, size=(6, 5, 5))
        whole = ConfusionMatrix(3)
        parts = [ConfusionMatrix(3), ConfusionMatrix(3)]
        for i, (p, g) in enumerate(zip(preds, gts)):
            whole.update(p, g)
            parts[i % 2].update(p, g)
        merged = parts[0].merge(parts[1])
        np.testing.assert_array_equal(merged.counts, whole.counts)
        assert merged.miou() == whole.miou()


def synthetic_run(values, k=2):
    """RunReport whose (round, domain) cells have prescribed mIoU via crafted matrices."""
    run = RunReport(num_classes=k)
    for (r, d), correct in values.items():
        cm = run.cell(r, d)
        # gt = 1 everywhere except pixel class-0 block; predictions right on `correct` of 4 pixels
        gt = np.array([0, 0, 1, 1])
        pred = gt.copy()
        pred[correct:] = 1 - pred[correct:]
        cm.update(pred, gt)
        run.samples += 1
    return run


class TestReport:
    def test_gain_zero_against_itself(self):
        run = synthetic_run({(1, "a"): 3, (1, "b"): 4})
        table = report(run, run)
        assert dict(table.aggregates)["gain_over_source"] == "0.0"

    def test_row_counts(self):
        cells = {(r, d): 4 for r in (1, 2, 3) for d in "FNRS"}
        table = report(synthetic_run(cells), synthetic_run(cells))
        assert len(table.cells) == 12
        assert len(table.aggregates) == 4
        assert table.cells_csv().splitlines()[0] == "round,domain,miou,macc"
        assert table.aggregates_csv().splitlines()[0] == "metric,value"

    def test_mean_is_cell_average(self):
        run = synthetic_run({(1, "a"): 4, (1, "b"): 2, (2, "a"): 0})
        cell_means = [cm.miou() for cm in run.cells.values()]
        assert run.mean_miou() == pytest.approx(sum(cell_means) / 3, abs=1e-15)
        expected = f"{100 * sum(cell_means) / 3:.1f}"
        assert dict(report(run, run).aggregates)["mean_miou"] == expected

    def test_missing_baseline_warns(self):
        table = report(synthetic_run({(1, "a"): 4}))
        keys = [k for k, _ in table.aggregates]
        assert "gain_over_source" not in keys and "warning" in keys
