import math

import numpy as np
import pytest

from h2aseg.errors import ContractViolation
from h2aseg.metrics import (
    CaseMetrics,
    aggregate,
    average_summaries,
    binarize,
    boundary_voxels,
    dice_precision_recall,
    evaluate_case,
    hd95,
    write_case_csv,
    write_summary_csv,
)

from oracles import boundary_brute_force, hd95_brute_force


class TestBinarize:
    def test_threshold_tie_goes_to_background(self):
        prob = np.full((2, 2, 2), 0.5)
        assert not binarize(prob, 0.5).any()

    def test_all_ones(self):
        assert binarize(np.ones((2, 2, 2))).all()

    def test_mixed_hand_case(self):
        prob = np.array([[[0.2, 0.7], [0.5, 0.51]], [[0.0, 1.0], [0.49, 0.9]]])
        want = np.array([[[False, True], [False, True]], [[False, True], [False, True]]])
        np.testing.assert_array_equal(binarize(prob), want)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            binarize(np.full((2, 2, 2), 1.5))


class TestDicePrecisionRecall:
    def test_perfect_prediction(self):
        gt = np.zeros((3, 3, 3), dtype=bool)
        gt[1, 1, 1] = True
        assert dice_precision_recall(gt, gt) == (100.0, 100.0, 100.0)

    def test_disjoint_masks(self):
        a = np.zeros((3, 3, 3), dtype=bool)
        b = np.zeros((3, 3, 3), dtype=bool)
        a[0, 0, 0] = True
        b[2, 2, 2] = True
        assert dice_precision_recall(a, b) == (0.0, 0.0, 0.0)

    def test_counting_oracle_case(self):
        # TP=2, FP=1, FN=1.
        pred = np.zeros((2, 2, 2), dtype=bool)
        gt = np.zeros((2, 2, 2), dtype=bool)
        pred[0, 0, 0] = pred[0, 0, 1] = pred[0, 1, 0] = True
        gt[0, 0, 0] = gt[0, 0, 1] = gt[1, 1, 1] = True
        dice, precision, recall = dice_precision_recall(pred, gt)
        assert dice == pytest.approx(66.67, abs=0.01)
        assert precision == pytest.approx(66.67, abs=0.01)
        assert recall == pytest.approx(66.67, abs=0.01)

    def test_zero_denominator_conventions(self):
        empty = np.zeros((2, 2, 2), dtype=bool)
        full = ~empty
        # both empty: perfect agreement
        assert dice_precision_recall(empty, empty) == (100.0, 100.0, 100.0)
        # empty prediction, lesion present
        dice, precision, recall = dice_precision_recall(empty, full)
        assert (dice, precision, recall) == (0.0, 0.0, 0.0)
        # prediction on a lesion-free case: recall undefined
        dice, precision, recall = dice_precision_recall(full, empty)
        assert dice == 0.0 and precision == 0.0 and recall is None

    def test_precision_recall_duality(self, rng):
        a = rng.random((4, 4, 4)) > 0.6
        b = rng.random((4, 4, 4)) > 0.6
        if not (a.any() and b.any()):
            pytest.skip("degenerate draw")
        _, p_ab, _ = dice_precision_recall(a, b)
        _, _, r_ba = dice_precision_recall(b, a)
        assert p_ab == pytest.approx(r_ba)

    def test_dice_symmetry(self, rng):
        a = rng.random((4, 4, 4)) > 0.5
        b = rng.random((4, 4, 4)) > 0.5
        d_ab, _, _ = dice_precision_recall(a, b)
        d_ba, _, _ = dice_precision_recall(b, a)
        assert d_ab == pytest.approx(d_ba)

    def test_adding_true_positive_never_decreases_dice(self, rng):
        gt = rng.random((4, 4, 4)) > 0.5
        pred = rng.random((4, 4, 4)) > 0.5
        missing = gt & ~pred
        if not missing.any():
            pytest.skip("degenerate draw")
        d0, _, _ = dice_precision_recall(pred, gt)
        pred2 = pred.copy()
        idx = tuple(np.argwhere(missing)[0])
        pred2[idx] = True
        d1, _, _ = dice_precision_recall(pred2, gt)
        assert d1 >= d0


class TestHd95:
    def test_identical_masks_give_zero(self):
        m = np.zeros((4, 4, 4), dtype=bool)
        m[1:3, 1:3, 1:3] = True
        assert hd95(m, m, (1, 1, 1)) == 0.0

    def test_single_voxel_offset_with_spacing(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[1, 1, 1] = True
        b[2, 1, 1] = True
        assert hd95(a, b, (2.0, 1.0, 1.0)) == pytest.approx(2.0)

    def test_empty_mask_undefined(self):
        a = np.zeros((3, 3, 3), dtype=bool)
        b = np.zeros((3, 3, 3), dtype=bool)
        b[1, 1, 1] = True
        assert hd95(a, b, (1, 1, 1)) is None
        assert hd95(b, a, (1, 1, 1)) is None
        assert hd95(a, a, (1, 1, 1)) is None

    def test_boundary_extraction_matches_brute_force(self, rng):
        for _ in range(10):
            m = rng.random((5, 6, 4)) > 0.5
            np.testing.assert_array_equal(boundary_voxels(m), boundary_brute_force(m))

    def test_matches_brute_force_oracle(self, rng):
        for trial in range(25):
            shape = tuple(rng.integers(3, 9, size=3))
            a = rng.random(shape) > 0.7
            b = rng.random(shape) > 0.7
            spacing = tuple(rng.uniform(0.5, 3.0, size=3))
            want = hd95_brute_force(a, b, spacing)
            got = hd95(a, b, spacing)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-9)

    def test_symmetry(self, rng):
        a = rng.random((5, 5, 5)) > 0.6
        b = rng.random((5, 5, 5)) > 0.6
        if not (a.any() and b.any()):
            pytest.skip("degenerate draw")
        assert hd95(a, b, (1, 2, 3)) == pytest.approx(hd95(b, a, (1, 2, 3)))

    def test_translation_invariance(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[1:3, 1:3, 1:3] = True
        b[2:5, 1:4, 1:3] = True
        base = hd95(a, b, (1.5, 1.0, 2.0))
        shifted = hd95(np.roll(a, 2, axis=0), np.roll(b, 2, axis=0), (1.5, 1.0, 2.0))
        assert shifted == pytest.approx(base)

    def test_positive_spacing_required(self):
        m = np.ones((2, 2, 2), dtype=bool)
        with pytest.raises(ContractViolation):
            hd95(m, m, (1.0, 0.0, 1.0))


class TestEvaluateAndAggregate:
    def test_perfect_case(self):
        gt = np.zeros((4, 4, 4), dtype=bool)
        gt[1:3, 1:3, 1:3] = True
        cm = evaluate_case(gt.astype(float), gt, (1, 1, 1), case_id="x")
        assert cm.dice == 100.0 and cm.hd95 == 0.0
        assert cm.precision == 100.0 and cm.recall == 100.0
        assert cm.has_lesion and cm.hd95_defined

    def test_lesion_free_case_flags(self):
        empty = np.zeros((3, 3, 3))
        cm = evaluate_case(empty, empty.astype(bool), (1, 1, 1))
        assert not cm.has_lesion
        assert cm.hd95 is None and not cm.hd95_defined
        assert cm.precision == 100.0 and cm.recall == 100.0

    def test_lesion_policy_in_aggregation(self):
        lesion = CaseMetrics("a", dice=80.0, hd95=2.0, precision=90.0, recall=70.0, has_lesion=True)
        free = CaseMetrics("b", dice=0.0, hd95=None, precision=0.0, recall=None, has_lesion=False)
        summary = aggregate([lesion, free])
        assert summary["dice"].mean == 80.0 and summary["dice"].n == 1
        assert summary["hd95"].mean == 2.0 and summary["hd95"].n == 1
        assert summary["precision"].n == 2
        assert summary["recall"].mean == 70.0 and summary["recall"].n == 1

    def test_single_case_std_zero(self):
        c = CaseMetrics("a", 50.0, 1.0, 60.0, 70.0, True)
        summary = aggregate([c])
        assert summary["dice"].std == 0.0

    def test_two_case_mean_std(self):
        cases = [
            CaseMetrics("a", 40.0, None, 40.0, 40.0, True),
            CaseMetrics("b", 60.0, None, 60.0, 60.0, True),
        ]
        s = aggregate(cases)["dice"]
        assert s.mean == pytest.approx(50.0)
        assert s.std == pytest.approx(10.0)

    def test_empty_list_rejected(self):
        with pytest.raises(ContractViolation):
            aggregate([])

    def test_four_run_averaging(self):
        runs = []
        for dice in (50.0, 52.0, 54.0, 56.0):
            runs.append(aggregate([CaseMetrics("a", dice, 1.0, dice, dice, True)]))
        avg = average_summaries(runs)
        assert avg["dice"] == pytest.approx(53.0)
        assert avg["hd95"] == pytest.approx(1.0)

    def test_csv_round_trip(self, tmp_path):
        cases = [
            CaseMetrics("a", 80.0, 2.0, 90.0, 70.0, True),
            CaseMetrics("b", 100.0, None, 100.0, None, False),
        ]
        write_case_csv(tmp_path / "cases.csv", cases)
        write_summary_csv(tmp_path / "summary.csv", aggregate(cases))
        lines = (tmp_path / "cases.csv").read_text().splitlines()
        assert lines[0] == "case_id,dice,hd95,precision,recall,has_lesion"
        assert lines[2].split(",")[2] == ""  # undefined hd95 left blank
        header = (tmp_path / "summary.csv").read_text().splitlines()[0]
        assert header.startswith("dice_mean,dice_std,dice_n,hd95_mean")
