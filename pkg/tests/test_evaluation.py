import numpy as np
import pytest

from conftest import random_blob_mask
from oracles import lesion_level_scores

from dilseg.evaluation import (
    DatasetEvaluation,
    LesionMatch,
    MatchStatus,
    detection_metrics,
    evaluate_case,
    extract_lesions,
    f1_score,
    false_positives_per_lesion,
    lesion_dsc,
    load_dataset_evaluation,
    match_lesions,
    out_of_gland_detections,
)
from dilseg.volumes import LabelVolume

SPACING = (0.625, 0.625, 3.0)  # 1.171875 mm^3 per voxel


def place(shape, *regions, dtype=np.int16):
    data = np.zeros(shape, dtype=dtype)
    for value, slices in regions:
        data[slices] = value
    return data


class TestExtractLesions:
    def test_empty_mask(self):
        labeled, comps = extract_lesions(np.zeros((8, 8, 4)), SPACING)
        assert comps == []

    def test_volume_threshold_arithmetic(self):
        # 100 voxels -> 0.117 cc retained; 85 voxels -> 0.0996 cc ignored.
        big = np.zeros((40, 40, 4), dtype=np.uint8)
        big.reshape(-1)[:100] = 0  # placeholder, build explicitly below
        mask = np.zeros((40, 40, 8), dtype=np.uint8)
        mask[0:5, 0:5, 0:4] = 1  # 100 voxels
        mask[20:25, 20:25, 4:8] = 0
        mask[20:25, 20:37, 6] = 1  # 85 voxels
        labeled, comps = extract_lesions(mask, SPACING)
        by_size = sorted(comps, key=lambda c: c.voxels)
        assert [c.voxels for c in by_size] == [85, 100]
        assert by_size[0].volume_cc == pytest.approx(0.099609375)
        assert not by_size[0].retained
        assert by_size[1].volume_cc == pytest.approx(0.1171875)
        assert by_size[1].retained

    def test_two_retained_components(self):
        mask = np.zeros((40, 40, 8), dtype=np.uint8)
        mask[0:5, 0:5, 0:4] = 1
        mask[20:25, 20:25, 4:8] = 1
        _, comps = extract_lesions(mask, SPACING)
        assert len(comps) == 2 and all(c.retained for c in comps)


class TestLesionDsc:
    def test_identical(self):
        region = np.zeros((8, 8, 2), dtype=bool)
        region[2:5, 2:5, :] = True
        assert lesion_dsc(region, region) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8, 2), dtype=bool)
        b = np.zeros((8, 8, 2), dtype=bool)
        a[0, 0, 0] = True
        b[5, 5, 1] = True
        assert lesion_dsc(a, b) == 0.0

    def test_counts_substitution(self):
        # TP=2, FP=1, FN=1 -> 4/6.
        gt = np.zeros((4, 4, 1), dtype=bool)
        pred = np.zeros((4, 4, 1), dtype=bool)
        gt[0, 0:3, 0] = True
        pred[0, 1:4, 0] = True
        assert lesion_dsc(gt, pred) == pytest.approx(2 / 3)

    def test_both_empty_degenerate(self):
        empty = np.zeros((4, 4, 1), dtype=bool)
        assert lesion_dsc(empty, empty) == 1.0

    def test_grid_mismatch(self):
        with pytest.raises(ValueError, match="grid"):
            lesion_dsc(np.zeros((4, 4, 1), dtype=bool), np.zeros((5, 4, 1), dtype=bool))


class TestMatching:
    def test_boundary_dsc_is_not_a_detection(self):
        # GT 32 voxels, one 8-voxel prediction line overlapping 2:
        # DSC = 2*2 / (32+8) = 0.1 exactly -> not a detection.
        gt = np.zeros((40, 40, 8), dtype=np.int16)
        gt[0:4, 0:4, 0:2] = 1
        pred = np.zeros((40, 40, 8), dtype=np.uint8)
        pred[0, 0, 0:8] = 1
        labeled, comps = extract_lesions(pred, (3.0, 3.0, 3.0))
        assert len(comps) == 1 and comps[0].retained
        matches = match_lesions(gt, [1], labeled, comps)
        statuses = sorted(m.status.value for m in matches)
        assert statuses == ["FALSE_NEGATIVE", "FALSE_POSITIVE"]
        fn = next(m for m in matches if m.status == MatchStatus.FALSE_NEGATIVE)
        assert fn.dsc == 0.1

    def test_perfect_prediction(self):
        gt = place((40, 40, 8), (1, (slice(0, 6), slice(0, 6), slice(0, 4))))
        pred = (gt > 0).astype(np.uint8)
        labeled, comps = extract_lesions(pred, (2.0, 2.0, 2.0))
        matches = match_lesions(gt, [1], labeled, comps)
        assert [m.status for m in matches] == [MatchStatus.TRUE_POSITIVE]
        assert detection_metrics(matches).recall == 1.0

    def test_no_predictions(self):
        gt = place(
            (40, 40, 8),
            (1, (slice(0, 4), slice(0, 4), slice(0, 2))),
            (2, (slice(10, 14), slice(10, 14), slice(0, 2))),
            (3, (slice(20, 24), slice(20, 24), slice(0, 2))),
        )
        labeled, comps = extract_lesions(np.zeros_like(gt), (2.0, 2.0, 2.0))
        matches = match_lesions(gt, [1, 2, 3], labeled, comps)
        assert all(m.status == MatchStatus.FALSE_NEGATIVE for m in matches)
        assert len(matches) == 3

    def test_one_component_validates_two_lesions(self):
        gt = place(
            (40, 40, 4),
            (1, (slice(0, 6), slice(0, 6), slice(0, 2))),
            (2, (slice(8, 14), slice(0, 6), slice(0, 2))),
        )
        pred = np.zeros_like(gt, dtype=np.uint8)
        pred[0:14, 0:6, 0:2] = 1  # spans both lesions
        labeled, comps = extract_lesions(pred, (2.0, 2.0, 2.0))
        matches = match_lesions(gt, [1, 2], labeled, comps)
        tp = [m for m in matches if m.status == MatchStatus.TRUE_POSITIVE]
        assert len(tp) == 2
        assert tp[0].pred_component_id == tp[1].pred_component_id
        assert not any(m.status == MatchStatus.FALSE_POSITIVE for m in matches)

    def test_one_to_one_mode_assigns_distinct_components(self):
        gt = place(
            (40, 40, 4),
            (1, (slice(0, 6), slice(0, 6), slice(0, 2))),
            (2, (slice(8, 14), slice(0, 6), slice(0, 2))),
        )
        pred = np.zeros_like(gt, dtype=np.uint8)
        pred[0:14, 0:6, 0:2] = 1
        labeled, comps = extract_lesions(pred, (2.0, 2.0, 2.0))
        matches = match_lesions(gt, [1, 2], labeled, comps, one_to_one=True)
        statuses = sorted(m.status.value for m in matches)
        assert statuses == ["FALSE_NEGATIVE", "TRUE_POSITIVE"]

    def test_fragment_not_chosen_is_false_positive(self):
        gt = place((40, 40, 4), (1, (slice(0, 10), slice(0, 10), slice(0, 2))))
        pred = np.zeros_like(gt, dtype=np.uint8)
        pred[0:8, 0:8, 0:2] = 1  # strong fragment
        pred[0:10, 12:22, 0:2] = 1  # separate component, no overlap
        labeled, comps = extract_lesions(pred, (2.0, 2.0, 2.0))
        matches = match_lesions(gt, [1], labeled, comps)
        assert sorted(m.status.value for m in matches) == [
            "FALSE_POSITIVE",
            "TRUE_POSITIVE",
        ]


class TestDetectionMetrics:
    def _matches(self, tp, fp, fn):
        out = []
        out += [LesionMatch(MatchStatus.TRUE_POSITIVE, i, i, 0.5) for i in range(tp)]
        out += [LesionMatch(MatchStatus.FALSE_POSITIVE, None, 100 + i, 0.0) for i in range(fp)]
        out += [LesionMatch(MatchStatus.FALSE_NEGATIVE, 200 + i, None, 0.0) for i in range(fn)]
        return out

    def test_formula(self):
        m = detection_metrics(self._matches(tp=10, fp=5, fn=2))
        assert m.recall == pytest.approx(10 / 12)
        assert m.precision == pytest.approx(10 / 15)
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))

    def test_reported_operating_points(self):
        assert f1_score(0.49, 1.00) == pytest.approx(0.66, abs=0.005)
        assert f1_score(0.49, 0.96) == pytest.approx(0.65, abs=0.005)

    def test_empty_prediction_edge(self):
        m = detection_metrics(self._matches(tp=0, fp=0, fn=3))
        assert m.recall == 0.0 and m.recall_defined
        assert m.precision == 0.0 and not m.precision_defined
        assert m.f1 == 0.0 and not m.f1_defined

    def test_fp_per_lesion(self):
        assert false_positives_per_lesion(self._matches(10, 19, 0)) == pytest.approx(1.9)
        assert false_positives_per_lesion(self._matches(10, 0, 0)) == 0.0
        assert false_positives_per_lesion(self._matches(10, 9, 0)) == pytest.approx(0.9)
        with pytest.raises(ValueError, match="zero ground-truth"):
            false_positives_per_lesion(self._matches(0, 3, 0))


class TestOutOfGland:
    def _setup(self, comp_slices, gland_slices):
        pred = np.zeros((20, 20, 6), dtype=np.uint8)
        pred[comp_slices] = 1
        gland = np.zeros_like(pred)
        gland[gland_slices] = 1
        labeled, comps = extract_lesions(pred, (4.0, 4.0, 4.0))
        matches = [
            LesionMatch(MatchStatus.FALSE_POSITIVE, None, c.component_id, 0.0) for c in comps
        ]
        return matches, labeled, gland

    def test_inside(self):
        matches, labeled, gland = self._setup(
            (slice(5, 9), slice(5, 9), slice(1, 4)),
            (slice(0, 20), slice(0, 20), slice(0, 6)),
        )
        assert out_of_gland_detections(matches, labeled, gland) == 0

    def test_outside(self):
        matches, labeled, gland = self._setup(
            (slice(12, 16), slice(12, 16), slice(1, 4)),
            (slice(0, 6), slice(0, 6), slice(0, 6)),
        )
        assert out_of_gland_detections(matches, labeled, gland) == 1

    def test_straddling_centroid_inside(self):
        # Component spans the gland boundary; its centroid voxel stays inside.
        matches, labeled, gland = self._setup(
            (slice(2, 8), slice(2, 6), slice(1, 3)),
            (slice(0, 6), slice(0, 20), slice(0, 6)),
        )
        # centroid x = mean(2..7) = 4.5 -> rounds into the gland (x < 6)
        assert out_of_gland_detections(matches, labeled, gland) == 0


class TestOracleEquivalence:
    def test_random_masks_match_reference(self):
        rng = np.random.default_rng(2024)
        spacing = (2.0, 2.0, 2.0)
        for _ in range(40):
            gt_bin = random_blob_mask((16, 16, 8), rng)
            pred_bin = random_blob_mask((16, 16, 8), rng)
            ref = lesion_level_scores(gt_bin, pred_bin, spacing)

            from scipy import ndimage

            gt_labeled, n_gt = ndimage.label(gt_bin, structure=np.ones((3, 3, 3)))
            pred_labeled, comps = extract_lesions(pred_bin, spacing)
            matches = match_lesions(
                gt_labeled, list(range(1, n_gt + 1)), pred_labeled, comps
            )
            m = detection_metrics(matches)
            assert n_gt == ref["n_gt"]
            assert (m.tp, m.fp, m.fn) == (ref["tp"], ref["fp"], ref["fn"])
            assert m.recall == pytest.approx(ref["recall"], abs=1e-12)
            assert m.precision == pytest.approx(ref["precision"], abs=1e-12)
            assert m.f1 == pytest.approx(ref["f1"], abs=1e-12)
            dscs = sorted(
                m.dsc for m in matches if m.gt_lesion_id is not None
            )
            assert dscs == pytest.approx(ref["per_lesion_dsc"], abs=1e-12)

    def test_conservation(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            gt_bin = random_blob_mask((16, 16, 8), rng)
            pred_bin = random_blob_mask((16, 16, 8), rng)
            from scipy import ndimage

            gt_labeled, n_gt = ndimage.label(gt_bin, structure=np.ones((3, 3, 3)))
            pred_labeled, comps = extract_lesions(pred_bin, (2, 2, 2))
            matches = match_lesions(gt_labeled, list(range(1, n_gt + 1)), pred_labeled, comps)
            m = detection_metrics(matches)
            assert m.tp + m.fn == n_gt
            # Every retained component is TP-supporting or FP, never both.
            tp_ids = {x.pred_component_id for x in matches if x.status == MatchStatus.TRUE_POSITIVE}
            fp_ids = {x.pred_component_id for x in matches if x.status == MatchStatus.FALSE_POSITIVE}
            assert not (tp_ids & fp_ids)
            retained = {c.component_id for c in comps if c.retained}
            assert tp_ids | fp_ids == retained


class TestMonotonicity:
    def test_dilating_tp_never_becomes_fp(self):
        # Nested regions: growing the prediction toward GT keeps it a detection.
        gt = place((40, 40, 6), (1, (slice(6, 26), slice(6, 26), slice(1, 5))))
        spacing = (2.0, 2.0, 2.0)
        prev_status = None
        for half in range(4, 14):
            pred = np.zeros_like(gt, dtype=np.uint8)
            pred[16 - half : 16 + half, 16 - half : 16 + half, 1:5] = 1
            labeled, comps = extract_lesions(pred, spacing)
            matches = match_lesions(gt, [1], labeled, comps)
            status = matches[0].status
            if prev_status == MatchStatus.TRUE_POSITIVE:
                assert status == MatchStatus.TRUE_POSITIVE
            prev_status = status
        assert prev_status == MatchStatus.TRUE_POSITIVE


class TestCaseEvaluation:
    def test_round_trip_json(self, tmp_path):
        gt = LabelVolume(
            data=place((40, 40, 8), (1, (slice(0, 6), slice(0, 6), slice(0, 4)))),
            spacing=(2.0, 2.0, 2.0),
        )
        pred = (gt.data > 0).astype(np.uint8)
        case = evaluate_case("c0", gt, pred)
        ds = DatasetEvaluation(cases=[case])
        ds.save_json(tmp_path / "eval.json")
        back = load_dataset_evaluation(tmp_path / "eval.json")
        assert back.cases[0].case_id == "c0"
        assert back.metrics().tp == 1
        assert back.cases[0].lesion_dsc[1] == 1.0

    def test_prostate_gating_optional(self):
        gt = LabelVolume(
            data=place((40, 40, 8), (1, (slice(0, 6), slice(0, 6), slice(0, 4)))),
            spacing=(2.0, 2.0, 2.0),
        )
        pred = np.zeros_like(gt.data, dtype=np.uint8)
        pred[20:26, 20:26, 0:4] = 1
        no_gland = evaluate_case("c0", gt, pred)
        assert no_gland.out_of_gland_fp_count is None
        gland = LabelVolume(data=(gt.data >= 0).astype(np.uint8), spacing=gt.spacing)
        gland.data[10:, :, :] = 0
        with_gland = evaluate_case("c0", gt, pred, prostate_mask=gland)
        assert with_gland.out_of_gland_fp_count == 1
