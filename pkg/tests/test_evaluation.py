import json
import math

import numpy as np
import pytest

from distortadapt import evaluation as E
from distortadapt.distortions import DistortionSpec
from distortadapt.imagecore import RandomSource
from distortadapt.scenes import InstanceAnnotation
from distortadapt.segmentation import PredictionInstance


def _rect(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def _pred(mask, score, class_id=1):
    return PredictionInstance(class_id=class_id, score=score, mask=mask)


def _gt(mask, class_id=1, instance_id=0):
    return InstanceAnnotation(class_id=class_id, instance_id=instance_id, mask=mask)


class TestInstanceIou:
    def test_disjoint_identical_partial(self):
        a = _rect(8, 8, 0, 4, 0, 4)
        b = _rect(8, 8, 4, 8, 4, 8)
        assert E.instance_iou(a, b) == 0.0
        assert E.instance_iou(a, a) == 1.0
        # 2x4 overlap, union 16 + 16 - 8
        c = _rect(8, 8, 2, 6, 0, 4)
        assert E.instance_iou(a, c) == pytest.approx(8 / 24)

    def test_both_empty_is_zero(self):
        z = np.zeros((4, 4), dtype=bool)
        assert E.instance_iou(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            E.instance_iou(np.ones((4, 4), bool), np.ones((4, 5), bool))


class TestAveragePrecision:
    def test_single_true_positive(self):
        g = _rect(8, 8, 0, 4, 0, 4)
        preds = {"im0": [_pred(g, 0.9)]}
        gts = {"im0": [_gt(g)]}
        assert E.average_precision(preds, gts, 1, 0.5) == 1.0

    def test_high_scored_fp_halves_ap(self):
        # FP ranked first, TP second: precision at the single recall point
        # is 1/2 and stays there under the running-max envelope.
        g = _rect(8, 8, 0, 4, 0, 4)
        fp = _rect(8, 8, 4, 8, 4, 8)
        preds = {"im0": [_pred(fp, 0.9), _pred(g, 0.8)]}
        gts = {"im0": [_gt(g)]}
        assert E.average_precision(preds, gts, 1, 0.5) == pytest.approx(0.5)

    def test_low_scored_fp_keeps_ap_one(self):
        g = _rect(8, 8, 0, 4, 0, 4)
        fp = _rect(8, 8, 4, 8, 4, 8)
        preds = {"im0": [_pred(g, 0.9), _pred(fp, 0.1)]}
        gts = {"im0": [_gt(g)]}
        assert E.average_precision(preds, gts, 1, 0.5) == 1.0

    def test_missed_gt_caps_recall(self):
        g1 = _rect(8, 8, 0, 4, 0, 4)
        g2 = _rect(8, 8, 4, 8, 4, 8)
        preds = {"im0": [_pred(g1, 0.9)]}
        gts = {"im0": [_gt(g1, instance_id=0), _gt(g2, instance_id=1)]}
        assert E.average_precision(preds, gts, 1, 0.5) == pytest.approx(0.5)

    def test_iou_below_threshold_is_fp(self):
        g = _rect(16, 16, 0, 10, 0, 10)
        shifted = _rect(16, 16, 4, 14, 4, 14)  # iou 36/164 < 0.5
        preds = {"im0": [_pred(shifted, 0.9)]}
        gts = {"im0": [_gt(g)]}
        assert E.average_precision(preds, gts, 1, 0.5) == 0.0

    def test_score_rank_invariant_to_monotone_transform(self):
        rng = RandomSource(11, "rankinv")
        for _ in range(10):
            preds, gts = _random_scene(rng, n_pred=5, n_gt=3)
            base = E.average_precision(preds, gts, 1, 0.5)
            squeezed = {
                k: [_pred(p.mask, 0.1 + 0.8 / (1 + math.exp(-6 * (p.score - 0.5))), p.class_id) for p in v]
                for k, v in preds.items()
            }
            assert E.average_precision(squeezed, gts, 1, 0.5) == pytest.approx(base)

    def test_appended_fp_never_raises_ap(self):
        rng = RandomSource(12, "fp")
        for _ in range(10):
            preds, gts = _random_scene(rng, n_pred=4, n_gt=3)
            base = E.average_precision(preds, gts, 1, 0.5)
            noise = rng.gen.random((16, 16)) < 0.2
            score = float(rng.gen.random())
            worse = {k: list(v) for k, v in preds.items()}
            worse["im0"] = worse["im0"] + [_pred(noise & ~_union(gts["im0"]), score)]
            assert E.average_precision(worse, gts, 1, 0.5) <= base + 1e-12

    def test_tie_break_prefers_larger_then_insertion(self):
        g = _rect(8, 8, 0, 4, 0, 8)  # 32 px
        big_fp = _rect(8, 8, 4, 8, 0, 8)  # 32 px, disjoint from g
        small_tp = _rect(8, 8, 0, 4, 0, 4)  # 16 px, iou(g) = 0.5
        # Same score: the larger instance ranks first, so the FP eats the top
        # rank and AP drops to 0.5. This pins the (-score, -size, insertion) key.
        preds = {"im0": [_pred(small_tp, 0.7), _pred(big_fp, 0.7)]}
        gts = {"im0": [_gt(g)]}
        assert E.average_precision(preds, gts, 1, 0.5) == pytest.approx(0.5)
        # Equal size as well: insertion order decides. TP listed first wins rank 1.
        preds2 = {"im0": [_pred(g, 0.7), _pred(big_fp, 0.7)]}
        assert E.average_precision(preds2, gts, 1, 0.5) == 1.0
        preds3 = {"im0": [_pred(big_fp, 0.7), _pred(g, 0.7)]}
        assert E.average_precision(preds3, gts, 1, 0.5) == pytest.approx(0.5)

    def test_unknown_image_id_rejected(self):
        g = _rect(8, 8, 0, 4, 0, 4)
        preds = {"ghost": [_pred(g, 0.9)]}
        gts = {"im0": [_gt(g)]}
        with pytest.raises(ValueError, match="ghost"):
            E.average_precision(preds, gts, 1, 0.5)

    def test_no_ground_truth_rejected(self):
        preds = {"im0": []}
        with pytest.raises(ValueError):
            E.average_precision(preds, {"im0": []}, 1, 0.5)


def _union(anns):
    out = np.zeros(anns[0].mask.shape, dtype=bool)
    for a in anns:
        out |= a.mask
    return out


def _random_scene(rng, n_pred, n_gt, size=16, classes=1):
    gen = rng.spawn(f"scene/{rng.gen.integers(1 << 30)}").gen
    gts = []
    for k in range(n_gt):
        r = gen.integers(0, size - 4)
        c = gen.integers(0, size - 4)
        h = gen.integers(3, 6)
        w = gen.integers(3, 6)
        m = _rect(size, size, r, min(r + h, size), c, min(c + w, size))
        gts.append(_gt(m, class_id=int(gen.integers(1, classes + 1)), instance_id=k))
    preds = []
    for _ in range(n_pred):
        r = gen.integers(0, size - 4)
        c = gen.integers(0, size - 4)
        h = gen.integers(3, 6)
        w = gen.integers(3, 6)
        m = _rect(size, size, r, min(r + h, size), c, min(c + w, size))
        preds.append(_pred(m, float(gen.random()), class_id=int(gen.integers(1, classes + 1))))
    return {"im0": preds}, {"im0": gts}


class TestBruteForceOracle:
    def test_matches_greedy_on_separated_instances(self):
        g1 = _rect(12, 12, 0, 5, 0, 5)
        g2 = _rect(12, 12, 7, 12, 7, 12)
        preds = {"a": [_pred(g1, 0.9), _pred(g2, 0.4)]}
        gts = {"a": [_gt(g1, instance_id=0), _gt(g2, instance_id=1)]}
        greedy = E.average_precision(preds, gts, 1, 0.5)
        brute = E.brute_force_average_precision(preds, gts, 1, 0.5)
        assert greedy == brute == 1.0

    def test_greedy_suboptimal_on_crafted_overlap(self):
        # The top-ranked prediction overlaps both ground truths above the
        # threshold and greedy grabs its higher-IoU partner, stranding the
        # second prediction whose only feasible partner that was; the oracle
        # swaps the pairing and matches both.
        g1 = _rect(12, 12, 0, 6, 0, 6)  # 36 px
        g2 = _rect(12, 12, 0, 6, 3, 9)  # 36 px, iou(g1,g2) = 18/54
        p1 = _rect(12, 12, 0, 6, 1, 7)  # iou(g1) = 30/42, iou(g2) = 24/48
        p2 = g1  # iou(g1) = 1, iou(g2) = 1/3
        preds = {"a": [_pred(p1, 0.9), _pred(p2, 0.8)]}
        gts = {"a": [_gt(g1, instance_id=0), _gt(g2, instance_id=1)]}
        tau = 0.4
        greedy = E.average_precision(preds, gts, 1, tau)
        brute = E.brute_force_average_precision(preds, gts, 1, tau)
        assert greedy == pytest.approx(0.5)
        assert brute == 1.0

    def test_oracle_never_below_greedy_fuzz(self):
        rng = RandomSource(13, "fuzz")
        for _ in range(30):
            preds, gts = _random_scene(rng, n_pred=3, n_gt=3)
            for tau in (0.3, 0.5, 0.75):
                greedy = E.average_precision(preds, gts, 1, tau)
                brute = E.brute_force_average_precision(preds, gts, 1, tau)
                assert brute >= greedy - 1e-12


class TestMapCityscapes:
    def test_perfect_predictions_map_one(self):
        g1 = _rect(12, 12, 0, 5, 0, 5)
        g2 = _rect(12, 12, 7, 12, 7, 12)
        preds = {"a": [_pred(g1, 0.9, 1), _pred(g2, 0.8, 2)]}
        gts = {"a": [_gt(g1, 1, 0), _gt(g2, 2, 1)]}
        report = E.map_cityscapes(preds, gts, classes=2)
        assert report.map == 1.0
        assert report.per_class_mean == {1: 1.0, 2: 1.0}
        assert report.counts == {"images": 1, "predictions": 2, "ground_truths": 2}

    def test_partial_overlap_counts_thresholds(self):
        # iou = 8/10 = 0.8: hits overlaps 0.50..0.80 (7 of 10) exactly.
        g = _rect(10, 10, 0, 1, 0, 10)
        p_mask = np.zeros((10, 10), dtype=bool)
        p_mask[0, 0:8] = True
        preds = {"a": [_pred(p_mask, 0.9)]}
        gts = {"a": [_gt(g)]}
        report = E.map_cityscapes(preds, gts, classes=1)
        assert report.per_class_mean[1] == pytest.approx(7 / 10)

    def test_class_without_gt_excluded_from_mean(self):
        g = _rect(8, 8, 0, 4, 0, 4)
        preds = {"a": [_pred(g, 0.9, 1), _pred(~g, 0.8, 2)]}
        gts = {"a": [_gt(g, 1)]}
        report = E.map_cityscapes(preds, gts, classes=2)
        assert report.per_class_mean[2] is None
        assert report.map == report.per_class_mean[1] == 1.0

    def test_all_classes_without_gt_rejected(self):
        preds = {"a": []}
        gts = {"a": []}
        with pytest.raises(ValueError, match="mAP undefined"):
            E.map_cityscapes(preds, gts, classes=2)

    def test_explicit_class_list(self):
        g = _rect(8, 8, 0, 4, 0, 4)
        preds = {"a": [_pred(g, 0.9, 3)]}
        gts = {"a": [_gt(g, 3)]}
        report = E.map_cityscapes(preds, gts, classes=[3])
        assert report.map == 1.0

    def test_matches_brute_force_on_small_scene(self):
        rng = RandomSource(14, "bf")
        preds, gts = _random_scene(rng, n_pred=4, n_gt=3, classes=2)
        fast = E.map_cityscapes(preds, gts, classes=2, overlaps=[0.5, 0.75])
        brute = E.brute_force_map(preds, gts, classes=2, overlaps=[0.5, 0.75])
        assert fast.map <= brute + 1e-12


class TestEvalReport:
    def _report(self):
        g = _rect(8, 8, 0, 4, 0, 4)
        preds = {"a": [_pred(g, 0.9)]}
        gts = {"a": [_gt(g)]}
        report = E.map_cityscapes(preds, gts, classes=2, tag="demo")
        report.mean_psnr = math.inf
        return report

    def test_json_round_trip_preserves_inf_and_none(self, tmp_path):
        report = self._report()
        path = tmp_path / "report.json"
        report.save(path)
        raw = json.loads(path.read_text())
        assert raw["mean_psnr"] == "inf"
        assert raw["per_class_mean"]["2"] is None
        back = E.EvalReport.load(path)
        assert back == report

    def test_finite_psnr_round_trip(self, tmp_path):
        report = self._report()
        report.mean_psnr = 27.25
        report.save(tmp_path / "r.json")
        assert E.EvalReport.load(tmp_path / "r.json").mean_psnr == 27.25


class TestTables:
    def _reports(self):
        base = self._report_with(0.9, 30.0)
        return {
            None: self._report_with(0.95, None),
            DistortionSpec("blur", 2.0): self._report_with(0.7, 28.0),
            DistortionSpec("blur", 5.0): self._report_with(0.4, 22.0),
            DistortionSpec("awgn", 25.0): base,
        }

    @staticmethod
    def _report_with(map_value, mean_psnr):
        return E.EvalReport(
            overlaps=[0.5],
            per_class_ap={1: {0.5: map_value}},
            per_class_mean={1: map_value},
            map=map_value,
            counts={"images": 1, "predictions": 1, "ground_truths": 1},
            mean_psnr=mean_psnr,
        )

    def test_map_over_psnr_sorted_and_pristine_row(self):
        rows = E.map_over_psnr(self._reports())
        kinds = [r["kind"] for r in rows]
        assert kinds == ["awgn", "blur", "blur", "pristine"]
        blur = [r for r in rows if r["kind"] == "blur"]
        assert blur[0]["mean_psnr"] < blur[1]["mean_psnr"]
        pristine = rows[-1]
        assert pristine["mean_psnr"] == math.inf and pristine["level"] == ""

    def test_write_csv_formats_floats_and_inf(self, tmp_path):
        rows = E.map_over_psnr(self._reports())
        path = tmp_path / "curve.csv"
        E.write_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "kind,level,mean_psnr,map"
        assert lines[1] == "awgn,25.000000,30.000000,0.900000"
        assert lines[3] == "blur,2.000000,28.000000,0.700000"
        assert lines[-1].split(",") == ["pristine", "", "inf", "0.950000"]

    def test_write_csv_empty(self, tmp_path):
        E.write_csv([], tmp_path / "empty.csv")
        assert (tmp_path / "empty.csv").read_text() == ""

    def test_gain_table_arithmetic(self):
        maps = {
            ("blur", 1.0, "baseline"): 0.50,
            ("blur", 1.0, "oracle"): 0.70,
            ("blur", 1.0, "learned"): 0.65,
            ("blur", 3.0, "baseline"): 0.30,
            ("blur", 3.0, "oracle"): 0.60,
            ("blur", 3.0, "learned"): 0.55,
            ("awgn", 25.0, "baseline"): 0.40,
            ("awgn", 25.0, "oracle"): 0.62,
            ("awgn", 25.0, "learned"): 0.58,
        }
        rows = E.gain_table(maps)
        assert [r["kind"] for r in rows] == ["awgn", "blur"]
        blur = rows[1]
        assert blur["levels"] == 2
        assert blur["baseline_map"] == pytest.approx(0.40)
        assert blur["oracle_gain"] == pytest.approx(0.25)
        assert blur["learned_gain"] == pytest.approx(0.20)
        assert blur["oracle_minus_learned"] == pytest.approx(0.05)

    def test_gain_table_missing_branch_rejected(self):
        maps = {("blur", 1.0, "baseline"): 0.5, ("blur", 1.0, "oracle"): 0.6}
        with pytest.raises(ValueError, match="blur@1.0"):
            E.gain_table(maps)

    def test_sort_specs_mild_to_severe(self):
        specs = [
            DistortionSpec("blur", 5.0),
            DistortionSpec("blur", 1.0),
            DistortionSpec("block_dct", 10.0),
            DistortionSpec("block_dct", 90.0),
            DistortionSpec("awgn", 50.0),
            DistortionSpec("awgn", 10.0),
        ]
        ordered = E.sort_specs_mild_to_severe(specs)
        assert [(s.kind, s.level) for s in ordered] == [
            ("awgn", 10.0),
            ("awgn", 50.0),
            ("block_dct", 90.0),
            ("block_dct", 10.0),
            ("blur", 1.0),
            ("blur", 5.0),
        ]
