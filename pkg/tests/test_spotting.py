import numpy as np
import pytest

from pitchgraph import spotting
from pitchgraph.errors import ContractError, ParseError
from pitchgraph.graphs import ACTION_CLASSES
from pitchgraph.spotting import (
    Annotation,
    Spot,
    average_map,
    average_precision,
    format_report,
    infer_spots,
    load_annotations,
    load_spots,
    map_at_tolerance,
    match_spots,
    save_annotations,
    save_spots,
)


def goal(t, conf=0.9):
    return Spot(time_s=t, action="Goal", confidence=conf)


def gt(t, action="Goal", visibility="visible"):
    return Annotation(time_s=t, action=action, visibility=visibility)


# independent evaluation oracle: brute-force matcher + AP via the
# "max precision at recall >= k/n_gt" form of all-point interpolation
def oracle_ap(preds, annotations, tolerance_s):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].time_s))
    used = set()
    flags = []
    for pi in order:
        p = preds[pi]
        cands = [
            (abs(a.time_s - p.time_s), gi)
            for gi, a in enumerate(annotations)
            if gi not in used and a.action == p.action and abs(a.time_s - p.time_s) <= tolerance_s
        ]
        if cands:
            used.add(min(cands)[1])
            flags.append(True)
        else:
            flags.append(False)
    n_gt = len(annotations)
    if n_gt == 0 or not flags:
        return 0.0
    cum_tp = np.cumsum(flags)
    precision = cum_tp / np.arange(1, len(flags) + 1)
    recall = cum_tp / n_gt
    total = 0.0
    for k in range(1, int(cum_tp[-1]) + 1):
        total += precision[recall >= k / n_gt].max()
    return total / n_gt


class TestTypes:
    def test_background_spot_rejected(self):
        with pytest.raises(ContractError):
            Spot(time_s=0.0, action="background", confidence=0.5)

    def test_confidence_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            Spot(time_s=0.0, action="Goal", confidence=1.5)

    def test_bad_visibility_rejected(self):
        with pytest.raises(ContractError):
            Annotation(time_s=0.0, action="Goal", visibility="hidden")


class TestInferSpots:
    def probs_for(self, confs, action="Goal"):
        probs = np.zeros((len(confs), 18))
        ci = ACTION_CLASSES.index(action)
        probs[:, ci] = confs
        probs[:, -1] = 1.0 - np.asarray(confs)
        return probs

    def test_nearby_candidates_suppressed(self):
        spots = infer_spots([100.0, 110.0], self.probs_for([0.9, 0.8]), nms_window_s=20.0)
        goals = [s for s in spots if s.action == "Goal" and s.confidence > 0]
        assert (goals[0].time_s, goals[0].confidence) == (100.0, 0.9)
        assert all(s.time_s != 110.0 or s.confidence == 0 for s in goals)

    def test_distant_candidates_both_kept(self):
        spots = infer_spots([100.0, 125.0], self.probs_for([0.9, 0.8]), nms_window_s=20.0)
        goal_times = {s.time_s for s in spots if s.action == "Goal"}
        assert {100.0, 125.0} <= goal_times

    def test_single_confident_window_yields_one_strong_spot(self):
        centers = [float(t) for t in range(0, 200, 10)]
        confs = [0.01] * len(centers)
        confs[7] = 0.95
        spots = infer_spots(centers, self.probs_for(confs), nms_window_s=20.0)
        strong = [s for s in spots if s.action == "Goal" and s.confidence > 0.5]
        assert len(strong) == 1
        assert strong[0].time_s == centers[7]

    def test_wider_nms_never_grows_output(self):
        rng = np.random.default_rng(0)
        centers = np.arange(0, 300, 7.0)
        probs = rng.random((len(centers), 18))
        probs /= probs.sum(axis=1, keepdims=True)
        sizes = [len(infer_spots(centers, probs, nms_window_s=w)) for w in (5.0, 10.0, 20.0, 40.0)]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))
        # every kept spot is one of the window-center candidates
        wide = infer_spots(centers, probs, nms_window_s=40.0)
        assert {s.time_s for s in wide} <= set(centers.tolist())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            infer_spots([0.0, 1.0], np.zeros((3, 18)))


class TestMatchSpots:
    def test_within_60s_is_tp(self):
        assert match_spots([goal(130.0)], [gt(100.0)], tolerance_s=60.0) == [True]

    def test_within_5s_is_fp(self):
        assert match_spots([goal(130.0)], [gt(100.0)], tolerance_s=5.0) == [False]

    def test_annotation_used_once(self):
        preds = [goal(101.0, conf=0.9), goal(99.0, conf=0.8)]
        assert match_spots(preds, [gt(100.0)], tolerance_s=60.0) == [True, False]

    def test_wrong_class_never_matches(self):
        pred = Spot(time_s=100.0, action="Corner", confidence=0.9)
        assert match_spots([pred], [gt(100.0)], tolerance_s=60.0) == [False]


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([True], [0.9], n_gt=1) == 1.0

    def test_single_fp(self):
        assert average_precision([False], [0.9], n_gt=1) == 0.0

    def test_hand_case_five_sixths(self):
        # precision at the two TP ranks: 1 and 2/3 -> AP = (1 + 2/3) / 2
        ap = average_precision([True, False, True], [0.9, 0.8, 0.7], n_gt=2)
        assert ap == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_no_ground_truth_gives_zero(self):
        assert average_precision([False], [0.9], n_gt=0) == 0.0

    def test_negative_n_gt_rejected(self):
        with pytest.raises(ContractError):
            average_precision([True], [0.9], n_gt=-1)

    def test_extra_low_confidence_duplicate_never_increases_ap(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            annotations = [gt(float(t) * 50) for t in range(n)]
            preds = [goal(a.time_s + rng.normal(0, 5), conf=float(rng.uniform(0.5, 1))) for a in annotations]
            base_flags = match_spots(preds, annotations, 30.0)
            base = average_precision(base_flags, [p.confidence for p in preds], n)
            dup = preds + [Spot(time_s=preds[0].time_s, action="Goal", confidence=0.01)]
            dup_flags = match_spots(dup, annotations, 30.0)
            dup_ap = average_precision(dup_flags, [p.confidence for p in dup], n)
            assert dup_ap <= base + 1e-12


class TestAverageMap:
    def test_perfect_predictions_score_one_everywhere(self):
        annotations = [gt(60.0 * i, action=a, visibility=v)
                       for i, (a, v) in enumerate([("Goal", "visible"), ("Corner", "unshown"), ("Throw-in", "visible")])]
        preds = [Spot(time_s=a.time_s, action=a.action, confidence=1.0) for a in annotations]
        report = average_map(preds, annotations)
        for subset in ("all", "visible", "unshown"):
            assert report["subsets"][subset]["average_map"] == 1.0
            assert all(v == 1.0 for v in report["subsets"][subset]["map_per_tolerance"])
        assert report["single_map_60"] == 1.0

    def test_empty_predictions_score_zero(self):
        report = average_map([], [gt(100.0)])
        assert report["subsets"]["all"]["average_map"] == 0.0

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(2)
        annotations = [gt(float(rng.uniform(0, 500)), action=a) for a in ("Goal", "Goal", "Corner", "Throw-in")]
        preds = [
            Spot(
                time_s=a.time_s + float(rng.normal(0, 20)),
                action=a.action,
                confidence=float(rng.uniform(0.1, 1.0)),
            )
            for a in annotations
        ]
        report = average_map(preds, annotations)
        per_tol = report["subsets"]["all"]["map_per_tolerance"]
        assert all(a <= b + 1e-12 for a, b in zip(per_tol, per_tol[1:]))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        actions = ("Goal", "Corner", "Throw-in")
        for _ in range(10):
            annotations = [
                gt(float(rng.uniform(0, 400)), action=actions[int(rng.integers(3))]) for _ in range(6)
            ]
            preds = [
                Spot(
                    time_s=float(rng.uniform(0, 400)),
                    action=actions[int(rng.integers(3))],
                    confidence=float(rng.uniform(0, 1)),
                )
                for _ in range(10)
            ]
            for tol in (10.0, 30.0, 60.0):
                per_class, mean = map_at_tolerance(preds, annotations, tol)
                want = []
                for action in actions:
                    cls_gt = [a for a in annotations if a.action == action]
                    if not cls_gt:
                        continue
                    cls_preds = [p for p in preds if p.action == action]
                    want.append(oracle_ap(cls_preds, cls_gt, tol))
                assert mean == pytest.approx(float(np.mean(want)), abs=1e-12)

    def test_empty_tolerances_rejected(self):
        with pytest.raises(ContractError):
            average_map([], [], tolerances=())

    def test_subset_counts_partition(self):
        annotations = [gt(10.0), gt(20.0, visibility="unshown"), gt(30.0)]
        visible = spotting._subset(annotations, "visible")
        unshown = spotting._subset(annotations, "unshown")
        assert len(visible) + len(unshown) == len(spotting._subset(annotations, "all"))


class TestFiles:
    def test_spots_round_trip(self, tmp_path):
        spots = [goal(12.345678901234567, conf=0.25), Spot(time_s=90.0, action="Yellow card", confidence=1.0)]
        path = tmp_path / "spots.tsv"
        save_spots(spots, path)
        assert load_spots(path) == spots

    def test_annotations_round_trip(self, tmp_path):
        anns = [gt(1.5), gt(77.25, action="Ball out of play", visibility="unshown")]
        path = tmp_path / "annotations.tsv"
        save_annotations(anns, path)
        assert load_annotations(path) == anns

    def test_malformed_spot_line_rejected(self, tmp_path):
        path = tmp_path / "spots.tsv"
        path.write_text("1.0\tGoal\n")
        with pytest.raises(ParseError, match="line 1"):
            load_spots(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "annotations.tsv"
        path.write_text("\n1.0\tGoal\tvisible\n\n")
        assert len(load_annotations(path)) == 1


class TestReportFormat:
    def test_contains_summary_lines(self):
        annotations = [gt(100.0)]
        preds = [goal(100.0, conf=1.0)]
        text = format_report(average_map(preds, annotations))
        assert "average-mAP (all): 1.0000" in text
        assert "single-tolerance mAP @60s (all): 1.0000" in text
        assert "[visible]" in text and "[unshown]" in text
        assert "Goal" in text
