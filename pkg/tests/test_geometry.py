import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pitchgraph import geometry
from pitchgraph.errors import ContractError
from pitchgraph.geometry import PitchPoint, PitchTemplate

PITCH = PitchTemplate()

finite = st.floats(-60.0, 60.0, allow_nan=False)


class TestFootPoint:
    @pytest.mark.parametrize(
        "bbox,expected",
        [
            ((10, 10, 20, 30), (15.0, 30.0)),
            ((0, 0, 2, 2), (1.0, 2.0)),
            ((5, 7, 5.5, 9), (5.25, 9.0)),
        ],
    )
    def test_examples(self, bbox, expected):
        assert geometry.foot_point(bbox) == expected

    def test_degenerate_bbox_rejected(self):
        with pytest.raises(ContractError):
            geometry.foot_point((3, 3, 3, 5))


class TestProjection:
    def test_identity(self):
        assert geometry.project_to_pitch((15.0, 30.0), np.eye(3)) == PitchPoint(15.0, 30.0)

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            H = np.eye(3) + rng.normal(0, 0.1, (3, 3))
            p = rng.normal(0, 50, 2)
            v = H @ np.array([p[0], p[1], 1.0])
            if abs(v[2]) <= 1e-9:
                continue
            got = geometry.project_to_pitch(p, H)
            assert got.x == pytest.approx(v[0] / v[2], rel=1e-12)
            assert got.y == pytest.approx(v[1] / v[2], rel=1e-12)

    def test_point_at_infinity_rejected(self):
        H = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0]])
        with pytest.raises(ContractError):
            geometry.project_to_pitch((1.0, 1.0), H)

    @settings(max_examples=50)
    @given(finite, finite)
    def test_composition(self, x, y):
        rng = np.random.default_rng(int(abs(x) * 1000 + abs(y)) % 2**31)
        H1 = np.eye(3) + rng.normal(0, 0.05, (3, 3))
        H2 = np.eye(3) + rng.normal(0, 0.05, (3, 3))
        try:
            once = geometry.project_to_pitch((x, y), H2 @ H1)
            mid = geometry.project_to_pitch((x, y), H1)
            twice = geometry.project_to_pitch((mid.x, mid.y), H2)
        except ContractError:
            return
        assert math.isclose(once.x, twice.x, rel_tol=1e-9, abs_tol=1e-9)
        assert math.isclose(once.y, twice.y, rel_tol=1e-9, abs_tol=1e-9)


class TestMidfieldRule:
    def test_center_player_is_midfield(self):
        assert geometry.is_midfield_view([PitchPoint(0, 0)], PITCH)

    def test_player_near_goal_is_not(self):
        assert not geometry.is_midfield_view([PitchPoint(40, 0)], PITCH)

    def test_hand_distance_case(self):
        # distance from (52.5, 0) to (25, 10) is about 29.26 < 31.5
        pts = [PitchPoint(0, 0), PitchPoint(25, 10)]
        assert math.hypot(52.5 - 25, 10) < 31.5
        assert not geometry.is_midfield_view(pts, PITCH)

    def test_exact_threshold_counts_as_midfield(self):
        # 0.30 * 105 = 31.5 exactly; the rule is "at least"
        assert geometry.is_midfield_view([PitchPoint(-21.0, 0)], PITCH)

    def test_empty_positions_rejected(self):
        with pytest.raises(ContractError):
            geometry.is_midfield_view([], PITCH)

    @settings(max_examples=40)
    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=8))
    def test_monotone_under_removal(self, pts):
        positions = [PitchPoint(x, y) for x, y in pts]
        if geometry.is_midfield_view(positions, PITCH):
            assert geometry.is_midfield_view(positions[:-1], PITCH)


class TestGoalkeeperRule:
    def test_lone_keeper_found(self):
        # near = 0.04 * 68 = 2.72 m, far = 0.08 * 68 = 5.44 m
        positions = [(7, PitchPoint(-51.0, 0.0)), (1, PitchPoint(-40.0, 0.0))]
        assert geometry.goalkeeper_candidate(positions, PITCH) == ("A", 7)

    def test_second_person_too_close_blocks(self):
        positions = [(0, PitchPoint(51.0, 0.0)), (1, PitchPoint(49.0, 1.0))]
        assert math.hypot(52.5 - 49.0, 1.0) < 5.44
        assert geometry.goalkeeper_candidate(positions, PITCH) is None

    def test_two_near_people_block(self):
        positions = [(0, PitchPoint(-51.5, 0.0)), (1, PitchPoint(-51.0, 1.0))]
        assert geometry.goalkeeper_candidate(positions, PITCH) is None

    def test_side_b(self):
        positions = [(4, PitchPoint(51.5, 0.5)), (9, PitchPoint(0.0, 0.0))]
        assert geometry.goalkeeper_candidate(positions, PITCH) == ("B", 4)

    def test_length_axis_scales_thresholds(self):
        # near = 0.04 * 105 = 4.2 m on the length axis
        positions = [(0, PitchPoint(-49.0, 0.0)), (1, PitchPoint(0.0, 0.0))]
        assert geometry.goalkeeper_candidate(positions, PITCH, axis="width") is None
        assert geometry.goalkeeper_candidate(positions, PITCH, axis="length") == ("A", 0)

    def test_bad_axis_rejected(self):
        with pytest.raises(ContractError):
            geometry.goalkeeper_candidate([(0, PitchPoint(0, 0))], PITCH, axis="diagonal")


class TestSideline:
    @pytest.mark.parametrize(
        "point,expected",
        [((0, 33.5), True), ((0, 0), False), ((0, 35), True), ((52.0, 0), True)],
    )
    def test_examples(self, point, expected):
        assert geometry.near_sideline(PitchPoint(*point), PITCH) is expected
