"""Pitch template, homography projection of player foot points, and the
geometric view rules (midfield, goalkeeper, sideline)."""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError


class PitchPoint(NamedTuple):
    """A point in pitch-template coordinates (meters, origin at center)."""

    x: float
    y: float


@dataclass(frozen=True)
class PitchTemplate:
    """Pitch rectangle: x spans goal-to-goal, y touchline-to-touchline."""

    length_m: float = 105.0
    width_m: float = 68.0

    def __post_init__(self):
        if self.length_m <= 0 or self.width_m <= 0:
            raise ContractError("pitch dimensions must be positive")

    @property
    def goal_centers(self):
        """(side A, side B) goal centers; A is the negative-x goal."""
        return (PitchPoint(-self.length_m / 2, 0.0), PitchPoint(self.length_m / 2, 0.0))


def foot_point(bbox):
    """Midpoint of the bottom edge of a bounding box (x_min, y_min, x_max, y_max)."""
    x_min, y_min, x_max, y_max = bbox
    if not (x_min < x_max and y_min < y_max):
        raise ContractError(f"degenerate bbox {bbox}")
    return ((x_min + x_max) / 2.0, y_max)


def project_to_pitch(point, homography) -> PitchPoint:
    """Project an image point to pitch meters through a 3x3 homography."""
    H = np.asarray(homography, dtype=np.float64)
    if H.shape != (3, 3):
        raise ContractError(f"homography must be 3x3, got {H.shape}")
    v = H @ np.array([point[0], point[1], 1.0])
    if abs(v[2]) <= 1e-9:
        raise ContractError(f"point {point} projects to infinity (w = {v[2]:.3g})")
    return PitchPoint(float(v[0] / v[2]), float(v[1] / v[2]))


def is_midfield_view(positions, pitch: PitchTemplate, min_frac: float = 0.30) -> bool:
    """True iff every position is at least min_frac * length from both goals."""
    if not positions:
        raise ContractError("midfield rule needs at least one position")
    min_dist = min_frac * pitch.length_m
    for p in positions:
        for g in pitch.goal_centers:
            if math.hypot(p.x - g.x, p.y - g.y) < min_dist:
                return False
    return True


def goalkeeper_candidate(
    positions,
    pitch: PitchTemplate,
    near_frac: float = 0.04,
    far_frac: float = 0.08,
    axis: str = "width",
) -> Optional[tuple]:
    """Detect a lone person hugging one goal.

    positions is a list of (id, PitchPoint).  Returns (side, id) with side in
    {"A", "B"} iff exactly one person is within near_frac of the goal center
    and everyone else is at least far_frac away from that goal center.  The
    fractions are taken of the pitch width by default; axis="length" switches
    the reference dimension to the 105 m axis.
    """
    if not positions:
        raise ContractError("goalkeeper rule needs at least one position")
    if axis not in ("width", "length"):
        raise ContractError(f"axis must be 'width' or 'length', got {axis!r}")
    scale = pitch.width_m if axis == "width" else pitch.length_m
    near, far = near_frac * scale, far_frac * scale
    goal_a, goal_b = pitch.goal_centers
    for side, goal in (("A", goal_a), ("B", goal_b)):
        dists = [(pid, math.hypot(p.x - goal.x, p.y - goal.y)) for pid, p in positions]
        close = [pid for pid, d in dists if d <= near]
        if len(close) != 1:
            continue
        if all(d >= far for pid, d in dists if pid != close[0]):
            return (side, close[0])
    return None


def near_sideline(p: PitchPoint, pitch: PitchTemplate, margin_m: float = 1.0) -> bool:
    """True if the point is within margin_m of any pitch boundary or outside it."""
    return abs(p.y) >= pitch.width_m / 2 - margin_m or abs(p.x) >= pitch.length_m / 2 - margin_m
