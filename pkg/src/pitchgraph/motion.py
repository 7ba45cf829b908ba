"""Per-player camera-compensated motion vectors.

Fixed screen overlays (scoreboard, clock) are found from the mean optical
flow of a uniform 10% frame sample; the field is segmented by color
quantization; the dominant motion of a masked region comes from the second
moment (structure tensor) of its flow, with the sign picked by a 4-quadrant
direction vote.  Player motion is the player's dominant flow minus the
field's.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.morphology import convex_hull_image

from .colorfeat import bhattacharyya
from .errors import ContractError
from .ingest import FlowField
from .kmeans import lloyd_kmeans


@dataclass(frozen=True)
class MotionVector:
    u: float
    v: float

    @property
    def magnitude(self) -> float:
        return math.hypot(self.u, self.v)


@dataclass(frozen=True)
class FixedRegion:
    """A screen-static overlay: full-frame mask plus its mean RGB patch."""

    mask: np.ndarray  # (H, W) bool
    bbox: Tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    mean_patch: np.ndarray  # (row1-row0, col1-col0, 3) float

    def __post_init__(self):
        r0, c0, r1, c1 = self.bbox
        if self.mean_patch.shape[:2] != (r1 - r0, c1 - c0):
            raise ContractError("mean patch dims do not match the mask bbox")


@dataclass(frozen=True)
class MotionParams:
    norm_eps: float = 0.5  # px/frame; "centroid norm close to zero"
    min_region_px: int = 256
    patch_threshold: float = 0.4
    merge_eps: float = 20.0  # RGB units between field cluster centroids
    opening_radius: int = 2
    min_component_frac: float = 0.01


def detect_fixed_regions(
    flows: Sequence[FlowField], frames: Sequence[np.ndarray], params: MotionParams = MotionParams(), seed: int = 0
) -> List[FixedRegion]:
    """Find static overlay regions from a uniform frame sample.

    flows/frames are the ~10% sample.  Pixels whose mean flow falls in a
    k-means (k=4) cluster with near-zero centroid norm form candidate masks;
    connected components below min_region_px are dropped.
    """
    if len(flows) < 10:
        raise ContractError(f"need at least 10 sampled frames, got {len(flows)}")
    if len(flows) != len(frames):
        raise ContractError("flow and frame samples must align")
    mean_flow = np.mean([f.values for f in flows], axis=0)  # (H, W, 2)
    h, w, _ = mean_flow.shape
    pixels = mean_flow.reshape(-1, 2)
    k = min(4, len(np.unique(pixels, axis=0)))
    centers, labels, _ = lloyd_kmeans(pixels, k, seed)
    norms = np.linalg.norm(centers, axis=1)
    fixed = np.isin(labels, np.flatnonzero(norms < params.norm_eps)).reshape(h, w)
    if not fixed.any():
        return []
    labeled, n_comp = ndimage.label(fixed)
    mean_frame = np.mean([np.asarray(f, dtype=np.float64) for f in frames], axis=0)
    regions = []
    for comp in range(1, n_comp + 1):
        mask = labeled == comp
        if mask.sum() < params.min_region_px:
            continue
        rows, cols = np.nonzero(mask)
        bbox = (rows.min(), cols.min(), rows.max() + 1, cols.max() + 1)
        patch = mean_frame[bbox[0] : bbox[2], bbox[1] : bbox[3]]
        regions.append(FixedRegion(mask=mask, bbox=bbox, mean_patch=patch))
    return regions


def _rgb_patch_hists(patch) -> List[np.ndarray]:
    """Per-channel normalized 8-bin histograms of an RGB patch."""
    patch = np.asarray(patch, dtype=np.float64)
    hists = []
    for c in range(3):
        counts, _ = np.histogram(patch[..., c], bins=8, range=(0.0, 256.0))
        hists.append(counts / max(counts.sum(), 1))
    return hists


def fixed_region_present(frame: np.ndarray, region: FixedRegion, params: MotionParams = MotionParams()) -> bool:
    """True when the frame patch at the region's location still matches it."""
    r0, c0, r1, c1 = region.bbox
    frame = np.asarray(frame)
    if frame.shape[0] < r1 or frame.shape[1] < c1:
        raise ContractError("frame smaller than the fixed region bbox")
    patch = frame[r0:r1, c0:c1]
    dists = [
        bhattacharyya(hp, hm)
        for hp, hm in zip(_rgb_patch_hists(patch), _rgb_patch_hists(region.mean_patch))
    ]
    return float(np.mean(dists)) < params.patch_threshold


def segment_field(
    frame: np.ndarray,
    person_masks: Sequence[np.ndarray],
    fixed_masks: Sequence[np.ndarray],
    params: MotionParams = MotionParams(),
    seed: int = 0,
) -> np.ndarray:
    """Field mask via color quantization, opening and convex hull.

    Persons and fixed regions are excluded; k-means (k=5) over the remaining
    RGB pixels, largest cluster seeds the field, nearby centroids merge,
    then opening, small-component removal and convex hull, ANDed with the
    pre-hull field mask.
    """
    img = np.asarray(frame, dtype=np.float64)
    h, w = img.shape[:2]
    blocked = np.zeros((h, w), dtype=bool)
    for m in list(person_masks) + list(fixed_masks):
        blocked |= np.asarray(m, dtype=bool)
    usable = ~blocked
    if not usable.any():
        raise ContractError("frame fully masked out; no pixels left to segment")
    pixels = img[usable].reshape(-1, 3)
    k = min(5, len(np.unique(pixels, axis=0)))
    centers, labels, _ = lloyd_kmeans(pixels, k, seed)
    counts = np.bincount(labels, minlength=k)
    field_c = int(counts.argmax())
    merged = {field_c} | {
        c for c in range(k) if np.linalg.norm(centers[c] - centers[field_c]) < params.merge_eps
    }
    field = np.zeros((h, w), dtype=bool)
    field[usable] = np.isin(labels, list(merged))
    size = 2 * params.opening_radius + 1
    opened = ndimage.binary_opening(field, structure=np.ones((size, size), dtype=bool))
    labeled, n_comp = ndimage.label(opened)
    min_px = params.min_component_frac * h * w
    survivors = np.zeros_like(opened)
    for comp in range(1, n_comp + 1):
        mask = labeled == comp
        if mask.sum() >= min_px:
            survivors |= mask
    if not survivors.any():
        return np.zeros((h, w), dtype=bool)
    hull = convex_hull_image(survivors)
    return hull & field


def _quadrant(u, v) -> int:
    """0: u>=0,v>=0; 1: u<0,v>=0; 2: u<0,v<0; 3: u>=0,v<0."""
    if v >= 0:
        return 0 if u >= 0 else 1
    return 3 if u >= 0 else 2


def dominant_flow(flow: FlowField, mask: np.ndarray) -> MotionVector:
    """Dominant motion of a masked region from the flow's second moment matrix.

    Magnitude is sqrt of the largest eigenvalue; the axis is the matching
    eigenvector, signed toward the quadrant holding the plurality of the
    masked flow directions (ties toward non-negative u, then v).
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != (flow.height, flow.width):
        raise ContractError(f"mask shape {m.shape} != flow shape {(flow.height, flow.width)}")
    uv = flow.values[m].astype(np.float64)
    if uv.size == 0:
        raise ContractError("dominant_flow needs a non-empty mask")
    u, v = uv[:, 0], uv[:, 1]
    M = np.array([[np.mean(u * u), np.mean(u * v)], [np.mean(u * v), np.mean(v * v)]])
    evals, evecs = np.linalg.eigh(M)
    magnitude = math.sqrt(max(evals[-1], 0.0))
    axis = evecs[:, -1]
    counts = np.zeros(4, dtype=int)
    qu = np.where(v >= 0, np.where(u >= 0, 0, 1), np.where(u >= 0, 3, 2))
    np.add.at(counts, qu, 1)
    cand = magnitude * axis
    plus, minus = counts[_quadrant(cand[0], cand[1])], counts[_quadrant(-cand[0], -cand[1])]
    if plus > minus:
        vec = cand
    elif minus > plus:
        vec = -cand
    else:  # tie: prefer non-negative u, then non-negative v
        if cand[0] != 0:
            vec = cand if cand[0] > 0 else -cand
        else:
            vec = cand if cand[1] >= 0 else -cand
    return MotionVector(u=float(vec[0]), v=float(vec[1]))


def player_motion(player_flow: MotionVector, field_flow: MotionVector) -> MotionVector:
    """Camera-compensated player motion: player minus field dominant flow."""
    return MotionVector(u=player_flow.u - field_flow.u, v=player_flow.v - field_flow.v)
