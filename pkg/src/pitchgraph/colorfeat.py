"""Color features: sRGB -> CIELAB conversion, mask erosion, a*b* histograms
and the bounded Bhattacharyya distance used throughout clustering.

The histogram is 64 bins from an 8x8 grid over the a* and b* channels, each
binned uniformly over [-128, 127] and L1-normalized.  The Bhattacharyya
distance uses the bounded sqrt(1 - BC) form so thresholds like 0.4 live in
[0, 1].
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError

# sRGB -> XYZ (D65), IEC 61966-2-1
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# D65 reference white: the matrix row sums, so neutral grays (r=g=b) map to
# a* = b* = 0 exactly rather than up to the matrix rounding error
_WHITE = _RGB2XYZ.sum(axis=1)

AB_RANGE = (-128.0, 127.0)
N_AB_BINS = 8


@dataclass(frozen=True)
class Histogram64:
    """Normalized 64-bin a*b* histogram of a masked person patch."""

    bins: np.ndarray  # shape (64,)
    support_px: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.shape != (64,):
            raise ContractError(f"Histogram64 needs 64 bins, got shape {bins.shape}")
        if np.any(bins < 0):
            raise ContractError("Histogram64 bins must be non-negative")
        if self.support_px > 0 and abs(bins.sum() - 1.0) > 1e-9:
            raise ContractError("Histogram64 bins must sum to 1")
        object.__setattr__(self, "bins", bins)


def rgb_to_lab(rgb):
    """Convert sRGB values in 0..255 to CIE 1976 L*a*b* (D65).

    Accepts a single (r, g, b) triple or an (..., 3) array; returns the same
    shape with L* in [0, 100].
    """
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ContractError(f"expected trailing dimension 3, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr > 255):
        raise ContractError("RGB channels must lie in [0, 255]")
    c = arr / 255.0
    # inverse sRGB companding
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T
    t = xyz / _WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b], axis=-1)


def erode_mask(mask, radius):
    """Erode a binary mask with a (2r+1)x(2r+1) square element.

    Pixels outside the image count as background, so the border erodes.
    Radius 0 is the identity.
    """
    if radius < 0:
        raise ContractError("radius must be >= 0")
    m = np.asarray(mask, dtype=bool)
    if radius == 0:
        return m.copy()
    size = 2 * radius + 1
    return ndimage.binary_erosion(m, structure=np.ones((size, size), dtype=bool), border_value=0)


def ab_bin_index(a, b):
    """Flat 0..63 bin index for a*, b* values (a-major, 8 bins each)."""
    lo, hi = AB_RANGE
    width = (hi - lo + 1) / N_AB_BINS  # 32 units per bin
    ia = np.clip(((np.asarray(a) - lo) / width).astype(int), 0, N_AB_BINS - 1)
    ib = np.clip(((np.asarray(b) - lo) / width).astype(int), 0, N_AB_BINS - 1)
    return ia * N_AB_BINS + ib


def ab_histogram(image, mask):
    """64-bin a*b* histogram over the masked pixels of an RGB image."""
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if img.shape[:2] != m.shape:
        raise ContractError(f"image {img.shape[:2]} and mask {m.shape} shapes differ")
    n = int(m.sum())
    if n == 0:
        raise ContractError("empty mask: histogram has no support")
    lab = rgb_to_lab(img[m])
    idx = ab_bin_index(lab[:, 1], lab[:, 2])
    counts = np.bincount(idx, minlength=64).astype(np.float64)
    return Histogram64(bins=counts / counts.sum(), support_px=n)


def bhattacharyya(h1, h2):
    """Bounded Bhattacharyya distance sqrt(1 - sum sqrt(p*q)) in [0, 1].

    Both inputs must be L1-normalized; accepts Histogram64 or plain vectors
    of equal length.
    """
    p = h1.bins if isinstance(h1, Histogram64) else np.asarray(h1, dtype=np.float64)
    q = h2.bins if isinstance(h2, Histogram64) else np.asarray(h2, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    for name, v in (("h1", p), ("h2", q)):
        if abs(v.sum() - 1.0) > 1e-6:
            raise ContractError(f"{name} is not normalized (sum = {v.sum():.6g})")
    if np.array_equal(p, q):
        return 0.0  # identity of indiscernibles, exact despite sum rounding
    bc = np.sum(np.sqrt(p * q))
    return float(np.sqrt(max(0.0, 1.0 - min(bc, 1.0))))


def median_histogram(histograms):
    """Element-wise median of histograms, re-normalized to sum 1."""
    stack = np.stack([h.bins if isinstance(h, Histogram64) else np.asarray(h, float) for h in histograms])
    med = np.median(stack, axis=0)
    s = med.sum()
    if s <= 0:
        raise ContractError("median histogram has zero mass")
    return Histogram64(bins=med / s, support_px=0)
