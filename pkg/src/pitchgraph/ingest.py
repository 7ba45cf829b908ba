"""Input/output data formats and frame- and person-level filtering.

Frame records are line-delimited JSON, one frame per line.  Flow fields are
a small binary format: magic "PGF1", little-endian u32 width and height,
then width*height (u, v) pairs as little-endian float32.  Feature streams
are a text header line "<modality> <dim>" followed by one vector per line.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ParseError, ValidationError

FLOW_MAGIC = b"PGF1"


@dataclass(frozen=True)
class Detection:
    id: int
    bbox: Tuple[float, float, float, float]  # x_min, y_min, x_max, y_max (px)
    score: float
    mask_rle: Tuple[int, ...]  # bbox-local, row-major, runs alternate 0/1 starting with zeros

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"detection {self.id}: degenerate bbox {self.bbox}")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection {self.id}: score {self.score} outside [0, 1]")
        if any(r < 0 for r in self.mask_rle):
            raise ValidationError(f"detection {self.id}: negative RLE run")
        w, h = self.mask_shape
        if sum(self.mask_rle) != w * h:
            raise ValidationError(
                f"detection {self.id}: RLE runs sum to {sum(self.mask_rle)}, bbox area is {w * h}"
            )

    @property
    def mask_shape(self):
        x0, y0, x1, y1 = self.bbox
        return int(round(x1 - x0)), int(round(y1 - y0))

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)

    def decode_mask(self) -> np.ndarray:
        """Bbox-local boolean mask of shape (height, width)."""
        w, h = self.mask_shape
        flat = np.zeros(w * h, dtype=bool)
        pos, value = 0, False
        for run in self.mask_rle:
            if value:
                flat[pos : pos + run] = True
            pos += run
            value = not value
        return flat.reshape(h, w)


def encode_mask(mask) -> Tuple[int, ...]:
    """Row-major RLE of a boolean mask, runs alternating 0/1 starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return (0,)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:  # runs must start with a zero count
        runs = [0] + runs
    return tuple(int(r) for r in runs)


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    timestamp_s: float
    detections: Tuple[Detection, ...]
    homography: np.ndarray  # 3x3, image px -> pitch meters
    calib_confidence: float
    frame_size: Tuple[int, int]  # width, height (px)

    def __post_init__(self):
        H = np.asarray(self.homography, dtype=np.float64)
        if H.shape != (3, 3):
            raise ValidationError(f"frame {self.frame_index}: homography shape {H.shape}, expected (3, 3)")
        if not (0.0 <= self.calib_confidence <= 1.0):
            raise ValidationError(f"frame {self.frame_index}: calib_confidence outside [0, 1]")
        if self.calib_confidence > 0 and abs(np.linalg.det(H)) <= 1e-9:
            raise ValidationError(f"frame {self.frame_index}: homography is singular")
        object.__setattr__(self, "homography", H)
        object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True)
class FlowField:
    width: int
    height: int
    values: np.ndarray  # (height, width, 2) float32, px/frame

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (self.height, self.width, 2):
            raise ValidationError(f"flow values shape {v.shape} != ({self.height}, {self.width}, 2)")
        if not np.all(np.isfinite(v)):
            raise ValidationError("flow field contains non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class FeatureStream:
    modality: str
    dim: int
    vectors: np.ndarray  # (timesteps, dim), 2 fps

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise ValidationError(f"feature vectors shape {v.shape} incompatible with dim {self.dim}")
        if self.modality not in ("rgb", "audio"):
            raise ValidationError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "vectors", v)


@dataclass(frozen=True)
class FilterConfig:
    min_calib_confidence: float = 0.85  # frames at or below are dropped
    closeup_frac: float = 0.10
    min_score: float = 0.80
    min_area_px: float = 500.0


def _detection_from_dict(d, line_no):
    try:
        return Detection(
            id=int(d["id"]),
            bbox=tuple(float(v) for v in d["bbox"]),
            score=float(d["score"]),
            mask_rle=tuple(int(r) for r in d["mask"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {line_no}: bad detection: {exc}") from exc


def _record_from_dict(d, line_no):
    try:
        dets = tuple(_detection_from_dict(x, line_no) for x in d.get("detections", []))
        return FrameRecord(
            frame_index=int(d["frame_index"]),
            timestamp_s=float(d["timestamp_s"]),
            detections=dets,
            homography=np.asarray(d["homography"], dtype=np.float64),
            calib_confidence=float(d["calib_confidence"]),
            frame_size=tuple(int(v) for v in d["frame_size"]),
        )
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {line_no}: bad frame record: {exc}") from exc


def record_to_dict(rec: FrameRecord) -> dict:
    return {
        "frame_index": rec.frame_index,
        "timestamp_s": rec.timestamp_s,
        "detections": [
            {"id": d.id, "bbox": list(d.bbox), "score": d.score, "mask": list(d.mask_rle)}
            for d in rec.detections
        ],
        "homography": rec.homography.tolist(),
        "calib_confidence": rec.calib_confidence,
        "frame_size": list(rec.frame_size),
    }


def load_frame_records(path) -> List[FrameRecord]:
    """Parse a frame-records file, validate invariants, sort by frame index."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {line_no}: not valid JSON: {exc}") from exc
            records.append(_record_from_dict(raw, line_no))
    records.sort(key=lambda r: r.frame_index)
    for prev, cur in zip(records, records[1:]):
        if cur.frame_index == prev.frame_index:
            raise ValidationError(f"duplicate frame index {cur.frame_index}")
        expected = 0.5 * (cur.frame_index - prev.frame_index)
        if cur.timestamp_s <= prev.timestamp_s or abs((cur.timestamp_s - prev.timestamp_s) - expected) > 1e-6:
            raise ValidationError(
                f"frames {prev.frame_index}->{cur.frame_index}: timestamps not at 2 fps spacing"
            )
    return records


def save_frame_records(records: Sequence[FrameRecord], path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


def load_flow_field(path) -> FlowField:
    """Read a .pgf binary flow file."""
    with open(path, "rb") as fh:
        data = fh.read()
    return flow_from_bytes(data)


def flow_from_bytes(data: bytes) -> FlowField:
    if data[:4] != FLOW_MAGIC:
        raise ParseError(f"bad flow magic {data[:4]!r}, expected {FLOW_MAGIC!r}")
    if len(data) < 12:
        raise ParseError("truncated flow header")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + w * h * 2 * 4
    if len(data) != expected:
        raise ParseError(f"flow payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(width=w, height=h, values=values.copy())


def flow_to_bytes(flow: FlowField) -> bytes:
    header = FLOW_MAGIC + struct.pack("<II", flow.width, flow.height)
    return header + np.ascontiguousarray(flow.values, dtype="<f4").tobytes()


def save_flow_field(flow: FlowField, path):
    with open(path, "wb") as fh:
        fh.write(flow_to_bytes(flow))


def load_feature_stream(path) -> FeatureStream:
    """Read a feature-stream file: header "<modality> <dim>", one vector per line."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError(f"bad feature-stream header {header!r}")
        modality, dim_s = header
        try:
            dim = int(dim_s)
        except ValueError as exc:
            raise ParseError(f"bad feature dimension {dim_s!r}") from exc
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            vec = [float(v) for v in line.split()]
            if len(vec) != dim:
                raise ParseError(f"line {line_no}: vector length {len(vec)} != dim {dim}")
            rows.append(vec)
    vectors = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, dim))
    return FeatureStream(modality=modality, dim=dim, vectors=vectors)


def save_feature_stream(stream: FeatureStream, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{stream.modality} {stream.dim}\n")
        for row in stream.vectors:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def filter_frames(records: Sequence[FrameRecord], cfg: FilterConfig) -> List[FrameRecord]:
    """Drop low-calibration frames and close-up frames."""
    kept = []
    for rec in records:
        if rec.calib_confidence <= cfg.min_calib_confidence:
            continue
        frame_area = rec.frame_size[0] * rec.frame_size[1]
        if any(d.area > cfg.closeup_frac * frame_area for d in rec.detections):
            continue
        kept.append(rec)
    return kept


def filter_detections(frame: FrameRecord, cfg: FilterConfig) -> List[Detection]:
    """Keep detections with high enough score and large enough bbox."""
    return [d for d in frame.detections if d.score >= cfg.min_score and d.area >= cfg.min_area_px]
