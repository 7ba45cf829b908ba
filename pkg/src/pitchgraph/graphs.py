"""Per-frame player graphs and 15-second temporal windows.

Node features are 13 reals in fixed order: 5 class probabilities (team1,
team2, referee, goalkeeper A, goalkeeper B), motion (u, v), normalized bbox
area, pitch position (x, y), projected frame center (x, y), calibration
score.  Players within 5 m share an edge.  A window holds 30 graph slots
(15 s at 2 fps); missing frames stay as empty (zero-node) graphs.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ParseError
from .geometry import PitchPoint

NODE_DIM = 13
WINDOW_SLOTS = 30
SLOT_SPACING_S = 0.5

ACTION_CLASSES = (
    "Penalty",
    "Kick-off",
    "Goal",
    "Substitution",
    "Offside",
    "Shots on target",
    "Shots off target",
    "Clearance",
    "Ball out of play",
    "Throw-in",
    "Foul",
    "Indirect free-kick",
    "Direct free-kick",
    "Corner",
    "Yellow card",
    "Red card",
    "Yellow->red card",
)
BACKGROUND = "background"
ALL_LABELS = ACTION_CLASSES + (BACKGROUND,)
N_LABELS = len(ALL_LABELS)  # 18
LABEL_INDEX = {name: i for i, name in enumerate(ALL_LABELS)}


def build_node(probs, motion, bbox_area, position: PitchPoint, frame_center: PitchPoint, calib) -> np.ndarray:
    """Concatenate one node's features in the fixed 13-value order."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (5,):
        raise ContractError(f"class probabilities must have 5 entries, got shape {probs.shape}")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ContractError(f"class probabilities sum to {probs.sum():.6f}, expected 1")
    if not 0.0 <= calib <= 1.0:
        raise ContractError(f"calibration score {calib} outside [0, 1]")
    return np.array(
        [
            *probs,
            motion[0],
            motion[1],
            bbox_area,
            position.x,
            position.y,
            frame_center.x,
            frame_center.y,
            calib,
        ],
        dtype=np.float64,
    )


def build_edges(positions: Sequence[PitchPoint], threshold_m: float = 5.0) -> List[Tuple[int, int]]:
    """Undirected (i, j), i < j, for pairs at most threshold_m apart."""
    edges = []
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            dx = positions[i].x - positions[j].x
            dy = positions[i].y - positions[j].y
            if math.hypot(dx, dy) <= threshold_m:
                edges.append((i, j))
    return edges


@dataclass(frozen=True)
class PlayerGraph:
    nodes: np.ndarray  # (N, 13) float64; N may be 0
    edges: Tuple[Tuple[int, int], ...]
    timestamp_s: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, NODE_DIM)
        n = nodes.shape[0]
        for i, j in self.edges:
            if i == j:
                raise ContractError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"edge ({i}, {j}) out of range for {n} nodes")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def empty_graph(timestamp_s: float) -> PlayerGraph:
    return PlayerGraph(nodes=np.zeros((0, NODE_DIM)), edges=(), timestamp_s=timestamp_s)


@dataclass(frozen=True)
class GraphWindow:
    """30 graph slots at 0.5 s spacing around center_time_s."""

    graphs: Tuple[PlayerGraph, ...]
    center_time_s: float
    label: str

    def __post_init__(self):
        if len(self.graphs) != WINDOW_SLOTS:
            raise ContractError(f"window needs {WINDOW_SLOTS} slots, got {len(self.graphs)}")
        if self.label not in LABEL_INDEX:
            raise ContractError(f"unknown label {self.label!r}")
        object.__setattr__(self, "graphs", tuple(self.graphs))

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


def build_window(
    graphs_by_time: Dict[float, PlayerGraph],
    center_time: float,
    annotations: Sequence[Tuple[float, str]] = (),
) -> GraphWindow:
    """Assemble a window spanning [center - 7.5 s, center + 7.5 s).

    Missing slots become empty graphs.  The label is the action of the
    annotation nearest to the center among those inside the span, else
    background.
    """
    half = WINDOW_SLOTS // 2 * SLOT_SPACING_S  # 7.5 s
    slots = []
    for k in range(WINDOW_SLOTS):
        t = center_time - half + k * SLOT_SPACING_S
        g = graphs_by_time.get(round(t, 6))
        slots.append(g if g is not None else empty_graph(t))
    label = BACKGROUND
    best = None
    for t, action in annotations:
        if action not in ACTION_CLASSES:
            raise ContractError(f"unknown action class {action!r}")
        if center_time - half <= t < center_time + half:
            dist = abs(t - center_time)
            if best is None or dist < best:
                best, label = dist, action
    return GraphWindow(graphs=tuple(slots), center_time_s=center_time, label=label)


# ---------------------------------------------------------------------------
# Binary window cache: version byte, u32 window count, then per window:
# f64 center time, u8 label index, and 30 graphs each stored as f64
# timestamp, u32 node count, u32 edge count, node features as f32, edge
# index pairs as u32.

CACHE_VERSION = 1


def save_windows(windows: Sequence[GraphWindow], path):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<BI", CACHE_VERSION, len(windows)))
        for win in windows:
            fh.write(struct.pack("<dB", win.center_time_s, win.label_index))
            for g in win.graphs:
                fh.write(struct.pack("<dII", g.timestamp_s, g.n_nodes, len(g.edges)))
                fh.write(g.nodes.astype("<f4").tobytes())
                if g.edges:
                    fh.write(np.asarray(g.edges, dtype="<u4").tobytes())


def load_windows(path) -> List[GraphWindow]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 5:
        raise ParseError("truncated window cache")
    version, count = struct.unpack("<BI", data[:5])
    if version != CACHE_VERSION:
        raise ParseError(f"window cache version {version}, expected {CACHE_VERSION}")
    off = 5
    windows = []
    try:
        for _ in range(count):
            center, label_idx = struct.unpack_from("<dB", data, off)
            off += 9
            graphs = []
            for _ in range(WINDOW_SLOTS):
                ts, n_nodes, n_edges = struct.unpack_from("<dII", data, off)
                off += 16
                nodes = np.frombuffer(data, dtype="<f4", count=n_nodes * NODE_DIM, offset=off)
                off += n_nodes * NODE_DIM * 4
                edges = np.frombuffer(data, dtype="<u4", count=n_edges * 2, offset=off).reshape(-1, 2)
                off += n_edges * 2 * 4
                graphs.append(
                    PlayerGraph(
                        nodes=nodes.astype(np.float64).reshape(n_nodes, NODE_DIM),
                        edges=tuple((int(i), int(j)) for i, j in edges),
                        timestamp_s=ts,
                    )
                )
            windows.append(GraphWindow(graphs=tuple(graphs), center_time_s=center, label=ALL_LABELS[label_idx]))
    except (struct.error, ValueError, IndexError) as exc:
        raise ParseError(f"truncated or corrupt window cache: {exc}") from exc
    if off != len(data):
        raise ParseError(f"window cache has {len(data) - off} trailing bytes")
    return windows
