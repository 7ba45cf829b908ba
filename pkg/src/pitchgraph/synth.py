"""Deterministic synthetic match generator.

Emits every ingest-format input for a small scripted match: a panning
camera over a striped pitch with single-chroma players (two teams, referee,
two goalkeepers), a static scoreboard overlay, analytic optical flow, and
planted action annotations whose surrounding frames carry class-specific
flow signatures.  Generator-side labels double as clustering ground truth.
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from . import config as cfgmod
from .geometry import PitchTemplate
from .ingest import Detection, FlowField, FrameRecord, save_flow_field, save_frame_records
from .ingest import FeatureStream, save_feature_stream
from .spotting import Annotation, save_annotations

M_PER_PX = 0.25

PALETTE = {
    "team1": (185, 40, 40),
    "team2": (40, 60, 190),
    "referee": (220, 210, 60),
    "goalkeeperA": (190, 50, 190),
    "goalkeeperB": (40, 190, 190),
}
FIELD_GREEN_1 = (60, 140, 60)
FIELD_GREEN_2 = (70, 150, 70)
STANDS_GRAY = (90, 90, 100)
SCOREBOARD = (235, 235, 235)

# flow signature (px/frame) added inside player boxes around each action
ACTION_SIGNATURES = {
    "Goal": (3.0, 0.0),
    "Corner": (-3.0, 0.0),
    "Throw-in": (0.0, 3.0),
    "Kick-off": (0.0, -3.0),
}


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 320
    frame_w: int = 320
    frame_h: int = 180
    stands_rows: int = 18
    person_w: int = 18  # px; bbox area 18*28 = 504 > the 500 px^2 filter
    person_h: int = 28
    pan_range_m: float = 50.0  # camera center sweeps [-25, 25]
    action_every_s: float = 18.0
    signature_halfwidth_s: float = 4.0
    pitch: PitchTemplate = field(default_factory=PitchTemplate)


def _camera_center(cfg: SynthConfig, frame: int) -> float:
    half = cfg.pan_range_m / 2.0
    return -half + cfg.pan_range_m * frame / (cfg.n_frames - 1)


def _homography(cfg: SynthConfig, cx: float) -> np.ndarray:
    # image px -> pitch meters: x = cx - w*s/2 + s*px, y = -h*s/2 + s*py
    s = M_PER_PX
    return np.array(
        [[s, 0.0, cx - cfg.frame_w * s / 2.0], [0.0, s, -cfg.frame_h * s / 2.0], [0.0, 0.0, 1.0]]
    )


def _pitch_to_px(cfg: SynthConfig, cx: float, x: float, y: float) -> Tuple[float, float]:
    s = M_PER_PX
    return (x - (cx - cfg.frame_w * s / 2.0)) / s, (y + cfg.frame_h * s / 2.0) / s


def _roster(cfg: SynthConfig, rng) -> List[dict]:
    """13 outfield entities on an 8 m grid plus the two keepers."""
    roster = []
    slots = [(sx, sy) for sy in (-7.0, 1.0, 9.0) for sx in (-16.0, -8.0, 0.0, 8.0, 16.0)]
    classes = ["team1"] * 6 + ["team2"] * 6 + ["referee"]
    order = rng.permutation(len(slots))[: len(classes)]
    for pid, (cls, si) in enumerate(zip(classes, order)):
        roster.append({"id": pid, "cls": cls, "base": slots[si]})
    half = cfg.pitch.length_m / 2.0
    roster.append({"id": 13, "cls": "goalkeeperA", "base": (-(half - 1.0), 0.0)})
    roster.append({"id": 14, "cls": "goalkeeperB", "base": (half - 1.0, 0.0)})
    return roster


def _annotations(cfg: SynthConfig) -> List[Annotation]:
    actions = list(ACTION_SIGNATURES)
    duration = (cfg.n_frames - 1) * 0.5
    anns = []
    t = cfg.action_every_s
    i = 0
    while t < duration - 5.0:
        anns.append(
            Annotation(time_s=t, action=actions[i % len(actions)], visibility="visible" if i % 3 else "unshown")
        )
        t += cfg.action_every_s
        i += 1
    return anns


def synth_match(out_dir, cfg: SynthConfig = SynthConfig(), seed: int = 0) -> Dict[str, str]:
    """Generate the synthetic match; returns the emitted file paths."""
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    flows_dir = os.path.join(out_dir, "flows")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(flows_dir, exist_ok=True)

    roster = _roster(cfg, rng)
    annotations = _annotations(cfg)
    pan_px = (cfg.pan_range_m / (cfg.n_frames - 1)) / M_PER_PX  # camera flow magnitude
    sb = (2, 8, 18, 56)  # scoreboard rows/cols (r0, c0, r1, c1), inside the stands

    records = []
    labels: Dict[str, str] = {}
    for fi in range(cfg.n_frames):
        t = 0.5 * fi
        cx = _camera_center(cfg, fi)
        img = _render_background(cfg, cx)
        img[sb[0] : sb[2], sb[1] : sb[3]] = SCOREBOARD
        flow = np.zeros((cfg.frame_h, cfg.frame_w, 2), dtype=np.float32)
        flow[..., 0] = -pan_px
        flow[sb[0] : sb[2], sb[1] : sb[3]] = 0.0

        signature = (0.0, 0.0)
        for ann in annotations:
            if abs(t - ann.time_s) <= cfg.signature_halfwidth_s:
                signature = ACTION_SIGNATURES[ann.action]
                break

        detections = []
        for person in roster:
            bx, by = person["base"]
            wob = rng.uniform(-1.0, 1.0, size=2)
            x, y = bx + wob[0], by + wob[1] * 0.5
            px, py = _pitch_to_px(cfg, cx, x, y)
            x0, y0 = int(round(px)) - cfg.person_w // 2, int(round(py)) - cfg.person_h
            x1, y1 = x0 + cfg.person_w, y0 + cfg.person_h
            if x0 < 0 or y0 < cfg.stands_rows or x1 > cfg.frame_w or y1 > cfg.frame_h:
                continue
            color = np.array(PALETTE[person["cls"]], dtype=np.int64)
            jitter = rng.integers(-4, 5, size=(cfg.person_h, cfg.person_w, 3))
            img[y0:y1, x0:x1] = np.clip(color[None, None, :] + jitter, 0, 255).astype(np.uint8)
            noise = rng.normal(0.0, 0.05, size=2)
            flow[y0:y1, x0:x1, 0] = -pan_px + signature[0] + noise[0]
            flow[y0:y1, x0:x1, 1] = signature[1] + noise[1]
            area = cfg.person_w * cfg.person_h
            detections.append(
                Detection(
                    id=person["id"],
                    bbox=(float(x0), float(y0), float(x1), float(y1)),
                    score=float(0.90 + 0.09 * rng.random()),
                    mask_rle=(0, area),
                )
            )
            labels[f"{fi}:{person['id']}"] = person["cls"]

        Image.fromarray(img).save(os.path.join(frames_dir, f"frame_{fi:06d}.png"))
        save_flow_field(
            FlowField(width=cfg.frame_w, height=cfg.frame_h, values=flow),
            os.path.join(flows_dir, f"flow_{fi:06d}.pgf"),
        )
        records.append(
            FrameRecord(
                frame_index=fi,
                timestamp_s=t,
                detections=tuple(detections),
                homography=_homography(cfg, cx),
                calib_confidence=0.95,
                frame_size=(cfg.frame_w, cfg.frame_h),
            )
        )

    paths = {
        "records": os.path.join(out_dir, "records.jsonl"),
        "annotations": os.path.join(out_dir, "annotations.tsv"),
        "labels": os.path.join(out_dir, "labels.tsv"),
        "features_rgb": os.path.join(out_dir, "features_rgb.txt"),
        "features_audio": os.path.join(out_dir, "features_audio.txt"),
        "config": os.path.join(out_dir, "config.txt"),
        "frames_dir": frames_dir,
        "flows_dir": flows_dir,
    }
    save_frame_records(records, paths["records"])
    save_annotations(annotations, paths["annotations"])
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        for sid, cls in labels.items():
            fh.write(f"{sid}\t{cls}\n")
    for modality, key in (("rgb", "features_rgb"), ("audio", "features_audio")):
        vecs = rng.standard_normal((cfg.n_frames, 16))
        save_feature_stream(FeatureStream(modality=modality, dim=16, vectors=vecs), paths[key])

    cfg_values = dict(cfgmod.DEFAULTS)
    cfg_values.update(
        {
            "seed": seed,
            "paths.records": paths["records"],
            "paths.frames_dir": frames_dir,
            "paths.flows_dir": flows_dir,
            "paths.annotations": paths["annotations"],
            "paths.labels": paths["labels"],
            "paths.cache_dir": os.path.join(out_dir, "cache"),
            "gnn.max_epochs": 80,
            "gnn.lr": 3e-3,
            "gnn.train_stride": 4,  # train on a strided subset, infer densely
            "gnn.float64": False,  # production numerics for the end-to-end run
        }
    )
    cfgmod.save_config(cfgmod.PipelineConfig(values=cfg_values), paths["config"])
    return paths


def _render_background(cfg: SynthConfig, cx: float) -> np.ndarray:
    img = np.empty((cfg.frame_h, cfg.frame_w, 3), dtype=np.uint8)
    img[: cfg.stands_rows] = STANDS_GRAY
    cols = np.arange(cfg.frame_w)
    pitch_x = (cx - cfg.frame_w * M_PER_PX / 2.0) + cols * M_PER_PX
    stripe = (np.floor(pitch_x / 5.0).astype(int) % 2) == 0
    row = np.where(stripe[:, None], FIELD_GREEN_1, FIELD_GREEN_2).astype(np.uint8)
    img[cfg.stands_rows :] = row[None, :, :]
    return img


def load_labels(path) -> Dict[str, str]:
    labels = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sid, cls = line.split("\t")
                labels[sid] = cls
    return labels
