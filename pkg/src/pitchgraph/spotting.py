"""Sliding-window inference, per-class NMS, and tolerance-windowed
average-mAP evaluation.

Matching is greedy in confidence order: each prediction takes the nearest
unmatched same-class annotation within the tolerance.  AP uses all-point
interpolation of the precision-recall curve.  Scores are reported per
tolerance (default 5..60 s in 5 s steps) and for the all / visible-only /
unshown-only annotation subsets; the single 60 s figure is also emitted.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ParseError
from .graphs import ACTION_CLASSES, BACKGROUND, LABEL_INDEX

DEFAULT_TOLERANCES = tuple(float(t) for t in range(5, 65, 5))


@dataclass(frozen=True)
class Spot:
    time_s: float
    action: str
    confidence: float

    def __post_init__(self):
        if self.action not in ACTION_CLASSES:
            raise ContractError(f"spot action {self.action!r} not in the 17-class vocabulary")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"spot confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Annotation:
    time_s: float
    action: str
    visibility: str  # "visible" or "unshown"

    def __post_init__(self):
        if self.action not in ACTION_CLASSES:
            raise ContractError(f"annotation action {self.action!r} not in the vocabulary")
        if self.visibility not in ("visible", "unshown"):
            raise ContractError(f"visibility must be visible/unshown, got {self.visibility!r}")


def infer_spots(window_centers, probabilities, nms_window_s: float = 20.0) -> List[Spot]:
    """Candidate spots from per-window class probabilities, then per-class NMS.

    probabilities is (n_windows, 18) with background last; every
    non-background class yields one candidate per window at the window
    center.  NMS keeps a candidate iff no strictly higher-confidence
    same-class candidate lies within nms_window_s.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    centers = np.asarray(window_centers, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(centers):
        raise ContractError(f"probabilities shape {probs.shape} mismatches {len(centers)} centers")
    spots: List[Spot] = []
    for ci, action in enumerate(ACTION_CLASSES):
        conf = probs[:, ci]
        order = np.argsort(-conf, kind="stable")
        kept_times: List[float] = []
        kept: List[Spot] = []
        for idx in order:
            t = centers[idx]
            if any(abs(t - kt) <= nms_window_s for kt in kept_times):
                continue
            kept_times.append(t)
            kept.append(Spot(time_s=float(t), action=action, confidence=float(conf[idx])))
        spots.extend(kept)
    spots.sort(key=lambda s: (-s.confidence, s.time_s, s.action))
    return spots


def match_spots(preds: Sequence[Spot], gt: Sequence[Annotation], tolerance_s: float) -> List[bool]:
    """Greedy TP/FP flags, confidence-descending, each annotation used once."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].time_s))
    used = [False] * len(gt)
    flags = [False] * len(preds)
    for pi in order:
        p = preds[pi]
        best, best_d = None, None
        for gi, ann in enumerate(gt):
            if used[gi] or ann.action != p.action:
                continue
            d = abs(ann.time_s - p.time_s)
            if d <= tolerance_s and (best_d is None or d < best_d):
                best, best_d = gi, d
        if best is not None:
            used[best] = True
            flags[pi] = True
    return flags


def average_precision(flags: Sequence[bool], confidences: Sequence[float], n_gt: int) -> float:
    """All-point interpolated AP; 0 when there is nothing to recall."""
    if n_gt < 0:
        raise ContractError("n_gt must be >= 0")
    if n_gt == 0 or not flags:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    tp = np.asarray(flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / n_gt
    # precision envelope: max precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(tp)):
        if tp[i]:
            ap += (recall[i] - prev_r) * envelope[i]
            prev_r = recall[i]
    return float(ap)


def _subset(gt: Sequence[Annotation], which: str) -> List[Annotation]:
    if which == "all":
        return list(gt)
    return [a for a in gt if a.visibility == ("visible" if which == "visible" else "unshown")]


def map_at_tolerance(preds: Sequence[Spot], gt: Sequence[Annotation], tolerance_s: float):
    """Per-class AP dict and their mean (classes without GT excluded)."""
    per_class = {}
    aps = []
    for action in ACTION_CLASSES:
        cls_gt = [a for a in gt if a.action == action]
        cls_preds = [p for p in preds if p.action == action]
        if not cls_gt:
            continue
        flags = match_spots(cls_preds, cls_gt, tolerance_s)
        ap = average_precision(flags, [p.confidence for p in cls_preds], len(cls_gt))
        per_class[action] = ap
        aps.append(ap)
    return per_class, (float(np.mean(aps)) if aps else 0.0)


def average_map(
    preds: Sequence[Spot],
    gt: Sequence[Annotation],
    tolerances: Sequence[float] = DEFAULT_TOLERANCES,
) -> Dict:
    """mAP per tolerance averaged across tolerances, for all three GT subsets."""
    if not tolerances:
        raise ContractError("tolerances must be non-empty")
    report: Dict = {"tolerances": list(tolerances), "subsets": {}}
    for subset in ("all", "visible", "unshown"):
        sub_gt = _subset(gt, subset)
        per_tol = []
        per_class_tables = {}
        for tol in tolerances:
            per_class, mean = map_at_tolerance(preds, sub_gt, tol)
            per_tol.append(mean)
            per_class_tables[tol] = per_class
        report["subsets"][subset] = {
            "map_per_tolerance": per_tol,
            "average_map": float(np.mean(per_tol)),
            "per_class": per_class_tables,
        }
    sixty_class, sixty = map_at_tolerance(preds, _subset(gt, "all"), 60.0)
    report["single_map_60"] = sixty
    report["single_map_60_per_class"] = sixty_class
    return report


# ---------------------------------------------------------------------------
# Files: tab-separated, one entry per line (class names contain spaces)


def save_spots(spots: Sequence[Spot], path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in spots:
            fh.write(f"{s.time_s!r}\t{s.action}\t{s.confidence!r}\n")


def load_spots(path) -> List[Spot]:
    spots = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"line {line_no}: expected 3 tab-separated fields")
            spots.append(Spot(time_s=float(parts[0]), action=parts[1], confidence=float(parts[2])))
    return spots


def save_annotations(annotations: Sequence[Annotation], path):
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(f"{a.time_s!r}\t{a.action}\t{a.visibility}\n")


def load_annotations(path) -> List[Annotation]:
    anns = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"line {line_no}: expected 3 tab-separated fields")
            anns.append(Annotation(time_s=float(parts[0]), action=parts[1], visibility=parts[2]))
    return anns


def format_report(report: Dict) -> str:
    """Human-readable per-class x tolerance table plus the summary scalars."""
    lines = []
    tols = report["tolerances"]
    header = f"{'class':<22}" + "".join(f"{int(t):>7}s" for t in tols)
    for subset in ("all", "visible", "unshown"):
        sub = report["subsets"][subset]
        lines.append(f"[{subset}]")
        lines.append(header)
        for action in ACTION_CLASSES:
            row = [sub["per_class"][tol].get(action) for tol in tols]
            if all(v is None for v in row):
                continue
            cells = "".join(f"{(v if v is not None else float('nan')):>8.3f}" for v in row)
            lines.append(f"{action:<22}{cells}")
        lines.append(f"{'mAP':<22}" + "".join(f"{v:>8.3f}" for v in sub["map_per_tolerance"]))
        lines.append(f"average-mAP ({subset}): {sub['average_map']:.4f}")
        lines.append("")
    lines.append(f"single-tolerance mAP @60s (all): {report['single_map_60']:.4f}")
    return "\n".join(lines) + "\n"
