"""Pipeline orchestration: staged runs with cached, atomically written
artifacts.

Stages: ingest -> teams -> motion -> graphs -> train -> spot -> eval, plus
the synthetic-match generator.  Each stage writes its artifact under the
cache directory together with a key file hashing its inputs (upstream
artifacts + the relevant config subset + seed); reruns with matching keys
are skipped.  Exit codes: 0 ok, 1 runtime error, 2 dependency error.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from contextlib import contextmanager

import numpy as np
from PIL import Image

from . import colorfeat, geometry, gnn, graphs, ingest, motion, spotting, teamcluster
from .config import PipelineConfig, load_config
from .errors import DependencyError, PitchgraphError
from .synth import SynthConfig, load_labels, synth_match

STAGES = ("ingest", "teams", "motion", "graphs", "train", "spot", "eval")

ARTIFACTS = {
    "ingest": "filtered.jsonl",
    "teams": "teams.json",
    "motion": "motion.jsonl",
    "graphs": "windows.bin",
    "train": "model.ckpt",
    "spot": "spots.tsv",
    "eval": "report.txt",
}

DEPENDS = {
    "ingest": (),
    "teams": ("ingest",),
    "motion": ("ingest",),
    "graphs": ("ingest", "teams", "motion"),
    "train": ("graphs",),
    "spot": ("graphs", "train"),
    "eval": ("spot",),
}

CONFIG_SUBSETS = {
    "ingest": ("ingest.",),
    "teams": ("ingest.", "pitch.", "geometry.", "colorfeat.", "teamcluster."),
    "motion": ("motion.",),
    "graphs": ("pitch.", "graph.", "colorfeat."),
    "train": ("gnn.",),
    "spot": ("spot.", "gnn."),
    "eval": ("eval.",),
}


# ---------------------------------------------------------------------------
# Cache plumbing


def atomic_write(path, data):
    """Write bytes or text to path via a temp file + rename."""
    mode = "wb" if isinstance(data, bytes) else "w"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def cache_lock(cache_dir):
    lock_path = os.path.join(cache_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PitchgraphError(f"cache dir is locked by another run ({lock_path})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.unlink(lock_path)


def _hash_file(hasher, path):
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            hasher.update(block)


def stage_key(stage, cfg: PipelineConfig, cache_dir, seed) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.subset(*CONFIG_SUBSETS[stage]), sort_keys=True).encode())
    h.update(f"seed={seed}".encode())
    for dep in DEPENDS[stage]:
        dep_path = os.path.join(cache_dir, ARTIFACTS[dep])
        if not os.path.exists(dep_path):
            raise DependencyError(f"stage {stage!r} needs the {dep!r} artifact; run that stage first")
        _hash_file(h, dep_path)
    if stage == "ingest":
        _hash_file(h, cfg["paths.records"])
    return h.hexdigest()


def artifact_path(cache_dir, stage):
    return os.path.join(cache_dir, ARTIFACTS[stage])


def _is_cached(cache_dir, stage, key):
    apath = artifact_path(cache_dir, stage)
    kpath = apath + ".key"
    if os.path.exists(apath) and os.path.exists(kpath):
        with open(kpath) as fh:
            return fh.read().strip() == key
    return False


def _store(cache_dir, stage, key, payload):
    apath = artifact_path(cache_dir, stage)
    atomic_write(apath, payload)
    atomic_write(apath + ".key", key)
    return apath


# ---------------------------------------------------------------------------
# Shared helpers


def sample_id(frame_index, det_id) -> str:
    return f"{frame_index}:{det_id}"


def full_frame_mask(det: ingest.Detection, frame_size) -> np.ndarray:
    """Reconstruct the full-frame boolean mask from the bbox-local RLE."""
    w, h = frame_size
    mask = np.zeros((h, w), dtype=bool)
    local = det.decode_mask()
    x0, y0 = int(round(det.bbox[0])), int(round(det.bbox[1]))
    mask[y0 : y0 + local.shape[0], x0 : x0 + local.shape[1]] = local
    return mask


def _load_frame_image(frames_dir, frame_index) -> np.ndarray:
    path = os.path.join(frames_dir, f"frame_{frame_index:06d}.png")
    if not os.path.exists(path):
        raise DependencyError(f"missing frame image {path}")
    return np.asarray(Image.open(path).convert("RGB"))


def _load_flow(flows_dir, frame_index) -> ingest.FlowField:
    path = os.path.join(flows_dir, f"flow_{frame_index:06d}.pgf")
    if not os.path.exists(path):
        raise DependencyError(f"missing flow file {path}")
    return ingest.load_flow_field(path)


def _detection_histogram(img, det, frame_size, erosion_radius):
    mask = det.decode_mask()
    eroded = colorfeat.erode_mask(mask, erosion_radius)
    if not eroded.any():
        eroded = mask  # tiny masks: fall back to the raw segmentation
    x0, y0 = int(round(det.bbox[0])), int(round(det.bbox[1]))
    patch = img[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]]
    return colorfeat.ab_histogram(patch, eroded)


def _filter_cfg(cfg):
    return ingest.FilterConfig(
        min_calib_confidence=cfg["ingest.min_calib_confidence"],
        closeup_frac=cfg["ingest.closeup_frac"],
        min_score=cfg["ingest.min_score"],
        min_area_px=cfg["ingest.min_area_px"],
    )


def _pitch(cfg):
    return geometry.PitchTemplate(length_m=cfg["pitch.length_m"], width_m=cfg["pitch.width_m"])


def _positions(rec, dets, cfg):
    return [
        (d.id, geometry.project_to_pitch(geometry.foot_point(d.bbox), rec.homography)) for d in dets
    ]


# ---------------------------------------------------------------------------
# Stages


def run_ingest(cfg, cache_dir, seed):
    records = ingest.load_frame_records(cfg["paths.records"])
    fcfg = _filter_cfg(cfg)
    kept = ingest.filter_frames(records, fcfg)
    filtered = [
        ingest.FrameRecord(
            frame_index=r.frame_index,
            timestamp_s=r.timestamp_s,
            detections=tuple(ingest.filter_detections(r, fcfg)),
            homography=r.homography,
            calib_confidence=r.calib_confidence,
            frame_size=r.frame_size,
        )
        for r in kept
    ]
    payload = "".join(json.dumps(ingest.record_to_dict(r)) + "\n" for r in filtered)
    n_det = sum(len(r.detections) for r in filtered)
    return payload, f"kept {len(filtered)}/{len(records)} frames, {n_det} detections"


def run_teams(cfg, cache_dir, seed):
    records = ingest.load_frame_records(artifact_path(cache_dir, "ingest"))
    pitch = _pitch(cfg)
    erosion = cfg["colorfeat.erosion_radius"]
    margin = cfg["geometry.sideline_margin_m"]
    histograms = {}
    midfield_samples = []
    gk_candidates = {"A": [], "B": []}
    for rec in records:
        if not rec.detections:
            continue
        img = _load_frame_image(cfg["paths.frames_dir"], rec.frame_index)
        positions = _positions(rec, rec.detections, cfg)
        by_id = dict(positions)
        for det in rec.detections:
            sid = sample_id(rec.frame_index, det.id)
            histograms[sid] = _detection_histogram(img, det, rec.frame_size, erosion)
        pts = [p for _, p in positions]
        if geometry.is_midfield_view(pts, pitch, min_frac=cfg["geometry.midfield_frac"]):
            for det in rec.detections:
                if not geometry.near_sideline(by_id[det.id], pitch, margin_m=margin):
                    sid = sample_id(rec.frame_index, det.id)
                    midfield_samples.append((sid, histograms[sid]))
        else:
            cand = geometry.goalkeeper_candidate(
                positions,
                pitch,
                near_frac=cfg["geometry.gk_near_frac"],
                far_frac=cfg["geometry.gk_far_frac"],
                axis=cfg["geometry.gk_axis"],
            )
            if cand is not None:
                side, det_id = cand
                sid = sample_id(rec.frame_index, det_id)
                gk_candidates[side].append((sid, histograms[sid]))
    params = teamcluster.TeamClusterParams(
        n_prototypes=cfg["teamcluster.n_prototypes"],
        gmm_components=cfg["teamcluster.gmm_components"],
        lam=cfg["teamcluster.lambda"],
        d_near_zero=cfg["teamcluster.d_near_zero"],
        tau_margin=cfg["teamcluster.tau_margin"],
        gk_threshold=cfg["teamcluster.gk_threshold"],
        referee_threshold=cfg["teamcluster.referee_threshold"],
    )
    cluster_set = teamcluster.build_cluster_set(midfield_samples, gk_candidates, params, seed)
    clf, val_acc = teamcluster.train_player_classifier(cluster_set, seed=seed)
    summary = f"clusters {cluster_set.sizes()}, val acc {val_acc:.3f}"
    purity_out = None
    if cfg["paths.labels"]:
        per_class, overall = teamcluster.purity(cluster_set, load_labels(cfg["paths.labels"]))
        purity_out = {"per_class": per_class, "overall": overall}
        summary += f", purity {overall:.2f}%"
    payload = json.dumps(
        {
            "clusters": {name: [sid for sid, _ in cluster_set[name]] for name in teamcluster.CLASS_NAMES},
            "classifier": {"weights": clf.weights_.tolist(), "bias": clf.bias_.tolist()},
            "validation_accuracy": val_acc,
            "purity": purity_out,
            "histograms": {sid: h.bins.tolist() for sid, h in histograms.items()},
        }
    )
    return payload, summary


def run_motion(cfg, cache_dir, seed):
    records = ingest.load_frame_records(artifact_path(cache_dir, "ingest"))
    params = motion.MotionParams(
        norm_eps=cfg["motion.norm_eps"],
        min_region_px=cfg["motion.min_region_px"],
        patch_threshold=cfg["motion.patch_threshold"],
        merge_eps=cfg["motion.merge_eps"],
    )
    step = max(1, int(round(1.0 / cfg["motion.sample_frac"])))
    sample = records[::step]
    flows = [_load_flow(cfg["paths.flows_dir"], r.frame_index) for r in sample]
    frames = [_load_frame_image(cfg["paths.frames_dir"], r.frame_index) for r in sample]
    regions = motion.detect_fixed_regions(flows, frames, params, seed=seed) if len(sample) >= 10 else []
    lines = []
    for rec in records:
        img = _load_frame_image(cfg["paths.frames_dir"], rec.frame_index)
        flow = _load_flow(cfg["paths.flows_dir"], rec.frame_index)
        person_masks = [full_frame_mask(d, rec.frame_size) for d in rec.detections]
        fixed_masks = [r.mask for r in regions if motion.fixed_region_present(img, r, params)]
        field_mask = motion.segment_field(img, person_masks, fixed_masks, params, seed=seed)
        if field_mask.any():
            field_flow = motion.dominant_flow(flow, field_mask)
        else:
            field_flow = motion.MotionVector(0.0, 0.0)
        players = {}
        for det, mask in zip(rec.detections, person_masks):
            vec = motion.player_motion(motion.dominant_flow(flow, mask), field_flow)
            players[str(det.id)] = [vec.u, vec.v]
        lines.append(
            json.dumps(
                {"frame_index": rec.frame_index, "field": [field_flow.u, field_flow.v], "players": players}
            )
        )
    return "\n".join(lines) + "\n", f"{len(regions)} fixed regions, {len(records)} frames"


def run_graphs(cfg, cache_dir, seed):
    records = ingest.load_frame_records(artifact_path(cache_dir, "ingest"))
    with open(artifact_path(cache_dir, "teams")) as fh:
        teams_art = json.load(fh)
    clf = teamcluster.SoftmaxPlayerClassifier()
    clf.weights_ = np.asarray(teams_art["classifier"]["weights"])
    clf.bias_ = np.asarray(teams_art["classifier"]["bias"])
    hists = {sid: np.asarray(bins) for sid, bins in teams_art["histograms"].items()}
    motion_by_frame = {}
    with open(artifact_path(cache_dir, "motion")) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                motion_by_frame[d["frame_index"]] = d
    pitch = _pitch(cfg)
    threshold = cfg["graph.edge_threshold_m"]
    graphs_by_time = {}
    for rec in records:
        mot = motion_by_frame.get(rec.frame_index, {"players": {}})
        positions = _positions(rec, rec.detections, cfg)
        by_id = dict(positions)
        center = geometry.project_to_pitch(
            (rec.frame_size[0] / 2.0, rec.frame_size[1] / 2.0), rec.homography
        )
        nodes, pts = [], []
        frame_area = rec.frame_size[0] * rec.frame_size[1]
        for det in rec.detections:
            sid = sample_id(rec.frame_index, det.id)
            probs = clf.predict_proba(hists[sid][None, :])[0]
            uv = mot["players"].get(str(det.id), [0.0, 0.0])
            nodes.append(
                graphs.build_node(probs, uv, det.area / frame_area, by_id[det.id], center, rec.calib_confidence)
            )
            pts.append(by_id[det.id])
        edges = graphs.build_edges(pts, threshold_m=threshold)
        g = graphs.PlayerGraph(
            nodes=np.asarray(nodes).reshape(len(nodes), graphs.NODE_DIM),
            edges=tuple(edges),
            timestamp_s=rec.timestamp_s,
        )
        graphs_by_time[round(rec.timestamp_s, 6)] = g
    annotations = []
    if cfg["paths.annotations"]:
        annotations = [(a.time_s, a.action) for a in spotting.load_annotations(cfg["paths.annotations"])]
    windows = [
        graphs.build_window(graphs_by_time, rec.timestamp_s, annotations) for rec in records
    ]
    tmp = artifact_path(cache_dir, "graphs") + ".build"
    graphs.save_windows(windows, tmp)
    with open(tmp, "rb") as fh:
        payload = fh.read()
    os.unlink(tmp)
    n_actions = sum(w.label != graphs.BACKGROUND for w in windows)
    return payload, f"{len(windows)} windows ({n_actions} action-labeled)"


def _gnn_config(cfg):
    return gnn.GNNConfig(
        hidden=cfg["gnn.hidden"],
        k_dyn=cfg["gnn.k_dyn"],
        vlad_clusters=cfg["gnn.vlad_clusters"],
        lr=cfg["gnn.lr"],
        batch_size=cfg["gnn.batch_size"],
        patience=cfg["gnn.patience"],
        max_epochs=cfg["gnn.max_epochs"],
        chunk_windows=cfg["gnn.chunk_windows"],
        float64=cfg["gnn.float64"],
    )


def run_train(cfg, cache_dir, seed):
    windows = graphs.load_windows(artifact_path(cache_dir, "graphs"))
    train_set = windows[:: max(1, cfg["gnn.train_stride"])]
    model = gnn.train(train_set, _gnn_config(cfg), seed=seed)
    tmp = artifact_path(cache_dir, "train") + ".build"
    gnn.save_checkpoint(model, tmp)
    with open(tmp, "rb") as fh:
        payload = fh.read()
    os.unlink(tmp)
    probs = gnn.predict_proba(model, windows)
    acc = float((probs.argmax(axis=1) == np.array([w.label_index for w in windows])).mean())
    return payload, f"trained on {len(windows)} windows, train acc {acc:.3f}"


def run_spot(cfg, cache_dir, seed):
    windows = graphs.load_windows(artifact_path(cache_dir, "graphs"))
    model = gnn.load_checkpoint(artifact_path(cache_dir, "train"), _gnn_config(cfg))
    probs = gnn.predict_proba(model, windows)
    centers = [w.center_time_s for w in windows]
    spots = spotting.infer_spots(centers, probs, nms_window_s=cfg["spot.nms_window_s"])
    payload = "".join(f"{s.time_s!r}\t{s.action}\t{s.confidence!r}\n" for s in spots)
    return payload, f"{len(spots)} spots from {len(windows)} windows"


def run_eval(cfg, cache_dir, seed):
    if not cfg["paths.annotations"]:
        raise DependencyError("eval needs paths.annotations in the config")
    preds = spotting.load_spots(artifact_path(cache_dir, "spot"))
    gt = spotting.load_annotations(cfg["paths.annotations"])
    report = spotting.average_map(preds, gt, cfg.tolerances())
    text = spotting.format_report(report)
    json_path = os.path.join(cache_dir, "report.json")
    atomic_write(json_path, json.dumps(report, default=float))
    avg = report["subsets"]["all"]["average_map"]
    return text, f"average-mAP {avg:.3f} (mAP@60s {report['single_map_60']:.3f})"


RUNNERS = {
    "ingest": run_ingest,
    "teams": run_teams,
    "motion": run_motion,
    "graphs": run_graphs,
    "train": run_train,
    "spot": run_spot,
    "eval": run_eval,
}


def run_stage(stage, cfg: PipelineConfig, seed=None):
    """Run one stage with caching; returns the artifact path."""
    if stage not in STAGES:
        raise PitchgraphError(f"unknown stage {stage!r}; expected one of {STAGES}")
    seed = cfg["seed"] if seed is None else seed
    cache_dir = cfg["paths.cache_dir"]
    os.makedirs(cache_dir, exist_ok=True)
    with cache_lock(cache_dir):
        key = stage_key(stage, cfg, cache_dir, seed)
        apath = artifact_path(cache_dir, stage)
        if _is_cached(cache_dir, stage, key):
            print(f"[{stage}] cached: {apath}")
            return apath
        start = time.monotonic()
        payload, summary = RUNNERS[stage](cfg, cache_dir, seed)
        _store(cache_dir, stage, key, payload)
        print(f"[{stage}] {summary} ({time.monotonic() - start:.1f}s) -> {apath}")
        return apath


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pitchgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage, help=f"run the {stage} stage")
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
    sp = sub.add_parser("synth", help="generate the synthetic test match")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=SynthConfig.n_frames)
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            paths = synth_match(args.out, SynthConfig(n_frames=args.frames), seed=args.seed)
            print(f"[synth] wrote {paths['records']}; config at {paths['config']}")
            return 0
        cfg = load_config(args.config)
        run_stage(args.command, cfg, seed=args.seed)
        return 0
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PitchgraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
