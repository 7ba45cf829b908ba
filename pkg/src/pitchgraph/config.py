"""Pipeline configuration: a flat text file of dotted keys.

Format: one ``section.key = value`` per line, ``#`` comments.  Every
threshold the underlying method leaves unstated has exactly one key here.
"""

from dataclasses import dataclass, field
from typing import Dict

from .errors import ParseError, ValidationError

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "paths.records": "",
    "paths.frames_dir": "",
    "paths.flows_dir": "",
    "paths.annotations": "",
    "paths.labels": "",
    "paths.features_rgb": "",
    "paths.features_audio": "",
    "paths.cache_dir": "cache",
    "ingest.min_calib_confidence": 0.85,
    "ingest.closeup_frac": 0.10,
    "ingest.min_score": 0.80,
    "ingest.min_area_px": 500.0,
    "pitch.length_m": 105.0,
    "pitch.width_m": 68.0,
    "geometry.midfield_frac": 0.30,
    "geometry.gk_near_frac": 0.04,
    "geometry.gk_far_frac": 0.08,
    "geometry.gk_axis": "width",
    "geometry.sideline_margin_m": 1.0,
    "colorfeat.erosion_radius": 1,
    "teamcluster.n_prototypes": 6,
    "teamcluster.gmm_components": 3,
    "teamcluster.lambda": 0.10,
    "teamcluster.d_near_zero": 0.15,
    "teamcluster.tau_margin": 0.25,
    "teamcluster.gk_threshold": 0.4,
    "teamcluster.referee_threshold": 0.30,
    "motion.norm_eps": 0.5,
    "motion.min_region_px": 256,
    "motion.patch_threshold": 0.4,
    "motion.merge_eps": 20.0,
    "motion.sample_frac": 0.10,
    "graph.edge_threshold_m": 5.0,
    "gnn.hidden": 64,
    "gnn.k_dyn": 5,
    "gnn.vlad_clusters": 64,
    "gnn.lr": 1e-3,
    "gnn.batch_size": 96,
    "gnn.patience": 7,
    "gnn.max_epochs": 100,
    "gnn.train_stride": 1,  # train on every k-th window; inference stays dense
    "gnn.chunk_windows": 16,
    "gnn.float64": True,
    "spot.nms_window_s": 20.0,
    "eval.tolerances": "5,10,15,20,25,30,35,40,45,50,55,60",
}

_RANGES = {
    "ingest.min_calib_confidence": (0.0, 1.0),
    "ingest.closeup_frac": (0.0, 1.0),
    "geometry.midfield_frac": (0.0, 0.5),
    "geometry.gk_near_frac": (0.0, 0.5),
    "geometry.gk_far_frac": (0.0, 0.5),
    "teamcluster.gk_threshold": (0.0, 1.0),
    "teamcluster.referee_threshold": (0.0, 1.0),
    "motion.patch_threshold": (0.0, 1.0),
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ParseError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass
class PipelineConfig:
    values: Dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def subset(self, *prefixes) -> Dict[str, object]:
        """The config slice relevant to one stage (for cache keys)."""
        return {
            k: v for k, v in sorted(self.values.items()) if any(k.startswith(p) for p in prefixes)
        }

    def validate(self):
        for key, (lo, hi) in _RANGES.items():
            v = self.values[key]
            if not lo <= v <= hi:
                raise ValidationError(f"{key} = {v} outside [{lo}, {hi}]")
        if self.values["geometry.gk_axis"] not in ("width", "length"):
            raise ValidationError("geometry.gk_axis must be 'width' or 'length'")
        return self

    def tolerances(self):
        return [float(t) for t in str(self.values["eval.tolerances"]).split(",") if t.strip()]


def load_config(path) -> PipelineConfig:
    values = dict(DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ParseError(f"{path}:{line_no}: unknown config key {key!r}")
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: bad value for {key}: {exc}") from exc
    cfg = PipelineConfig(values=values)
    return cfg.validate()


def save_config(cfg: PipelineConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(cfg.values):
            fh.write(f"{key} = {cfg.values[key]}\n")
