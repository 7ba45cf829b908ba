import pytest

from pitchgraph.config import DEFAULTS, PipelineConfig, load_config, save_config
from pitchgraph.errors import ParseError, ValidationError


class TestDefaults:
    def test_fresh_config_carries_defaults(self):
        cfg = PipelineConfig()
        assert cfg["teamcluster.lambda"] == 0.10
        assert cfg["graph.edge_threshold_m"] == 5.0
        assert cfg.get("nope", 7) == 7

    def test_defaults_validate(self):
        PipelineConfig().validate()


class TestLoading:
    def test_save_load_round_trip(self, tmp_path):
        cfg = PipelineConfig()
        cfg.values["gnn.lr"] = 0.005
        cfg.values["paths.cache_dir"] = "/tmp/x"
        path = tmp_path / "pipeline.cfg"
        save_config(cfg, path)
        loaded = load_config(path)
        assert loaded.values == cfg.values

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("# a comment\n\nseed = 3  # trailing\n")
        assert load_config(path)["seed"] == 3

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("nonsense.key = 1\n")
        with pytest.raises(ParseError, match="unknown config key"):
            load_config(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("seed 3\n")
        with pytest.raises(ParseError, match="key = value"):
            load_config(path)

    def test_bad_value_names_line(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("gnn.max_epochs = soon\n")
        with pytest.raises(ParseError, match=":1"):
            load_config(path)

    def test_bool_coercion(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("gnn.float64 = false\n")
        assert load_config(path)["gnn.float64"] is False
        path.write_text("gnn.float64 = maybe\n")
        with pytest.raises(ParseError):
            load_config(path)

    def test_numeric_coercion(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("gnn.lr = 0.01\ngnn.max_epochs = 7\n")
        cfg = load_config(path)
        assert cfg["gnn.lr"] == 0.01
        assert cfg["gnn.max_epochs"] == 7


class TestValidation:
    def test_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("ingest.min_calib_confidence = 1.5\n")
        with pytest.raises(ValidationError):
            load_config(path)

    def test_bad_axis_rejected(self, tmp_path):
        path = tmp_path / "pipeline.cfg"
        path.write_text("geometry.gk_axis = diagonal\n")
        with pytest.raises(ValidationError):
            load_config(path)


class TestAccessors:
    def test_tolerances_parsed(self):
        cfg = PipelineConfig()
        cfg.values["eval.tolerances"] = "5, 10,15"
        assert cfg.tolerances() == [5.0, 10.0, 15.0]

    def test_subset_filters_by_prefix(self):
        cfg = PipelineConfig()
        sub = cfg.subset("gnn.", "spot.")
        assert all(k.startswith(("gnn.", "spot.")) for k in sub)
        assert "gnn.lr" in sub and "seed" not in sub
        assert list(sub) == sorted(sub)

    def test_every_default_key_has_a_known_section(self):
        sections = {k.split(".")[0] for k in DEFAULTS if "." in k}
        assert sections <= {
            "paths", "ingest", "pitch", "geometry", "colorfeat",
            "teamcluster", "motion", "graph", "gnn", "spot", "eval",
        }
