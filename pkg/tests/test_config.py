import json

import pytest

from config import DetectionConfig, ToolConfig, load_config
from errors import (
    EXIT_ANALYSIS, EXIT_INPUT, EXIT_USAGE, ConfigError, DeadlockError, DetectionError, ProfileFormatError,
    ScalingLossError, SketchError,
)


class TestDetectionConfig:
    def test_defaults(self, default_cfg):
        assert default_cfg.abnorm_thd == 1.3
        assert default_cfg.merge == "mean"
        assert default_cfg.max_loop_depth == 10
        assert DetectionConfig(**default_cfg.to_dict()) == default_cfg

    @pytest.mark.parametrize("kwargs", [
        {"abnorm_thd": 1.0},
        {"min_time_fraction": 1.5},
        {"min_time_fraction": -0.1},
        {"merge": "mode"},
        {"max_loop_depth": -1},
        {"top_k": 0},
        {"min_abs_us": -1.0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DetectionConfig(**kwargs)


class TestToolConfig:
    def test_flags_override_file_values(self):
        base = ToolConfig(detection=DetectionConfig(abnorm_thd=2.0, top_k=3), wait_threshold_us=5.0)
        merged = base.merge({"abnorm_thd": 1.5, "top_k": None, "wait_threshold_us": 50.0, "unrelated": 1})
        assert merged.detection.abnorm_thd == 1.5
        assert merged.detection.top_k == 3
        assert merged.wait_threshold_us == 50.0
        assert base.detection.abnorm_thd == 2.0

    def test_merge_validates(self):
        with pytest.raises(ConfigError):
            ToolConfig().merge({"sampling_rate": 3.0})

    def test_to_dict(self):
        doc = ToolConfig().to_dict()
        assert doc["sampling_rate"] == 1.0 and doc["detection"]["merge"] == "mean"


class TestLoadConfig:
    def test_no_path_gives_defaults(self):
        assert load_config(None) == ToolConfig()

    def test_load(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"detection": {"abnorm_thd": 1.5, "merge": "median"},
                                    "wait_threshold_us": 100, "paths": {"runs": "out"}}))
        cfg = load_config(str(path))
        assert cfg.detection.abnorm_thd == 1.5 and cfg.detection.merge == "median"
        assert cfg.wait_threshold_us == 100.0
        assert cfg.paths == {"runs": "out"}

    @pytest.mark.parametrize("content, message", [
        ("{", "Invalid JSON"),
        ("[]", "top level"),
        ('{"detection": {"beta": 1}}', "unknown detection keys: beta"),
        ('{"detection": {"abnorm_thd": 0.5}}', "abnorm_thd"),
    ])
    def test_invalid_files(self, tmp_path, content, message):
        path = tmp_path / "config.json"
        path.write_text(content)
        with pytest.raises(ConfigError, match=message):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "absent.json"))


class TestErrors:
    def test_exit_codes(self):
        assert ConfigError("x").exit_code == EXIT_USAGE
        assert SketchError("x").exit_code == EXIT_INPUT
        assert DetectionError("x").exit_code == EXIT_ANALYSIS
        assert DeadlockError("x", {}).exit_code == EXIT_ANALYSIS

    def test_to_dict(self):
        err = SketchError("unexpected '}'", "a.sk", 3, 7)
        assert err.to_dict() == {"error": "SketchError", "message": "unexpected '}'",
                                 "file": "a.sk", "line": 3, "column": 7}
        assert str(err) == "a.sk:3:7: unexpected '}'"

    def test_profile_error_position(self):
        assert str(ProfileFormatError("bad", path="p.jsonl", line=4)) == "p.jsonl:4: bad"
        assert str(ProfileFormatError("bad")) == "bad"

    def test_deadlock_detail_uses_string_ranks(self):
        err = DeadlockError("stuck", {1: "Recv@t.sk:2", 0: "Recv@t.sk:2"})
        assert err.to_dict()["stuck"] == {"0": "Recv@t.sk:2", "1": "Recv@t.sk:2"}
        assert isinstance(err, ScalingLossError)
