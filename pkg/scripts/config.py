"""
Tunables for detection, backtracking and profiling.

Configuration comes from an optional JSON file and command-line flags;
flags always win.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional

from errors import ConfigError

MERGE_STRATEGIES = ("mean", "median", "max")


@dataclass(frozen=True)
class DetectionConfig:
    max_loop_depth: int = 10
    abnorm_thd: float = 1.3
    merge: str = "mean"
    slope_threshold: float = -0.25
    min_time_fraction: float = 0.05
    top_k: int = 10
    min_abs_us: float = 100.0

    def __post_init__(self):
        if self.abnorm_thd <= 1:
            raise ConfigError(f"abnorm_thd must be > 1, got {self.abnorm_thd}")
        if not 0 <= self.min_time_fraction <= 1:
            raise ConfigError(f"min_time_fraction must be in [0, 1], got {self.min_time_fraction}")
        if self.merge not in MERGE_STRATEGIES:
            raise ConfigError(f"unknown merge strategy '{self.merge}' (expected one of {', '.join(MERGE_STRATEGIES)})")
        if self.max_loop_depth < 0:
            raise ConfigError("max_loop_depth must be >= 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.min_abs_us < 0:
            raise ConfigError("min_abs_us must be >= 0")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class ToolConfig:
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    sampling_rate: float = 1.0
    wait_threshold_us: float = 0.0
    paths: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.sampling_rate <= 1:
            raise ConfigError(f"sampling_rate must be in [0, 1], got {self.sampling_rate}")
        if self.wait_threshold_us < 0:
            raise ConfigError("wait_threshold_us must be >= 0")

    def merge(self, flags: Dict) -> "ToolConfig":
        """
        Apply command-line overrides on top of this config.

        Args:
            flags: mapping of option name to value; None values are ignored

        Returns:
            New ToolConfig
        """
        detection_names = {f.name for f in fields(DetectionConfig)}
        det_updates = {k: v for k, v in flags.items() if k in detection_names and v is not None}
        top_updates = {k: v for k, v in flags.items()
                       if k in ("sampling_rate", "wait_threshold_us") and v is not None}
        detection = replace(self.detection, **det_updates) if det_updates else self.detection
        return replace(self, detection=detection, **top_updates)

    def to_dict(self) -> Dict:
        return {
            "detection": self.detection.to_dict(),
            "sampling_rate": self.sampling_rate,
            "wait_threshold_us": self.wait_threshold_us,
        }


def load_config(config_path: Optional[str] = None) -> ToolConfig:
    """Load a JSON config file; no path means defaults."""
    if not config_path:
        return ToolConfig()
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")

    known = {f.name for f in fields(DetectionConfig)}
    det_raw = raw.get("detection", {})
    unknown = set(det_raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown detection keys: {', '.join(sorted(unknown))}")
    try:
        return ToolConfig(
            detection=DetectionConfig(**det_raw),
            sampling_rate=float(raw.get("sampling_rate", 1.0)),
            wait_threshold_us=float(raw.get("wait_threshold_us", 0.0)),
            paths=dict(raw.get("paths", {})),
        )
    except TypeError as e:
        raise ConfigError(f"{path}: {e}")
