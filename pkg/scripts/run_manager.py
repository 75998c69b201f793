"""
Run Manager - Organizes analysis runs
Creates one folder per pipeline run with artifacts, metadata and logs
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
CONSOLE_FORMAT = '%(levelname)s - %(message)s'

SUBDIRS = ("psg", "profiles", "ppg", "reports", "logs")


def setup_logging(log_file: Optional[Union[str, Path]] = None, verbose: bool = False) -> logging.Logger:
    """
    Configure the root logger: detailed file handler plus a terse console handler.

    Module loggers (`logging.getLogger(__name__)`) propagate here.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    if log_file is not None:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
        root.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    root.addHandler(console_handler)
    return root


class RunManager:
    """Manages pipeline runs with one folder per analysed sketch"""

    def __init__(self, name: Optional[str] = None, base_dir: Union[str, Path] = "runs", verbose: bool = False):
        """
        Create a new run or load the most recent one

        Args:
            name: identifier for the run, usually the sketch file stem
            base_dir: base directory for all runs
        """
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)

        if name:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            self.run_name = f"{name}_{timestamp}"
            self.run_dir = self.base_dir / self.run_name
            self.run_dir.mkdir(exist_ok=True)
            self._load_directories()
            for dir_path in self.dirs.values():
                dir_path.mkdir(exist_ok=True)
            self._setup_logging(verbose)
            self._save_metadata(name)
            self.logger.info(f"Created new run: {self.run_name}")
        else:
            runs = sorted([d for d in self.base_dir.iterdir() if d.is_dir()],
                          key=lambda x: x.stat().st_mtime, reverse=True)
            if not runs:
                raise ValueError("No existing runs found. Please specify a name to create a new run.")
            self.run_dir = runs[0]
            self.run_name = self.run_dir.name
            self._load_directories()
            self._setup_logging(verbose)
            self.logger.info(f"Loaded existing run: {self.run_name}")

    def _setup_logging(self, verbose: bool):
        log_file = self.logs_dir / f"run_{datetime.now().strftime('%Y%m%d')}.log"
        setup_logging(log_file, verbose)
        self.logger = logging.getLogger(f"ScalingLoss_{self.run_name}")

    def _load_directories(self):
        self.dirs: Dict[str, Path] = {name: self.run_dir / name for name in SUBDIRS}
        self.logs_dir = self.dirs["logs"]

    @property
    def metadata_file(self) -> Path:
        return self.run_dir / "run_metadata.json"

    def _save_metadata(self, name: str):
        metadata = {
            "name": name,
            "run_name": self.run_name,
            "created_at": datetime.now().isoformat(),
            "run_dir": str(self.run_dir),
            "status": "active",
        }
        with open(self.metadata_file, 'w') as f:
            json.dump(metadata, f, indent=2)

    def path(self, kind: str, filename: str) -> Path:
        """Artifact path inside one of the run's subdirectories (psg, profiles, ppg, reports)."""
        if kind not in self.dirs:
            raise ValueError(f"unknown artifact directory {kind!r}")
        return self.dirs[kind] / filename

    def update_status(self, status: str, stats: Optional[Dict] = None):
        """Update run status and statistics"""
        with open(self.metadata_file, 'r') as f:
            metadata = json.load(f)

        metadata["status"] = status
        metadata["updated_at"] = datetime.now().isoformat()
        if stats:
            metadata["stats"] = stats

        with open(self.metadata_file, 'w') as f:
            json.dump(metadata, f, indent=2)
        self.logger.info(f"Updated run status to: {status}")

    def get_summary(self) -> Dict:
        metadata = {}
        if self.metadata_file.exists():
            with open(self.metadata_file, 'r') as f:
                metadata = json.load(f)
        return {
            "run_name": self.run_name,
            "run_dir": str(self.run_dir),
            "metadata": metadata,
            "counts": {
                "profiles": len(list(self.dirs["profiles"].glob("*.jsonl"))),
                "reports": len(list(self.dirs["reports"].glob("*"))),
            },
        }

    @staticmethod
    def list_all_runs(base_dir: Union[str, Path] = "runs") -> List[Dict]:
        """List all available runs, newest first"""
        base_path = Path(base_dir)
        if not base_path.exists():
            return []

        runs = []
        for run_dir in sorted(base_path.iterdir(), key=lambda x: x.stat().st_mtime, reverse=True):
            metadata_file = run_dir / "run_metadata.json"
            if run_dir.is_dir() and metadata_file.exists():
                with open(metadata_file, 'r') as f:
                    metadata = json.load(f)
                runs.append({
                    "run_name": run_dir.name,
                    "name": metadata.get("name", "unknown"),
                    "created_at": metadata.get("created_at", "unknown"),
                    "status": metadata.get("status", "unknown"),
                })
        return runs
