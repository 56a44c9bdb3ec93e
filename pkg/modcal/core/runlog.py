"""
Run directories: one write-once directory per pipeline stage under a run root.
"""

import json
import logging
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional

from modcal.core.errors import LoadError, StateError

logger = logging.getLogger(__name__)

COMPLETE_MARKER = "COMPLETE"
CONFIG_SNAPSHOT = "config.cfg"
METRICS_FILE = "metrics.jsonl"
REPORT_FILE = "report.json"

# stage name -> (directory, artifact that proves it finished, command that produces it)
STAGES = {
    "data": ("data", "train/manifest.jsonl", "gen-data"),
    "source": ("source", "detector.mckp", "train-source"),
    "inversion": ("inversion", "corpus/provenance.jsonl", "invert"),
    "fsr": ("fsr", "reconstructor.mckp", "pretrain-fsr"),
}


class MetricsLog:
    """Line-oriented JSON records, appended one per log interval."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: Mapping[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(dict(record), sort_keys=True) + "\n")

    def __call__(self, record: Mapping[str, Any]) -> None:
        self.append(record)

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        records = []
        with open(self.path, "r", encoding="utf-8") as f:
            for index, line in enumerate(f):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise LoadError(f"corrupt metrics line: {e}", record=index)
        return records


class RunDirectory:
    """A stage output directory. Finished directories carry a COMPLETE marker and are not rewritten."""

    def __init__(self, path):
        self.path = Path(path)

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    @property
    def is_complete(self) -> bool:
        return (self.path / COMPLETE_MARKER).exists()

    def create(self, overwrite: bool = False) -> "RunDirectory":
        if self.is_complete:
            if not overwrite:
                raise StateError(f"{self.path} already holds a completed run (use --overwrite)")
            shutil.rmtree(self.path)
        elif self.path.exists():
            # leftovers of an interrupted run
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True)
        return self

    def mark_complete(self) -> None:
        stamp = datetime.now(timezone.utc).isoformat()
        (self.path / COMPLETE_MARKER).write_text(stamp + "\n", encoding="utf-8")

    @property
    def metrics(self) -> MetricsLog:
        return MetricsLog(self.path / METRICS_FILE)

    def save_config(self, config) -> None:
        config.save(self.path / CONFIG_SNAPSHOT)

    def write_report(self, report: Mapping[str, Any]) -> None:
        (self.path / REPORT_FILE).write_text(json.dumps(dict(report), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")

    def read_report(self) -> Dict[str, Any]:
        path = self.path / REPORT_FILE
        if not path.exists():
            raise StateError(f"no report in {self.path}")
        return json.loads(path.read_text(encoding="utf-8"))


class RunLayout:
    """Where every stage lives under a run root."""

    def __init__(self, root):
        self.root = Path(root)

    def stage(self, name: str) -> RunDirectory:
        return RunDirectory(self.root / STAGES[name][0])

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    def target(self, name: str) -> RunDirectory:
        return RunDirectory(self.root / "targets" / name)

    def targets(self) -> Iterator[RunDirectory]:
        base = self.root / "targets"
        if base.exists():
            for path in sorted(p for p in base.iterdir() if p.is_dir()):
                yield RunDirectory(path)

    @property
    def ablation(self) -> RunDirectory:
        return RunDirectory(self.root / "ablation")

    @property
    def cache(self) -> Path:
        return self.root / "cache" / "semantics"

    def figures(self, name: Optional[str] = None) -> Path:
        return self.root / "figures" / (name or "")

    def require(self, name: str) -> Path:
        """Path of a finished stage's artifact, or a StateError naming the command to run."""
        directory, artifact, command = STAGES[name]
        path = self.root / directory / artifact
        if not path.exists():
            raise StateError(f"missing {name} stage: {path} not found; run 'modcal {command}' first")
        return path
