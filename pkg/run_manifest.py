"""
run_manifest.py
===============
The manifest every CLI command writes next to its outputs. It has two halves:

  run         everything needed to reproduce the command (resolved config,
              input paths, seeds, scale, outcome). Identical for identical
              runs, byte for byte.
  provenance  when and with which tool version the run happened, and how long
              it took. Differs between otherwise identical runs.

numpy scalars/arrays and paths found anywhere in the manifest are converted to
plain JSON values on the way out.
"""

import json
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, TypedDict

import numpy as np

EMPMR_VERSION = "1.0.0"
MANIFEST_FORMAT = "empmr-manifest"


class RunSection(TypedDict):
    command: str
    config: Dict[str, Any]
    inputs: List[str]
    seeds: Dict[str, Any]
    outcome: Dict[str, Any]


class ProvenanceSection(TypedDict):
    tool_version: str
    started_at: str
    finished_at: str
    wall_time_s: float


class RunManifest(TypedDict):
    format: str
    run: RunSection
    provenance: ProvenanceSection


def _to_plain(obj):
    """Recursively convert numpy and pathlib values into JSON-native ones."""
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(item) for item in obj]
    if isinstance(obj, np.ndarray):
        return _to_plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


class ManifestClock:
    """Captures start time on creation; `provenance()` stamps the end."""

    def __init__(self):
        self.started_at = datetime.now(timezone.utc).isoformat()
        self._t0 = time.perf_counter()

    def provenance(self) -> ProvenanceSection:
        return ProvenanceSection(
            tool_version=EMPMR_VERSION,
            started_at=self.started_at,
            finished_at=datetime.now(timezone.utc).isoformat(),
            wall_time_s=time.perf_counter() - self._t0,
        )


def build_manifest(command: str, config: Dict[str, Any], inputs: List[str], seeds: Dict[str, Any],
                   outcome: Dict[str, Any], clock: ManifestClock) -> RunManifest:
    run = RunSection(command=command, config=_to_plain(config), inputs=[str(p) for p in inputs],
                     seeds=_to_plain(seeds), outcome=_to_plain(outcome))
    return RunManifest(format=MANIFEST_FORMAT, run=run, provenance=clock.provenance())


def dump_run_section(manifest: RunManifest) -> str:
    """Canonical text of the reproducible half, suitable for equality checks."""
    return json.dumps(manifest["run"], indent=2, sort_keys=True)


def write_manifest(manifest: RunManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_to_plain(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
