"""Run manifests: every CLI command records its resolved configuration,
seed, input digests, and timestamps next to its artifacts.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Written before a command runs and finalized after it ends."""

    def __init__(self, path: str | Path, command: str, config: dict, seed: int | None,
                 inputs: dict[str, str | Path] | None = None):
        self.path = Path(path)
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "tool_version": __version__,
            "inputs": {
                name: {"path": str(p), "sha256": file_digest(p)}
                for name, p in (inputs or {}).items()
            },
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "status": "running",
        }
        self._write()

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok", outputs: dict[str, str | Path] | None = None) -> None:
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["status"] = status
        if outputs:
            self.data["outputs"] = {
                name: {"path": str(p), "sha256": file_digest(p)}
                for name, p in outputs.items()
            }
        self._write()
