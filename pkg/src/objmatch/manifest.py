"""Run manifests: what a subcommand read, wrote, and with which settings.

Every output directory holds one ``manifest.json`` with one entry per output
written into it (``"."`` for a whole-directory output such as a demo run,
``"scenes:<domain>"`` for a scene set, so both domains can share a directory).
Wall-clock time is recorded but is the only field allowed to differ between
two identical runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from objmatch import __version__

MANIFEST_FILE = "manifest.json"
VOLATILE_FIELDS = ("wall_clock_seconds",)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as src:
        for block in iter(lambda: src.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def hash_tree(root: str | Path, prefix: str = "") -> dict[str, str]:
    """sha256 of every file below ``root`` except manifests, keyed by relative path."""
    root = Path(root)
    if root.is_file():
        return {prefix or root.name: sha256_file(root)}
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_FILE):
        out[prefix + path.relative_to(root).as_posix()] = sha256_file(path)
    return out


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    tool_version: str = __version__

    def to_json(self) -> dict:
        return asdict(self)

    def stable(self) -> dict:
        doc = self.to_json()
        for key in VOLATILE_FIELDS:
            doc.pop(key, None)
        return doc


def write_manifest(directory: str | Path, entry: str, manifest: RunManifest) -> Path:
    """Insert or replace ``entry`` in ``directory/manifest.json``."""
    path = Path(directory) / MANIFEST_FILE
    doc = json.loads(path.read_text()) if path.is_file() else {"entries": {}}
    doc["entries"][entry] = manifest.to_json()
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(directory: str | Path, entry: str) -> dict | None:
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        return None
    return json.loads(path.read_text())["entries"].get(entry)
