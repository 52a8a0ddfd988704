"""Run manifests: which command produced which artifact, under which config.

Each output directory carries one manifest.json. Commands append an
entry per invocation with the config hash, master seed, and the hashes
of every artifact they wrote. Verification re-hashes everything and
checks that each file in the directory belongs to exactly one entry.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError
from .validation import atomic_write_text

MANIFEST_NAME = "manifest.json"
TOOL_VERSION = "0.1.0"


def config_hash(blob) -> str:
    """sha256 over canonical (sorted-key, compact) JSON."""
    canon = json.dumps(blob, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ManifestEntry:
    command: str
    config_hash: str
    master_seed: int
    artifacts: dict[str, str]          # relative path -> sha256
    warnings: list[str] = field(default_factory=list)
    timestamp: float = 0.0

    def to_jsonable(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash,
                "master_seed": self.master_seed, "artifacts": self.artifacts,
                "warnings": list(self.warnings), "timestamp": self.timestamp}

    @classmethod
    def from_jsonable(cls, blob: dict) -> "ManifestEntry":
        return cls(command=blob["command"], config_hash=blob["config_hash"],
                   master_seed=int(blob["master_seed"]),
                   artifacts=dict(blob["artifacts"]),
                   warnings=list(blob.get("warnings", [])),
                   timestamp=float(blob.get("timestamp", 0.0)))


@dataclass
class RunManifest:
    """All provenance entries for one output directory."""

    root: Path
    tool_version: str = TOOL_VERSION
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return Path(self.root) / MANIFEST_NAME

    @classmethod
    def load_or_create(cls, root) -> "RunManifest":
        root = Path(root)
        mpath = root / MANIFEST_NAME
        if not mpath.exists():
            return cls(root=root)
        blob = json.loads(mpath.read_text())
        man = cls(root=root, tool_version=blob.get("tool_version", TOOL_VERSION))
        man.entries = [ManifestEntry.from_jsonable(e) for e in blob.get("entries", [])]
        return man

    def record(self, command: str, config_blob, master_seed: int,
               artifact_paths, warnings=()) -> ManifestEntry:
        """Hash the artifacts and append one entry; saves the manifest."""
        artifacts = {}
        for p in artifact_paths:
            p = Path(p)
            try:
                rel = str(p.relative_to(self.root))
            except ValueError:
                raise ContractError(f"artifact {p} lies outside manifest root {self.root}")
            if not p.exists():
                raise ContractError(f"artifact {p} does not exist")
            artifacts[rel] = file_hash(p)
        entry = ManifestEntry(command=command, config_hash=config_hash(config_blob),
                              master_seed=int(master_seed), artifacts=artifacts,
                              warnings=list(warnings), timestamp=time.time())
        # an artifact belongs to exactly one entry: re-recording a path
        # (e.g. --force rerun) supersedes the old owner
        for old in self.entries:
            for rel in artifacts:
                old.artifacts.pop(rel, None)
        self.entries = [e for e in self.entries if e.artifacts]
        self.entries.append(entry)
        self.save()
        return entry

    def save(self) -> None:
        blob = {"tool_version": self.tool_version,
                "entries": [e.to_jsonable() for e in self.entries]}
        atomic_write_text(self.path, json.dumps(blob, indent=2, sort_keys=True) + "\n")

    def verify(self) -> list[str]:
        """Re-hash recorded artifacts and check ownership of directory files.

        Returns a list of problems; empty means the directory is clean.
        """
        problems = []
        owners: dict[str, int] = {}
        for i, entry in enumerate(self.entries):
            for rel, digest in entry.artifacts.items():
                owners[rel] = owners.get(rel, 0) + 1
                p = Path(self.root) / rel
                if not p.exists():
                    problems.append(f"missing artifact {rel} (entry {i}, {entry.command})")
                    continue
                if file_hash(p) != digest:
                    problems.append(f"hash mismatch for {rel} (entry {i}, {entry.command})")
        for rel, n in owners.items():
            if n > 1:
                problems.append(f"artifact {rel} owned by {n} entries")
        for p in sorted(Path(self.root).rglob("*")):
            if p.is_dir() or p.name == MANIFEST_NAME:
                continue
            rel = str(p.relative_to(self.root))
            if rel not in owners:
                problems.append(f"untracked file {rel}")
        return problems
