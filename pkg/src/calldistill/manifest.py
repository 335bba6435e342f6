"""Run manifests and atomic output writing.

Every pipeline stage records what it read and wrote, with content checksums,
into ``manifest_<stage>.json`` under the output directory. In deterministic
mode wall-clock fields are nulled so two runs with the same inputs produce
byte-identical manifests. Paths inside the manifest are relative to the
output directory, which makes whole output trees comparable by checksum.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LOCK_NAME = ".lock"

_CHUNK = 1 << 20


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(_CHUNK)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json_atomic(path: str | Path, payload: Any) -> None:
    """Serialize deterministically and replace the target in one step."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    os.replace(tmp, path)


def write_text_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class OutputLock:
    """Exclusive per-directory lock guarding concurrent stage runs.

    Created with O_EXCL so a second process fails instead of corrupting
    half-written outputs. Stale locks must be removed by hand; the error
    message names the file.
    """

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / LOCK_NAME
        self._fd: int | None = None

    def __enter__(self) -> "OutputLock":
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run; remove {self.path} "
                "if no other process is active"
            ) from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


@dataclass
class ManifestBuilder:
    """Accumulates stage inputs/outputs and writes the manifest file."""

    stage: str
    out_dir: Path
    deterministic: bool = True
    config_snapshot: dict | None = None
    inputs: dict[str, dict] = field(default_factory=dict)
    outputs: dict[str, dict] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    _started: float = field(default_factory=time.monotonic, repr=False)

    def _rel(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return path.as_posix()

    def add_input(self, name: str, path: str | Path) -> None:
        p = Path(path)
        self.inputs[name] = {
            "path": self._rel(p),
            "sha256": sha256_file(p),
            "bytes": p.stat().st_size,
        }

    def add_output(self, name: str, path: str | Path) -> None:
        p = Path(path)
        self.outputs[name] = {
            "path": self._rel(p),
            "sha256": sha256_file(p),
            "bytes": p.stat().st_size,
        }

    def note(self, key: str, value: Any) -> None:
        self.extra[key] = value

    def write(self) -> Path:
        elapsed = None if self.deterministic else round(time.monotonic() - self._started, 3)
        created = None if self.deterministic else time.strftime(
            "%Y-%m-%dT%H:%M:%S%z", time.localtime()
        )
        payload = {
            "manifest_version": MANIFEST_VERSION,
            "stage": self.stage,
            "deterministic": self.deterministic,
            "created_at": created,
            "elapsed_seconds": elapsed,
            "config": self.config_snapshot,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "extra": self.extra,
        }
        path = self.out_dir / f"manifest_{self.stage}.json"
        write_json_atomic(path, payload)
        logger.info("wrote manifest %s", path)
        return path


def tree_checksums(root: str | Path) -> dict[str, str]:
    """Checksum every regular file under ``root``, keyed by relative path."""
    root = Path(root)
    result: dict[str, str] = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != LOCK_NAME:
            result[path.relative_to(root).as_posix()] = sha256_file(path)
    return result
