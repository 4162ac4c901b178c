"""File-backed storage: versioned documents and append-only streams.

Documents live at ``<root>/docs/<collection>/<key>.json`` with a version
header for optimistic concurrency; streams are line-delimited JSON files
at ``<root>/streams/<stream_key>.ndjson``. Keys may contain ``/`` which
scopes data per study on disk (e.g. ``sessions/<study>/<id>.json``,
``streams/events/<study>.ndjson``).

Durability contract: a write is fsynced before the call returns, so an
acknowledged put or append survives a hard kill. Document replacement is
atomic (write-temp, fsync, rename). Per-key writes serialize in process;
reads see prefix-consistent snapshots under concurrent appends.

Other backends can be swapped in by implementing the same five methods.
"""

from __future__ import annotations

import json
import os
import re
import threading
from pathlib import Path
from typing import Optional, Protocol

from .model import StudyKitError

COLLECTIONS = ("studies", "sessions", "responses", "admin_accounts", "credentials", "participants")

_KEY_RE = re.compile(r"^[A-Za-z0-9_.:@-]+(/[A-Za-z0-9_.:@-]+)*$")


class VersionConflict(StudyKitError):
    pass


class StorageFailure(StudyKitError):
    pass


class Storage(Protocol):
    def put(self, collection: str, key: str, value: dict, expected_version: int) -> int: ...

    def get(self, collection: str, key: str) -> Optional[tuple[dict, int]]: ...

    def delete(self, collection: str, key: str) -> None: ...

    def list_keys(self, collection: str, prefix: str = "") -> list[str]: ...

    def append(self, stream_key: str, record: dict) -> int: ...

    def scan(self, stream_key: str, from_offset: int = 0) -> list[tuple[int, dict]]: ...


def _check_key(key: str) -> str:
    if not _KEY_RE.match(key) or any(part in (".", "..") for part in key.split("/")):
        raise StorageFailure(f"invalid key {key!r}")
    return key


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class FileStorage:
    """Default storage backend over a local directory tree."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._stream_lengths: dict[str, int] = {}

    def _lock(self, name: str) -> threading.Lock:
        with self._locks_guard:
            if name not in self._locks:
                self._locks[name] = threading.Lock()
            return self._locks[name]

    def _doc_path(self, collection: str, key: str) -> Path:
        return self.root / "docs" / collection / (_check_key(key) + ".json")

    def _stream_path(self, stream_key: str) -> Path:
        return self.root / "streams" / (_check_key(stream_key) + ".ndjson")

    # -- documents ---------------------------------------------------------

    def put(self, collection: str, key: str, value: dict, expected_version: int) -> int:
        """Create (expected_version=0) or replace a document atomically.

        Raises VersionConflict when the stored version does not match.
        """
        path = self._doc_path(collection, key)
        with self._lock(f"doc:{collection}:{key}"):
            current = self._read_doc(path)
            current_version = current[1] if current else 0
            if current_version != expected_version:
                raise VersionConflict(
                    f"{collection}/{key}: expected version {expected_version}, stored {current_version}"
                )
            new_version = current_version + 1
            payload = json.dumps({"version": new_version, "value": value}, ensure_ascii=False)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".json.tmp")
            try:
                with open(tmp, "w", encoding="utf-8") as fh:
                    fh.write(payload)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, path)
                _fsync_dir(path.parent)
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            return new_version

    def _read_doc(self, path: Path) -> Optional[tuple[dict, int]]:
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        doc = json.loads(raw)
        return doc["value"], doc["version"]

    def get(self, collection: str, key: str) -> Optional[tuple[dict, int]]:
        return self._read_doc(self._doc_path(collection, key))

    def delete(self, collection: str, key: str) -> None:
        path = self._doc_path(collection, key)
        with self._lock(f"doc:{collection}:{key}"):
            try:
                path.unlink()
            except FileNotFoundError:
                pass
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc

    def list_keys(self, collection: str, prefix: str = "") -> list[str]:
        base = self.root / "docs" / collection
        if not base.is_dir():
            return []
        keys = []
        for path in base.rglob("*.json"):
            key = str(path.relative_to(base))[: -len(".json")]
            if key.startswith(prefix):
                keys.append(key)
        return sorted(keys)

    # -- streams -----------------------------------------------------------

    def append(self, stream_key: str, record: dict) -> int:
        """Append one record; returns its dense offset. Durable on return."""
        path = self._stream_path(stream_key)
        with self._lock(f"stream:{stream_key}"):
            offset = self._stream_length_locked(stream_key, path)
            line = json.dumps(record, ensure_ascii=False, separators=(",", ":"))
            path.parent.mkdir(parents=True, exist_ok=True)
            try:
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            self._stream_lengths[stream_key] = offset + 1
            return offset

    def _stream_length_locked(self, stream_key: str, path: Path) -> int:
        cached = self._stream_lengths.get(stream_key)
        if cached is not None:
            return cached
        self._repair_torn_tail(path)
        length = len(self._read_records(path))
        self._stream_lengths[stream_key] = length
        return length

    def _repair_torn_tail(self, path: Path) -> None:
        # A kill mid-append can leave a partial (never acknowledged) final
        # line; drop it so new appends start on a clean line.
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return
        if not data or data.endswith(b"\n"):
            return
        cut = data.rfind(b"\n") + 1
        with open(path, "r+b") as fh:
            fh.truncate(cut)
            fh.flush()
            os.fsync(fh.fileno())

    def _read_records(self, path: Path) -> list[dict]:
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        records = []
        for line in raw.split("\n"):
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                # A torn final line from a crash mid-write; everything
                # before it was acknowledged and stays readable.
                break
        return records

    def scan(self, stream_key: str, from_offset: int = 0) -> list[tuple[int, dict]]:
        """Records in offset order from ``from_offset``; unknown stream is
        empty. Concurrent appends may extend the file mid-read, so the
        result is truncated to a consistent prefix."""
        path = self._stream_path(stream_key)
        records = self._read_records(path)
        return [(i, record) for i, record in enumerate(records) if i >= from_offset]

    def list_streams(self, prefix: str = "") -> list[str]:
        base = self.root / "streams"
        if not base.is_dir():
            return []
        keys = []
        for path in base.rglob("*.ndjson"):
            key = str(path.relative_to(base))[: -len(".ndjson")]
            if key.startswith(prefix):
                keys.append(key)
        return sorted(keys)
