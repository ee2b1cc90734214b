"""Record-oriented persistent key-value store with crash-safe recovery.

One append-only log file per namespace plus an optional snapshot written by
compaction. Every write is framed, checksummed, and flushed before being
acknowledged; opening a store replays snapshot then log, truncating a torn
or corrupt log tail to the last valid frame. Values are opaque bytes; the
schemas live with the modules that own each namespace.

Frame layout (little-endian), identical in logs and snapshots:

    length(u32) | crc32(u32) | version(u64) | key_len(u16) | key | value

``length`` counts the bytes after the crc field; ``crc32`` covers those same
bytes.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

_logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<II")  # length, crc32
_META = struct.Struct("<QH")  # version, key_len


class Namespace(str, Enum):
    EVENTS = "events"
    RATINGS = "ratings"
    USER_VEC = "user_vec"
    ITEM_VEC = "item_vec"
    CONTENT_MODEL = "content_model"
    ARTICLE = "article"
    POPULARITY = "popularity"
    CHECKPOINT = "checkpoint"


class StoreError(Exception):
    pass


class SnapshotCorruptionError(StoreError):
    """A snapshot file failed validation; snapshots are written atomically,
    so this indicates external damage rather than a crash."""


@dataclass
class RecoveryReport:
    """What recovery found per namespace: frames kept, bytes truncated."""

    frames: dict[str, int] = field(default_factory=dict)
    truncated_bytes: dict[str, int] = field(default_factory=dict)

    @property
    def any_truncation(self) -> bool:
        return any(self.truncated_bytes.values())


def _encode_frame(version: int, key: bytes, value: bytes) -> bytes:
    payload = _META.pack(version, len(key)) + key + value
    return _HEADER.pack(len(payload), zlib.crc32(payload)) + payload


def _decode_frames(raw: bytes):
    """Yield (offset_after, version, key, value); stop at the first bad frame."""
    pos = 0
    n = len(raw)
    while pos + _HEADER.size <= n:
        length, crc = _HEADER.unpack_from(raw, pos)
        start = pos + _HEADER.size
        end = start + length
        if length < _META.size or end > n:
            return
        payload = raw[start:end]
        if zlib.crc32(payload) != crc:
            return
        version, key_len = _META.unpack_from(payload, 0)
        if _META.size + key_len > length:
            return
        key = payload[_META.size : _META.size + key_len]
        value = payload[_META.size + key_len :]
        pos = end
        yield pos, version, key, value


def _as_key(key: bytes | str) -> bytes:
    return key.encode("utf-8") if isinstance(key, str) else key


class Store:
    """Durable namespaced key-value records with per-key versions.

    ``sync=True`` (the default) fsyncs every put before acknowledging it;
    ``sync=False`` still flushes to the OS (surviving a process kill) but
    not necessarily a power failure.
    """

    def __init__(self, path: str | Path, sync: bool = True):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.sync = sync
        self._lock = threading.Lock()
        self._data: dict[Namespace, dict[bytes, tuple[int, bytes]]] = {
            ns: {} for ns in Namespace
        }
        self._files: dict[Namespace, object] = {}
        self.recovery = RecoveryReport()
        for ns in Namespace:
            self._recover_namespace(ns)
            self._files[ns] = open(self._log_path(ns), "ab")

    def _log_path(self, ns: Namespace) -> Path:
        return self.path / f"{ns.value}.log"

    def _snap_path(self, ns: Namespace) -> Path:
        return self.path / f"{ns.value}.snap"

    def _recover_namespace(self, ns: Namespace) -> None:
        table = self._data[ns]
        snap = self._snap_path(ns)
        if snap.exists():
            raw = snap.read_bytes()
            end = 0
            for pos, version, key, value in _decode_frames(raw):
                table[key] = (version, value)
                end = pos
            if end != len(raw):
                raise SnapshotCorruptionError(
                    f"snapshot {snap} invalid after {end} of {len(raw)} bytes"
                )
        log = self._log_path(ns)
        if log.exists():
            raw = log.read_bytes()
            frames = 0
            end = 0
            for pos, version, key, value in _decode_frames(raw):
                table[key] = (version, value)
                end = pos
                frames += 1
            self.recovery.frames[ns.value] = frames
            if end != len(raw):
                dropped = len(raw) - end
                self.recovery.truncated_bytes[ns.value] = dropped
                _logger.warning(
                    "truncating %d invalid trailing bytes from %s", dropped, log
                )
                with open(log, "r+b") as fh:
                    fh.truncate(end)

    def put(self, ns: Namespace, key: bytes | str, value: bytes) -> int:
        """Append the record and return its new version; durable on return."""
        kb = _as_key(key)
        with self._lock:
            fh = self._files[ns]
            old = self._data[ns].get(kb)
            version = (old[0] if old else 0) + 1
            fh.write(_encode_frame(version, kb, value))
            fh.flush()
            if self.sync:
                os.fsync(fh.fileno())
            self._data[ns][kb] = (version, value)
            return version

    def get(self, ns: Namespace, key: bytes | str) -> bytes | None:
        with self._lock:
            rec = self._data[ns].get(_as_key(key))
            return rec[1] if rec else None

    def version(self, ns: Namespace, key: bytes | str) -> int | None:
        with self._lock:
            rec = self._data[ns].get(_as_key(key))
            return rec[0] if rec else None

    def scan(self, ns: Namespace, key_prefix: bytes | str = b"") -> list[tuple[bytes, bytes]]:
        """All (key, value) pairs under the prefix, in key order, from one
        consistent snapshot."""
        prefix = _as_key(key_prefix)
        with self._lock:
            return sorted(
                (k, v) for k, (_, v) in self._data[ns].items() if k.startswith(prefix)
            )

    def count(self, ns: Namespace) -> int:
        with self._lock:
            return len(self._data[ns])

    def compact(self) -> None:
        """Fold each namespace's log into a snapshot, preserving versions."""
        with self._lock:
            for ns in Namespace:
                tmp = self._snap_path(ns).with_suffix(".snap.tmp")
                with open(tmp, "wb") as fh:
                    for key in sorted(self._data[ns]):
                        version, value = self._data[ns][key]
                        fh.write(_encode_frame(version, key, value))
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self._snap_path(ns))
                fh = self._files[ns]
                fh.truncate(0)
                fh.flush()
                if self.sync:
                    os.fsync(fh.fileno())

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                try:
                    fh.flush()
                    fh.close()
                except ValueError:
                    pass

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
