"""Append-only, length-prefixed journal.

Each frame is ``>I length``, ``>I crc32(payload)``, then ``payload`` (canonical
JSON with a ``"t"`` tag). A torn or corrupt tail left by a crash is detected
through the length/CRC pair and truncated on open. This byte layout is the one
on-disk format that must stay stable across versions.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Iterator

from .model import canonical_json

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">II")


class Journal:
    def __init__(self, path: str | Path | None, durable: bool = False):
        """``path=None`` keeps records in memory only; ``durable`` fsyncs every append."""
        self.path = Path(path) if path is not None else None
        self.durable = durable
        self._lock = threading.Lock()
        self._memory: list[dict] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._truncate_torn_tail()
            self._fh = open(self.path, "ab")

    def _scan(self) -> Iterator[tuple[int, dict]]:
        with open(self.path, "rb") as fh:
            data = fh.read()
        offset = 0
        while offset + HEADER.size <= len(data):
            length, crc = HEADER.unpack_from(data, offset)
            start = offset + HEADER.size
            payload = data[start:start + length]
            if len(payload) < length or zlib.crc32(payload) != crc:
                break
            yield start + length, json.loads(payload)
            offset = start + length

    def _truncate_torn_tail(self) -> None:
        if not self.path.exists():
            return
        end = 0
        for end, _ in self._scan():
            pass
        size = self.path.stat().st_size
        if end < size:
            logger.warning("journal %s: dropping %d torn trailing bytes", self.path, size - end)
            with open(self.path, "r+b") as fh:
                fh.truncate(end)

    def append(self, record: dict) -> None:
        payload = canonical_json(record)
        with self._lock:
            if self.path is None:
                self._memory.append(json.loads(payload))
                return
            if self._fh is None:
                raise ValueError(f"journal {self.path} is closed")
            self._fh.write(HEADER.pack(len(payload), zlib.crc32(payload)) + payload)
            self._fh.flush()
            if self.durable:
                os.fsync(self._fh.fileno())

    def records(self) -> Iterator[dict]:
        with self._lock:
            if self.path is None:
                return iter(list(self._memory))
            if self._fh is not None:
                self._fh.flush()
        return (record for _, record in self._scan())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
