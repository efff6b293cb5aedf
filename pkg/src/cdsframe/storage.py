"""Filesystem helpers: crash-atomic writes and per-key locks."""
from __future__ import annotations

import os
import re
import tempfile
import threading
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path

from .errors import InvalidArgument

FILE_ID_RE = re.compile(r"^[0-9a-f]{32}$")


def check_file_id(file_id: str) -> str:
    # file ids double as directory names, so the format is enforced strictly
    if not isinstance(file_id, str) or not FILE_ID_RE.match(file_id):
        raise InvalidArgument(f"malformed file_id {file_id!r}")
    return file_id


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class KeyedLocks:
    def __init__(self):
        self._guard = threading.Lock()
        self._locks = defaultdict(threading.RLock)

    @contextmanager
    def hold(self, key):
        with self._guard:
            lock = self._locks[key]
        with lock:
            yield


class _RWLock:
    """Many readers or one writer; waiting writers block new readers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class KeyedRWLocks:
    """Per-key reader/writer locks (not reentrant)."""

    def __init__(self):
        self._guard = threading.Lock()
        self._locks = defaultdict(_RWLock)

    def _get(self, key) -> _RWLock:
        with self._guard:
            return self._locks[key]

    def read(self, key):
        return self._get(key).read()

    def write(self, key):
        return self._get(key).write()
