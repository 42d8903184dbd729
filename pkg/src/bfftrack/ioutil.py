"""Atomic file writes shared by dataset, checkpoint and report writers."""

from __future__ import annotations

import os
import tempfile


def atomic_write_bytes(path, data: bytes):
    """Write ``data`` to ``path`` via a temp file + rename in one directory."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
