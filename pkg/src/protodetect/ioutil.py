"""Atomic file writes shared by the binary and JSON writers."""

from __future__ import annotations

import os
import tempfile


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partials."""
    target = os.fspath(path)
    directory = os.path.dirname(target) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(target) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
