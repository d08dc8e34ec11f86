"""Small filesystem helpers."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from .errors import IOFailure


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` via a sibling temp file and ``os.replace``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from exc
