"""Parameter checkpoints: a flat float64 blob plus a text manifest.

Layout for a checkpoint at ``PATH``:

``PATH``
    Raw little-endian float64 values of every array, concatenated in manifest
    order, no header and no padding.
``PATH.manifest``
    UTF-8 text. Line 1 is ``mvp-checkpoint 1``. Lines starting with ``#`` are
    metadata: ``# meta <json>`` carries a JSON object (run config, etc.).
    Every other line is ``name<TAB>shape<TAB>offset<TAB>nbytes`` where shape is
    comma-separated (empty for a scalar) and offset/nbytes are byte counts into
    ``PATH``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IOFailure, ParseError
from .util import atomic_write

MAGIC = "mvp-checkpoint 1"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    lines = [MAGIC]
    if meta is not None:
        lines.append("# meta " + json.dumps(meta, sort_keys=True))
    chunks = []
    offset = 0
    for name in sorted(arrays):
        if any(c in name for c in "\t\n"):
            raise ParseError(f"array name {name!r} contains a tab or newline")
        arr = np.asarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}\t{offset}\t{len(blob)}")
        chunks.append(blob)
        offset += len(blob)
    atomic_write(path, b"".join(chunks))
    atomic_write(Path(str(path) + ".manifest"), ("\n".join(lines) + "\n").encode())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = Path(str(path) + ".manifest")
    try:
        blob = path.read_bytes()
        text = manifest.read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ParseError(f"{manifest}: missing '{MAGIC}' header")
    meta: dict = {}
    arrays = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# meta "):
            meta = json.loads(line[len("# meta "):])
            continue
        if not line or line.startswith("#"):
            continue
        try:
            name, shape_s, off_s, n_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            off, n = int(off_s), int(n_s)
        except ValueError:
            raise ParseError(f"{manifest}:{lineno}: malformed entry") from None
        if off + n > len(blob) or n != 8 * int(np.prod(shape, dtype=np.int64)):
            raise ParseError(f"{manifest}:{lineno}: entry {name!r} out of bounds or size mismatch")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(shape)
    return arrays, meta


def checkpoint_files(path) -> list[str]:
    return [os.fspath(path), os.fspath(path) + ".manifest"]
