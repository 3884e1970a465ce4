"""Output helpers: CSV text with a metadata header and atomic file writes."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

from . import __version__


def metadata_lines(meta: dict) -> str:
    """``# key: value`` lines; always names the artifact version first."""
    items = {"artifact": f"mavdesign {__version__}", **meta}
    return "".join(f"# {k}: {v}\n" for k, v in items.items())


def csv_text(columns, rows, meta: dict | None = None) -> str:
    buf = io.StringIO()
    if meta is not None:
        buf.write(metadata_lines(meta))
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    wr.writerows(rows)
    return buf.getvalue()


def read_csv(text: str) -> tuple[dict, list[dict]]:
    """Inverse of :func:`csv_text`: metadata dict and row dicts (strings)."""
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# ") and not body:
            key, _, val = line[2:].partition(": ")
            meta[key] = val
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
