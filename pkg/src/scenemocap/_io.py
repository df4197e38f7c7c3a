"""Small file helpers shared by the writers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


_FILE_MODE = 0o666 & ~_umask()


def atomic_write_bytes(path, data):
    """Write ``data`` to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, _FILE_MODE)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path):
    return json.loads(Path(path).read_text())


def check_version(doc, expected, what):
    """Raise ValueError unless ``doc["version"]`` has the same major number as ``expected``."""
    got = str(doc.get("version", "")) if isinstance(doc, dict) else ""
    if got.split(".")[0] != expected.split(".")[0]:
        raise ValueError(f"unsupported {what} version {got!r} (expected {expected})")
