"""Named-array containers on disk.

Every weight, adapter and checkpoint file is a ``.npz`` archive: one ``.npy``
member per named array plus a ``__meta__`` member holding a JSON document as a
0-d unicode array. Members are written in sorted name order with a fixed zip
timestamp, so equal contents give byte-identical files. Files load with
``np.load(path, allow_pickle=False)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

META_KEY = "__meta__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_container(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = {name: np.asarray(arr, order="C") for name, arr in arrays.items()}
    if META_KEY in members:
        raise ValueError(f"{META_KEY!r} is reserved")
    members[META_KEY] = np.array(json.dumps(dict(meta or {}), sort_keys=True))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, members[name], allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as npz:
        arrays = {name: npz[name] for name in npz.files}
    meta = json.loads(str(arrays.pop(META_KEY))) if META_KEY in arrays else {}
    return arrays, meta


def fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
