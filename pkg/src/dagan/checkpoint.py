"""Single-file archive of named tensors plus a JSON header.

Layout: a numpy ``.npz`` (zip) archive. Each tensor is stored under
``<section>/<name>`` as a little-endian ``.npy`` member, which records dtype
and shape alongside the raw values; the header is UTF-8 JSON under
``__header__``. Loading returns exactly the stored bytes.
"""

from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

HEADER_KEY = "__header__"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and np.little_endian is False):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_archive(path, sections: Mapping[str, Mapping[str, np.ndarray]], header: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    members = {}
    for section, tensors in sections.items():
        for name, arr in tensors.items():
            members[f"{section}/{name}"] = _little_endian(arr)
    head = dict(header)
    head.setdefault("format_version", FORMAT_VERSION)
    members[HEADER_KEY] = np.frombuffer(json.dumps(head, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **members)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_archive(path) -> Tuple[dict, Dict[str, Dict[str, np.ndarray]]]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            if HEADER_KEY not in data.files:
                raise CheckpointError(f"{path} has no header; not a checkpoint archive")
            header = json.loads(bytes(data[HEADER_KEY]).decode("utf-8"))
            sections: Dict[str, Dict[str, np.ndarray]] = {}
            for key in data.files:
                if key == HEADER_KEY:
                    continue
                section, _, name = key.partition("/")
                sections.setdefault(section, {})[name] = data[key]
    except (OSError, EOFError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return header, sections
