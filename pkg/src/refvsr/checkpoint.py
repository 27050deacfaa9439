"""Self-describing checkpoints.

The container is an ``.npz`` archive: its member index names every tensor
(``model/...``, ``optim/...``) and a ``__meta__`` member holds a JSON block
with the format version, stage, step, run config and RNG state.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(path, model_state: dict, meta: dict, optim_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": np.asarray(v) for k, v in model_state.items()}
    for k, v in (optim_state or {}).items():
        arrays[f"optim/{k}"] = np.asarray(v)
    block = dict(meta, version=FORMAT_VERSION)
    arrays[META_KEY] = np.frombuffer(json.dumps(block, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    """Return ``(model_state, optim_state, meta)``."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"checkpoint {path} does not exist")
    if not zipfile.is_zipfile(path):
        raise ValueError(f"unreadable checkpoint {path}: not an npz archive")
    try:
        with np.load(path, allow_pickle=False) as z:
            if META_KEY not in z.files:
                raise ValueError(f"{path} has no metadata block")
            meta = json.loads(z[META_KEY].tobytes().decode())
            model = {k[6:]: z[k] for k in z.files if k.startswith("model/")}
            optim = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return model, optim, meta
