"""Checkpoint archives: a zip of named parameter tensors plus a JSON header.

Layout inside the archive:

    header.json            {"version": 1, "kind": ..., "config": ..., "schedule": ...}
    tensors/<name>.npy     one array per state-dict entry

Writes are atomic (temp file in the target directory, then rename). Tensors
round-trip bit-exactly through numpy, so save -> load -> forward reproduces
the pre-save forward pass.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    schedule: dict | None
    state: dict  # name -> torch.Tensor
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_checkpoint(
    path,
    kind: str,
    config: dict,
    state_dict,
    schedule: dict | None = None,
    extra: dict | None = None,
):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "schedule": schedule,
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
                zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))
                for name, tensor in state_dict.items():
                    buf = io.BytesIO()
                    np.save(buf, tensor.detach().cpu().numpy())
                    zf.writestr(f"tensors/{name}.npy", buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if "header.json" not in names:
                raise DataError(f"{path}: not a checkpoint archive (no header.json)")
            header = json.loads(zf.read("header.json"))
            version = header.get("version")
            if version != FORMAT_VERSION:
                raise DataError(
                    f"{path}: checkpoint format version {version!r} not supported "
                    f"(expected {FORMAT_VERSION})"
                )
            state = {}
            for name in names:
                if not name.startswith("tensors/") or not name.endswith(".npy"):
                    continue
                arr = np.load(io.BytesIO(zf.read(name)))
                state[name[len("tensors/") : -len(".npy")]] = torch.from_numpy(arr)
    except zipfile.BadZipFile:
        raise DataError(f"{path}: not a checkpoint archive") from None
    return Checkpoint(
        kind=header.get("kind", ""),
        config=header.get("config", {}),
        schedule=header.get("schedule"),
        state=state,
        extra=header.get("extra", {}),
        version=version,
    )
