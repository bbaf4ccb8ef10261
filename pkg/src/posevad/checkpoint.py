"""Versioned checkpoint container.

A checkpoint is a zip archive holding ``meta.json`` and one ``.npy`` member per
parameter array. Member timestamps are pinned so identical models produce
identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np

from .data import atomic_write_bytes

CHECKPOINT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def dumps(kind: str, arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        header = {"format": "posevad-checkpoint", "version": CHECKPOINT_VERSION,
                  "kind": kind, "arrays": sorted(arrays), "meta": meta}
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(header, indent=2, sort_keys=True))
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.lib.format.write_array(arr_buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, arr_buf.getvalue())
    return buf.getvalue()


def save(path: str | os.PathLike, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write_bytes(path, dumps(kind, arrays, meta))


def load(path: str | os.PathLike, expect_kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; raises :class:`CheckpointError` on a bad file."""
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("format") != "posevad-checkpoint":
                raise CheckpointError(f"{path}: not a posevad checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            if expect_kind is not None and header["kind"] != expect_kind:
                raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, found {header['kind']}")
            arrays = {}
            for name in header["arrays"]:
                with zf.open(f"{name}.npy") as fh:
                    arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    meta = dict(header["meta"])
    meta["kind"] = header["kind"]
    return arrays, meta
