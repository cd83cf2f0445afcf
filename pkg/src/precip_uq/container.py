"""Versioned binary model files: named numpy arrays plus a JSON header."""

from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1


def dump(path, kind: str, header: dict, arrays: dict[str, np.ndarray]) -> None:
    meta = {"format_version": FORMAT_VERSION, "kind": kind, **header}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=blob, **arrays)


def load(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__header__"].tobytes().decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model file version {meta.get('format_version')!r}")
    if meta.get("kind") != kind:
        raise ValueError(f"expected a {kind!r} model file, got {meta.get('kind')!r}")
    return meta, arrays
