"""Checkpoint serialization: parameter arrays in ``.npz`` plus a JSON meta blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import Sequential

__all__ = ["save_checkpoint", "load_checkpoint", "save_sequential", "load_sequential"]

_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float arrays and a JSON-serializable ``meta`` dict to ``path``."""
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    payload = {name: np.asarray(arr) for name, arr in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back ``(arrays, meta)`` as written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data[_META_KEY]))
        arrays = {name: data[name].copy() for name in data.files if name != _META_KEY}
    return arrays, meta


def save_sequential(path: str | Path, net: Sequential, extra_meta: dict | None = None) -> None:
    meta = {"layers": net.spec()}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, net.named_params(), meta)


def load_sequential(path: str | Path) -> tuple[Sequential, dict]:
    arrays, meta = load_checkpoint(path)
    net = Sequential.from_spec(meta["layers"])
    net.load_params(arrays)
    return net, meta
