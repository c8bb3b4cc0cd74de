"""Binary checkpoint format.

Layout: the magic bytes ``LPT1``, an unsigned 64-bit little-endian header
length, a UTF-8 JSON header, then raw little-endian buffers. Parameters come
first, as float32 in store order (the header lists name, group and shape for
each); extra state buffers (optimizer moments, ensemble accumulators) follow
in the order the header lists them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ParameterStore

MAGIC = b"LPT1"
_DTYPES = {"f4": "<f4", "i8": "<i8"}


@dataclass
class Checkpoint:
    params: ParameterStore
    frozen_groups: list[int]
    state: dict = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, params: ParameterStore, frozen_groups=(), state: dict | None = None,
                    buffers: dict | None = None) -> None:
    buffers = buffers or {}
    header = {
        "model_config": params.config.to_dict(),
        "params": [{"name": n, "group": params.group_of(n), "shape": list(t.shape)}
                   for n, t in params.items()],
        "frozen_groups": sorted(int(g) for g in frozen_groups),
        "buffers": [],
        "state": state or {},
    }
    blobs = [t.data.astype("<f4").tobytes() for _, t in params.items()]
    for name, arr in buffers.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f4"
        header["buffers"].append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.astype(_DTYPES[code]).tobytes())
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not an LPT1 checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12: 12 + n].decode("utf-8"))
    offset = 12 + n
    params = ParameterStore(ModelConfig(**header["model_config"]))

    def take(shape, code):
        nonlocal offset
        dt = np.dtype(_DTYPES[code])
        count = int(np.prod(shape))
        end = offset + count * dt.itemsize
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw[offset:end], dtype=dt).reshape(shape)
        offset = end
        return arr

    for p in header["params"]:
        params.add(p["name"], p["group"], take(p["shape"], "f4"))
    buffers = {b["name"]: take(b["shape"], b["dtype"]).copy() for b in header["buffers"]}
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    frozen = set(header["frozen_groups"])
    for g in params.groups:
        params.set_trainable(g, g not in frozen)
    return Checkpoint(params, sorted(frozen), header["state"], buffers)
