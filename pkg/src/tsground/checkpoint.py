"""Binary checkpoint serialization with exact float64 round-trips.

Layout: magic b"TDBG", u32 format version, u32 header length, JSON header
(run config, vocabulary/feature dims, tensor directory with shapes and byte
offsets, optional optimizer scalars, optional history digest), then the raw
little-endian float64 payloads in directory order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, config_from_dict
from .errors import FormatError, UpgradeError
from .nnet import ParamStore
from .training import OptimState

MAGIC = b"TDBG"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def save_checkpoint(
    store: ParamStore,
    path: Path | str,
    history_digest: dict | None = None,
    optim: OptimState | None = None,
) -> None:
    entries = []
    blobs = []
    offset = 0

    def push(name: str, values: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(values, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(values.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, tensor in store.params.items():
        push(name, tensor.values)
    header: dict = {
        "config": store.config.to_dict(),
        "vocab_size": store.vocab_size,
        "d_v": store.d_v,
        "tensors": entries,
        "history_digest": history_digest,
        "optim": None,
    }
    if optim is not None:
        header["optim"] = {
            "lr": optim.lr,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "eps": optim.eps,
            "step": optim.step,
        }
        for name in store.params:
            push(f"optim.m.{name}", optim.m[name])
            push(f"optim.v.{name}", optim.v[name])
        header["tensors"] = entries
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Path | str) -> tuple[ParamStore, RunConfig, dict]:
    """Restore a checkpoint; every tensor value comes back bit-for-bit.

    Returns (store, config, meta); meta carries the history digest and, when
    saved, the reconstructed optimizer state under 'optim'.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, head_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UpgradeError(
            f"{path}: format version {version} is not supported (expected {VERSION})"
        )
    head_end = _HEAD.size + head_len
    if len(raw) < head_end:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_HEAD.size:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    payload = raw[head_end:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + count * 8
        if hi > len(payload):
            raise FormatError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(payload[lo:hi], dtype="<f8").reshape(shape).copy()
        )
    config = config_from_dict(header["config"])
    params = {
        name: ad.parameter(values, name)
        for name, values in arrays.items()
        if not name.startswith("optim.")
    }
    store = ParamStore(params, config, header["vocab_size"], header["d_v"])
    meta: dict = {"history_digest": header.get("history_digest"), "version": version}
    if header.get("optim") is not None:
        o = header["optim"]
        optim = OptimState(
            lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"]
        )
        for name in params:
            optim.m[name] = arrays[f"optim.m.{name}"]
            optim.v[name] = arrays[f"optim.v.{name}"]
        meta["optim"] = optim
    return store, config, meta
