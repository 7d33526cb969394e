"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic    8 bytes   b"FLUIDCK\\0"
    version  uint32
    length   uint64    total file size in bytes
    hlen     uint32    header size in bytes
    header   hlen      compact JSON with sorted keys
    payload            float32 tensors, little-endian, in directory order

The header holds the config fingerprint and canonical config, the training
iteration, optimizer step count, skipped-iteration count and a tensor
directory of ``{"name", "shape", "offset"}`` entries (offset in bytes from
the start of the payload). Tensor names are ``param/<name>``,
``adam_m/<name>`` and ``adam_v/<name>``.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .trainer import AdamState, TrainState

MAGIC = b"FLUIDCK\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQI")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def encode(state: TrainState, fingerprint: str, config: dict, seed: int) -> bytes:
    tensors = []
    for group, src in (("param", state.params), ("adam_m", state.opt.m), ("adam_v", state.opt.v)):
        for name in sorted(src):
            tensors.append((f"{group}/{name}", np.ascontiguousarray(src[name], dtype=_F32)))
    directory, offset = [], 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "config": config,
        "fingerprint": fingerprint,
        "iteration": int(state.iteration),
        "adam_t": int(state.opt.t),
        "skipped": int(state.skipped),
        "seed": int(seed),
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    total = _PREFIX.size + len(hbytes) + offset
    out = bytearray(_PREFIX.pack(MAGIC, VERSION, total, len(hbytes)))
    out += hbytes
    for _, arr in tensors:
        out += arr.tobytes()
    return bytes(out)


def decode(blob: bytes) -> tuple[dict, dict]:
    """Parse a checkpoint; returns ``(header, {name: float32 array})``."""
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"truncated checkpoint: {len(blob)} bytes, header needs {_PREFIX.size}")
    magic, version, total, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) != total:
        raise CheckpointError(f"truncated or padded checkpoint: {len(blob)} bytes, expected {total}")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    base = _PREFIX.size + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + 4 * count
        if end > total:
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype=_F32).reshape(shape).astype(np.float32)
    return header, tensors


def to_state(header: dict, tensors: dict) -> TrainState:
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in tensors.items():
        group, name = key.split("/", 1)
        groups[group][name] = arr
    return TrainState(groups["param"], AdamState(groups["adam_m"], groups["adam_v"], header["adam_t"]),
                      header["iteration"], [], header["skipped"])


def save(path, state: TrainState, fingerprint: str, config: dict, seed: int) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(state, fingerprint, config, seed))


def load(path, fingerprint: str | None = None, allow_mismatch: bool = False):
    """Load ``(header, TrainState)``; checks the fingerprint when one is given."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header, tensors = decode(blob)
    if fingerprint is not None and header["fingerprint"] != fingerprint and not allow_mismatch:
        raise FingerprintMismatch(
            f"checkpoint config fingerprint {header['fingerprint'][:12]} does not match {fingerprint[:12]}")
    return header, to_state(header, tensors)
