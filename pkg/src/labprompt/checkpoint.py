"""Versioned binary checkpoint container.

Layout: magic "PMTS1", a little-endian uint64 header length, a JSON header
with a manifest (name, shape, frozen flag, byte offset) plus free-form
metadata, then concatenated little-endian float32 payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMTS1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_container(
    path: str | Path,
    tensors: dict[str, tuple[np.ndarray, bool]],
    meta: dict | None = None,
) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        array, frozen = tensors[name]
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(array.shape), "frozen": bool(frozen), "offset": offset}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": VERSION, "meta": meta or {}, "tensors": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path: str | Path) -> tuple[dict[str, tuple[np.ndarray, bool]], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint container")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {header.get('version')}")
    payload = raw[start + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        begin = entry["offset"]
        end = begin + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']!r}")
        array = np.frombuffer(payload[begin:end], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = (array, entry["frozen"])
    return tensors, header["meta"]


def module_tensors(module) -> dict[str, tuple[np.ndarray, bool]]:
    return {
        name: (p.detach().cpu().numpy(), not p.requires_grad)
        for name, p in module.named_parameters()
    }


def load_into_module(module, tensors: dict[str, tuple[np.ndarray, bool]]) -> None:
    import torch

    params = dict(module.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            array, frozen = tensors[name]
            if tuple(array.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"tensor {name!r}: checkpoint shape {tuple(array.shape)} "
                    f"does not match model shape {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(array))
            p.requires_grad_(not frozen)
