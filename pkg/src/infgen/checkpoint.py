"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"INFG" | u32 version | u32 header_len | header JSON | tensor data | sha256

The header lists each tensor's name, shape and group; data is the
concatenation of float32 little-endian arrays in header order.  The trailing
SHA-256 covers every preceding byte, so truncation and bit flips are caught
before anything is returned.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"INFG"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    config_digest: str
    tensors: dict[str, torch.Tensor]
    groups: dict[str, str] = field(default_factory=dict)   # tensor name -> group
    frozen: dict[str, bool] = field(default_factory=dict)  # group -> frozen flag
    step: int = 0
    kind: str = "infgen"
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    entries, blobs = [], []
    for name, t in ckpt.tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "group": ckpt.groups.get(name, "")})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "config_digest": ckpt.config_digest,
        "config": ckpt.config_text,
        "step": ckpt.step,
        "kind": ckpt.kind,
        "frozen": ckpt.frozen,
        "meta": ckpt.meta,
        "tensors": entries,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect_digest: str | None = None, force: bool = False) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint {path}") from None
    if len(raw) < 12 + 32:
        raise CheckpointError("truncated checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    header = json.loads(body[12:12 + hlen])
    if expect_digest is not None and header["config_digest"] != expect_digest and not force:
        raise CheckpointError(
            f"config digest {header['config_digest']} does not match {expect_digest} (use --force to override)"
        )
    offset = 12 + hlen
    tensors, groups = {}, {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(e["shape"])
        offset += 4 * n
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
        groups[e["name"]] = e["group"]
    if offset != len(body):
        raise CheckpointError("tensor data length does not match header")
    return Checkpoint(header["config"], header["config_digest"], tensors, groups,
                      header["frozen"], header["step"], header["kind"], header["meta"])
