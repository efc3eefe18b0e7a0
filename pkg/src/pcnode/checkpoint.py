"""Checkpoint files: a text manifest followed by a float32 little-endian blob.

Layout::

    PCCKPT1
    config={"kind": ...}
    config_hash=<sha256 of the config json>
    epsilon=<float>
    blob_bytes=<int>
    blob_sha256=<hex>
    tensor=<name> <shape as 3x4> float32 <offset>
    ...
    <blank line>
    <blob>
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"PCCKPT1\n"


class CheckpointError(ValueError):
    """Checkpoint cannot be used; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _tensors(model) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.data) for name, p in model.named_parameters()]
    out.append(("scaler.mean", model.scaler.mean))
    out.append(("scaler.std", model.scaler.std))
    return out


def round_to_storage(model) -> None:
    """Round every stored quantity to float32 so a saved model behaves exactly like its reload."""
    for _, arr in _tensors(model):
        arr[...] = arr.astype("<f4").astype(np.float64)


def dumps(model) -> bytes:
    cfg = model.config()
    chunks, lines, offset = [], [], 0
    for name, arr in _tensors(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"tensor={name} {shape} float32 {offset}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    head = [
        f"config={json.dumps(cfg, sort_keys=True)}",
        f"config_hash={config_hash(cfg)}",
        f"epsilon={float(getattr(model, 'epsilon', float('inf')))!r}",
        f"blob_bytes={len(blob)}",
        f"blob_sha256={hashlib.sha256(blob).hexdigest()}",
    ]
    text = "\n".join(head + lines) + "\n\n"
    return MAGIC + text.encode() + blob


def save(model, path) -> None:
    Path(path).write_bytes(dumps(model))


def _parse(raw: bytes) -> tuple[dict, list[tuple[str, tuple, int]], bytes]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad-magic", "not a checkpoint file")
    end = raw.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("truncated", "header never terminates")
    meta, tensors = {}, []
    for line in raw[len(MAGIC):end].decode().splitlines():
        key, _, val = line.partition("=")
        if key == "tensor":
            try:
                name, shape, dtype, off = val.split(" ")
                dims = tuple(int(s) for s in shape.split("x")) if shape else ()
                tensors.append((name, dims, int(off)))
            except ValueError as exc:
                raise CheckpointError("bad-header", f"unreadable tensor line {line!r}") from exc
            if dtype != "float32":
                raise CheckpointError("bad-header", f"unsupported dtype {dtype}")
        else:
            meta[key] = val
    for key in ("config", "config_hash", "epsilon", "blob_bytes", "blob_sha256"):
        if key not in meta:
            raise CheckpointError("bad-header", f"missing {key}")
    blob = raw[end + 2:]
    want = int(meta["blob_bytes"])
    if len(blob) != want:
        raise CheckpointError("truncated", f"blob holds {len(blob)} bytes, header promises {want}")
    if hashlib.sha256(blob).hexdigest() != meta["blob_sha256"]:
        raise CheckpointError("corrupt", "blob checksum mismatch")
    return meta, tensors, blob


def loads(raw: bytes, expect_hash: str | None = None):
    meta, tensors, blob = _parse(raw)
    cfg = json.loads(meta["config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise CheckpointError("hash-mismatch", "config does not match its recorded hash")
    if expect_hash is not None and expect_hash != meta["config_hash"]:
        raise CheckpointError("hash-mismatch", f"checkpoint config {meta['config_hash'][:12]} != expected {expect_hash[:12]}")
    from .experiment import model_from_config   # experiment imports this module
    model = model_from_config(cfg)
    model.epsilon = float(meta["epsilon"])
    slots = dict(_tensors(model))
    if set(slots) != {name for name, _, _ in tensors}:
        raise CheckpointError("shape-mismatch", "tensor names differ from the model layout")
    for name, shape, off in tensors:
        dest = slots[name]
        if dest.shape != shape:
            raise CheckpointError("shape-mismatch", f"{name}: file {shape}, model {dest.shape}")
        n = int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + 4 * n > len(blob):
            raise CheckpointError("corrupt", f"{name}: offset out of range")
        dest[...] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
    return model


def load(path, expect_hash: str | None = None):
    return loads(Path(path).read_bytes(), expect_hash)
