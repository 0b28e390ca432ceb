"""Versioned binary checkpoints with bit-exact round trips.

Layout (all integers little-endian, documented byte-exactly in
docs/formats.md):

    magic            8 bytes  b"CAPSCKPT"
    version          u32      currently 1
    config_len       u32      followed by canonical network-config JSON
    config_digest    32 bytes sha256 of the config JSON
    epoch            u64
    train_len        u32      followed by train-config JSON ("" when absent)
    parameter table            named tensors (trainable scalars)
    buffer table               named tensors (batch norm running stats)
    optimizer flag   u8       0: none, 1: meta JSON + moment tensor table
    checksum         32 bytes sha256 of every preceding byte

Each tensor table is a u32 count followed by, per entry: u16 name length,
UTF-8 name, u8 dtype code (0 = float64, 1 = float32), u8 rank, u64 dims,
then the raw little-endian data bytes.  Loading rebuilds the network from
the stored config, so forward passes reproduce bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from capsule_retrieval.backbones import Network, NetworkConfig, build_network

__all__ = [
    "CheckpointError",
    "Checkpoint",
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "read_checkpoint",
    "load_checkpoint",
    "load_checkpoint_into",
]

MAGIC = b"CAPSCKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    """Raw checkpoint contents, before any network is built."""

    version: int
    config: dict
    epoch: int
    train_config: dict | None
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer_meta: dict | None
    optimizer_tensors: dict[str, np.ndarray]


def _pack_tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        dt = np.dtype(arr.dtype)
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dt}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[_DTYPE_CODES[dt]]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_tensor_table(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(reader.take(n_bytes), dtype=dtype).reshape(shape).copy()
        out[name] = arr
    return out


def _config_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(net: Network, path, optimizer=None, train_config=None, epoch: int = 0) -> None:
    """Serialize weights, running stats and optimizer state atomically."""
    cfg_bytes = _config_json(net.cfg.to_dict())
    train_bytes = (
        _config_json(train_config.to_dict() if hasattr(train_config, "to_dict") else train_config)
        if train_config is not None
        else b""
    )
    body = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    body.append(struct.pack("<I", len(cfg_bytes)))
    body.append(cfg_bytes)
    body.append(hashlib.sha256(cfg_bytes).digest())
    body.append(struct.pack("<Q", int(epoch)))
    body.append(struct.pack("<I", len(train_bytes)))
    body.append(train_bytes)
    body.append(_pack_tensor_table({k: p.data for k, p in net.named_parameters().items()}))
    body.append(_pack_tensor_table(net.named_buffers()))
    if optimizer is None:
        body.append(struct.pack("<B", 0))
    else:
        meta = _config_json(optimizer.state_meta())
        body.append(struct.pack("<B", 1))
        body.append(struct.pack("<I", len(meta)))
        body.append(meta)
        body.append(_pack_tensor_table(optimizer.state_tensors()))
    blob = b"".join(body)
    blob += hashlib.sha256(blob).digest()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file without building a network."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    reader = _Reader(payload)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version: expected {CHECKPOINT_VERSION}, "
            f"found {version}"
        )
    (cfg_len,) = reader.unpack("<I")
    cfg_bytes = reader.take(cfg_len)
    stored_digest = reader.take(32)
    if hashlib.sha256(cfg_bytes).digest() != stored_digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    config = json.loads(cfg_bytes.decode("utf-8"))
    (epoch,) = reader.unpack("<Q")
    (train_len,) = reader.unpack("<I")
    train_config = json.loads(reader.take(train_len).decode("utf-8")) if train_len else None
    params = _unpack_tensor_table(reader)
    buffers = _unpack_tensor_table(reader)
    (opt_flag,) = reader.unpack("<B")
    if opt_flag:
        (meta_len,) = reader.unpack("<I")
        optimizer_meta = json.loads(reader.take(meta_len).decode("utf-8"))
        optimizer_tensors = _unpack_tensor_table(reader)
    else:
        optimizer_meta = None
        optimizer_tensors = {}
    return Checkpoint(
        version, config, int(epoch), train_config, params, buffers,
        optimizer_meta, optimizer_tensors,
    )


def _config_diff(expected: dict, found: dict, prefix="") -> list[str]:
    diffs = []
    keys = sorted(set(expected) | set(found))
    for key in keys:
        path = f"{prefix}{key}"
        if key not in expected:
            diffs.append(f"{path}: unexpected (checkpoint has {found[key]!r})")
        elif key not in found:
            diffs.append(f"{path}: missing from checkpoint (expected {expected[key]!r})")
        elif isinstance(expected[key], dict) and isinstance(found[key], dict):
            diffs.extend(_config_diff(expected[key], found[key], prefix=f"{path}."))
        elif expected[key] != found[key]:
            diffs.append(f"{path}: expected {expected[key]!r}, checkpoint has {found[key]!r}")
    return diffs


def _fill_network(net: Network, ckpt: Checkpoint) -> None:
    params = net.named_parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(params))
        raise CheckpointError(f"parameter name mismatch: missing={missing} extra={extra}")
    for name, p in params.items():
        arr = ckpt.params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: shape {arr.shape} != network's {p.data.shape}"
            )
        p.data = arr.copy()
        p.grad = np.zeros_like(p.data)
    # running stats live on the batch norm states; replace them in place
    for unit in net.units:
        for key, arr in unit.buffers().items():
            if key not in ckpt.buffers:
                raise CheckpointError(f"buffer {key!r} missing from checkpoint")
            arr[...] = ckpt.buffers[key]


def load_checkpoint(path) -> Network:
    """Rebuild the stored network: config, weights and running statistics."""
    ckpt = read_checkpoint(path)
    net = build_network(NetworkConfig.from_dict(ckpt.config), seed=0)
    _fill_network(net, ckpt)
    return net


def load_checkpoint_into(path, net: Network) -> Checkpoint:
    """Load into an existing network; configs must match exactly."""
    ckpt = read_checkpoint(path)
    diffs = _config_diff(net.cfg.to_dict(), ckpt.config)
    if diffs:
        raise CheckpointError(
            "checkpoint config does not match the network:\n  " + "\n  ".join(diffs)
        )
    _fill_network(net, ckpt)
    return ckpt
