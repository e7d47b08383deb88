"""``CANW`` checkpoint container: named little-endian tensors plus architecture fingerprint.

Layout::

    b"CANW" | u16 version | 32-byte sha256 fingerprint
    u32 meta_len | meta (UTF-8 JSON: model config + encoder fingerprint)
    u32 n_entries | per entry: u16 name_len, name, u8 dtype, u8 ndim, u32[ndim] shape,
                               u64 offset, u64 nbytes
    u64 payload_len | u32 crc32(payload) | payload
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from typing import BinaryIO

import numpy as np
import torch

from .model import ModelConfig, SupConResNet

MAGIC = b"CANW"
VERSION = 1
ENCODER_PREFIX = "encoder."

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}


class CheckpointError(ValueError):
    pass


def state_arrays(model: SupConResNet) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def dumps_checkpoint(model: SupConResNet, extra: dict | None = None) -> bytes:
    cfg = model.config
    meta = {"config": cfg.to_dict(), "encoder_fingerprint": cfg.encoder_fingerprint()}
    if extra:
        meta["extra"] = extra
    entries, chunks, offset = [], [], 0
    for name, arr in state_arrays(model).items():
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append((name, _CODES[arr.dtype], arr.shape, offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    out.write(bytes.fromhex(cfg.fingerprint()))
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    out.write(struct.pack("<I", len(meta_raw)))
    out.write(meta_raw)
    out.write(struct.pack("<I", len(entries)))
    for name, code, shape, off, nbytes in entries:
        raw_name = name.encode()
        out.write(struct.pack("<HBB", len(raw_name), code, len(shape)))
        out.write(raw_name)
        out.write(struct.pack(f"<{len(shape)}I", *shape))
        out.write(struct.pack("<QQ", off, nbytes))
    out.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
    out.write(payload)
    return out.getvalue()


def save_checkpoint(model: SupConResNet, sink: BinaryIO | str | os.PathLike,
                    extra: dict | None = None) -> int:
    blob = dumps_checkpoint(model, extra)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(blob)
    else:
        sink.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(source) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    """Parse and integrity-check a checkpoint; returns (config, tensors, meta)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            blob = fh.read()
    elif isinstance(source, (bytes, bytearray)):
        blob = bytes(source)
    else:
        blob = source.read()
    rd = _Reader(blob)
    if rd.take(4) != MAGIC:
        raise CheckpointError("not a CANW checkpoint (bad magic)")
    (version,) = rd.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = rd.take(32).hex()
    (meta_len,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.take(meta_len).decode())
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    if config.fingerprint() != fingerprint:
        raise CheckpointError("config fingerprint mismatch")
    (n_entries,) = rd.unpack("<I")
    entries = []
    for _ in range(n_entries):
        name_len, code, ndim = rd.unpack("<HBB")
        name = rd.take(name_len).decode()
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        offset, nbytes = rd.unpack("<QQ")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        entries.append((name, _DTYPES[code], tuple(shape), offset, nbytes))
    payload_len, crc = rd.unpack("<QI")
    payload = rd.take(payload_len)
    if rd.pos != len(blob):
        raise CheckpointError("trailing bytes after payload")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("payload checksum mismatch (corrupted checkpoint)")
    tensors = {}
    for name, dtype, shape, offset, nbytes in entries:
        if offset + nbytes > payload_len or nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"entry {name} out of bounds")
        tensors[name] = np.frombuffer(payload, dtype, count=nbytes // dtype.itemsize,
                                      offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
    return config, tensors, meta


def load_checkpoint(source) -> SupConResNet:
    """Rebuild the stored model exactly (strict: every tensor must be present)."""
    config, tensors, meta = read_checkpoint(source)
    model = SupConResNet(config)
    load_state(model, tensors, strict=True)
    model.eval()
    return model


def load_state(model: SupConResNet, tensors: dict[str, np.ndarray], prefix: str = "",
               strict: bool = True) -> list[str]:
    """Copy tensors whose names start with ``prefix`` into ``model``; returns loaded names."""
    own = model.state_dict()
    wanted = [n for n in own if n.startswith(prefix)]
    missing = [n for n in wanted if n not in tensors]
    if strict and missing:
        raise CheckpointError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if strict and not prefix:
        unexpected = [n for n in tensors if n not in own]
        if unexpected:
            raise CheckpointError(f"unexpected tensors: {unexpected[:5]}")
    loaded = []
    with torch.no_grad():
        for name in wanted:
            if name not in tensors:
                continue
            src = torch.from_numpy(np.array(tensors[name]))
            if tuple(src.shape) != tuple(own[name].shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(src.shape)} vs "
                                      f"{tuple(own[name].shape)}")
            own[name].copy_(src)
            loaded.append(name)
    return loaded


def load_encoder_into(model: SupConResNet, source) -> list[str]:
    """Transfer path: copy only ``encoder.*`` tensors, checking the encoder fingerprint."""
    config, tensors, _ = read_checkpoint(source)
    if config.encoder_fingerprint() != model.config.encoder_fingerprint():
        raise CheckpointError("encoder architecture fingerprint mismatch")
    return load_state(model, tensors, prefix=ENCODER_PREFIX, strict=True)


def checkpoint_size(model: SupConResNet) -> int:
    return len(dumps_checkpoint(model))
