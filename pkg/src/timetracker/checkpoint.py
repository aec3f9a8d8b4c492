"""Versioned binary checkpoints of named arrays.

Layout (all integers little-endian):

    magic  b"TTCK"
    u32    format version
    u64    length of the UTF-8 JSON header, then the header
           (model config, free-form metadata)
    u64    number of arrays
    per array:
        u64 name length, UTF-8 name
        u8  dtype code (0 float64, 1 float32, 2 int64)
        u64 ndim, then ndim x u64 dims
        raw little-endian payload
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TTCK"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}

ROUTER_BIAS_SUFFIX = ".router_bias"


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        header = json.dumps({"config": self.config, "meta": self.meta}, sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<I", self.version), struct.pack("<Q", len(header)), header]
        parts.append(struct.pack("<Q", len(self.arrays)))
        for name, arr in self.arrays.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise TypeError(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
            raw = name.encode()
            parts.append(struct.pack("<Q", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<BQ", code, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        if blob[:4] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = 4
        (version,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        header = json.loads(blob[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BQ", blob, pos)
            pos += 9
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            arrays[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
            pos += nbytes
        return cls(arrays=arrays, config=header["config"], meta=header["meta"], version=version)

    def save(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def model_state(model, extra: dict | None = None) -> Checkpoint:
    arrays = {name: p.data.copy() for name, p in model.named_parameters()}
    for i, block in model.moe_blocks():
        arrays[f"layers.{i}{ROUTER_BIAS_SUFFIX}"] = block.router.bias.copy()
    return Checkpoint(arrays=arrays, config=model.cfg.to_dict(), meta=dict(extra or {}))


def load_state(ckpt: Checkpoint, model=None):
    """Build a model from the checkpoint config (or fill ``model``) with its arrays."""
    from .model import ModelConfig, build_model

    if model is None:
        model = build_model(ModelConfig.from_dict(ckpt.config), 0)
    named = dict(model.named_parameters())
    missing = [n for n in named if n not in ckpt.arrays]
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {missing}")
    for name, p in named.items():
        arr = ckpt.arrays[name]
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    for i, block in model.moe_blocks():
        key = f"layers.{i}{ROUTER_BIAS_SUFFIX}"
        if key in ckpt.arrays:
            block.router.bias = ckpt.arrays[key].astype(np.float64, copy=True)
    return model
