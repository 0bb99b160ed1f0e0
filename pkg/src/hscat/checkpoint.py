"""Self-describing checkpoint files.

Layout (little-endian)::

    magic    4 bytes  b"HSCK"
    version  u32
    meta     u32 length + UTF-8 JSON (model config, model id, training state)
    tensors  u32 count, then per tensor:
             u16 name length, name, u8 dtype code, u8 ndim, u32 x ndim shape,
             u64 byte count, raw bytes

Tensor names are parameter names; optimizer moments are stored as
``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"HSCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    model_id: str = ""
    lam: float | None = None
    step: int = 0
    train_config: dict | None = None
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None

    @classmethod
    def from_model(cls, model, **kw) -> "Checkpoint":
        params = {name: p.data.copy() for name, p in model.named_parameters()}
        return cls(model.config, params, model.model_id().hex(), lam=model.lam, **kw)

    def build_model(self):
        """Instantiate a CompressionModel carrying these weights."""
        from .codec import CompressionModel

        model = CompressionModel(self.model_config)
        named = dict(model.named_parameters())
        missing = set(named) - set(self.params)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in named.items():
            value = self.params[name]
            if value.shape != p.data.shape:
                raise CheckpointError(f"{name}: shape {value.shape} does not match model {p.data.shape}")
            p.data = value.astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)
        model.lam = self.lam
        if self.model_id and model.model_id().hex() != self.model_id:
            raise CheckpointError("parameter digest does not match the recorded model id")
        return model

    def save(self, path) -> None:
        meta = {
            "model_config": self.model_config.to_dict(),
            "model_id": self.model_id,
            "lambda": self.lam,
            "step": self.step,
            "train_config": self.train_config,
            "adam_t": self.adam_t,
            "rng_state": self.rng_state,
        }
        tensors = list(self.params.items())
        tensors += [(f"adam.m/{k}", v) for k, v in self.adam_m.items()]
        tensors += [(f"adam.v/{k}", v) for k, v in self.adam_v.items()]
        blob = json.dumps(meta, sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
        for name, arr in tensors:
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            key = name.encode()
            parts.append(struct.pack("<HBB", len(key), _CODES[dt], arr.ndim) + key)
            parts.append(struct.pack(f"<{arr.ndim}IQ", *arr.shape, len(raw)))
            parts.append(raw)
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
        try:
            return cls._parse(data)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e

    @classmethod
    def _parse(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(data[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            klen, code, ndim = struct.unpack_from("<HBB", data, pos)
            pos += 4
            name = data[pos:pos + klen].decode()
            pos += klen
            *shape, nbytes = struct.unpack_from(f"<{ndim}IQ", data, pos)
            pos += 4 * ndim + 8
            if pos + nbytes > len(data) or code not in _DTYPES:
                raise CheckpointError(f"tensor {name!r} is truncated or has an unknown dtype")
            tensors[name] = np.frombuffer(data[pos:pos + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
            pos += nbytes
        params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        return cls(ModelConfig.from_dict(meta["model_config"]), params, meta["model_id"],
                   lam=meta["lambda"], step=meta["step"], train_config=meta["train_config"],
                   adam_t=meta["adam_t"], adam_m=m, adam_v=v, rng_state=meta["rng_state"])


def load_model(path):
    return Checkpoint.load(path).build_model()
