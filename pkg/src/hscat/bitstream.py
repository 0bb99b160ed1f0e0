"""Binary container for one compressed image.

Layout (all integers little-endian)::

    magic        4 bytes  b"HSCB"
    version      u8
    model id     8 bytes
    height       u16      true (pre-padding) image height
    width        u16
    lambda index u8       position in config.LAMBDAS, 255 if unknown
    z segment    u32 length + range-coded bytes
    y segments   per chunk in schedule order: u32 length + range-coded bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .coder import CorruptStreamError

MAGIC = b"HSCB"
VERSION = 1
_HEADER = struct.Struct("<4sB8sHHB")
_LEN = struct.Struct("<I")


class ModelMismatchError(ValueError):
    """The stream was produced by a different model."""


@dataclass
class Bitstream:
    model_id: bytes
    height: int
    width: int
    lambda_index: int = 255
    z_payload: bytes = b""
    y_payloads: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        if len(self.model_id) != 8:
            raise ValueError("model id must be 8 bytes")
        if not (0 < self.height < 1 << 16 and 0 < self.width < 1 << 16):
            raise ValueError(f"image size {self.height}x{self.width} does not fit the header")
        parts = [_HEADER.pack(MAGIC, VERSION, self.model_id, self.height, self.width, self.lambda_index)]
        for seg in [self.z_payload, *self.y_payloads]:
            parts.append(_LEN.pack(len(seg)))
            parts.append(bytes(seg))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise CorruptStreamError("stream shorter than its header")
        magic, version, model_id, h, w, lam = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CorruptStreamError("not an HSCB stream (bad magic)")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        pos = _HEADER.size
        segments = []
        while pos < len(data):
            if pos + _LEN.size > len(data):
                raise CorruptStreamError("truncated segment length")
            (n,) = _LEN.unpack_from(data, pos)
            pos += _LEN.size
            if pos + n > len(data):
                raise CorruptStreamError(f"segment declares {n} bytes but only {len(data) - pos} remain")
            segments.append(bytes(data[pos:pos + n]))
            pos += n
        if not segments:
            raise CorruptStreamError("stream has no hyper-latent segment")
        return cls(model_id, h, w, lam, segments[0], segments[1:])

    @staticmethod
    def header_size() -> int:
        return _HEADER.size

    def breakdown(self) -> dict:
        """Byte shares: header, hyper-latent segment, one entry per latent chunk."""
        shares = {"header": _HEADER.size, "z": _LEN.size + len(self.z_payload)}
        for i, seg in enumerate(self.y_payloads):
            shares[f"y{i}"] = _LEN.size + len(seg)
        return shares

    def __len__(self) -> int:
        return _HEADER.size + sum(_LEN.size + len(s) for s in [self.z_payload, *self.y_payloads])
