"""Binary checkpoint format (``SMCK``).

Layout, all little-endian::

    b"SMCK" | version u32 | count u32
    per entry: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | f32 payload
    fingerprint: 32 bytes

The canonical config text that hashes to the fingerprint is written next to
the checkpoint as ``<path>.cfg``.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError, FormatError

MAGIC = b"SMCK"
VERSION = 1


def fingerprint_of(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    fingerprint: bytes
    config_text: str = ""
    diagnostics: dict = field(default_factory=dict)

    def verify(self) -> None:
        """Check that the stored config text really hashes to the fingerprint."""
        if self.config_text and fingerprint_of(self.config_text) != self.fingerprint:
            raise ContractError("checkpoint fingerprint does not match its config text")

    def copy(self) -> "Checkpoint":
        return Checkpoint(OrderedDict((k, v.copy()) for k, v in self.params.items()),
                          self.fingerprint, self.config_text, dict(self.diagnostics))

    def equal_params(self, other: "Checkpoint") -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def to_bytes(ckpt: Checkpoint) -> bytes:
    if len(ckpt.fingerprint) != 32:
        raise ContractError("fingerprint must be 32 bytes")
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(ckpt.fingerprint)
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 12
        params = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float32).reshape(dims)
            off += 4 * size
            params[name] = arr
        fp = buf[off:off + 32]
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if len(fp) != 32 or off + 32 != len(buf):
        raise FormatError("checkpoint trailer is not a 32-byte fingerprint")
    return Checkpoint(params, bytes(fp))


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    Path(str(path) + ".cfg").write_text(ckpt.config_text, encoding="utf-8")
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    ckpt = from_bytes(path.read_bytes())
    sidecar = Path(str(path) + ".cfg")
    if sidecar.exists():
        ckpt.config_text = sidecar.read_text(encoding="utf-8")
    return ckpt
