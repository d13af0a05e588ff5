"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"OELM"
    u32   format version
    u32   spec length, then that many bytes of UTF-8 INI text
    u32   tensor count
    per tensor:
        u32 name length, name bytes (UTF-8)
        u64 rows, u64 cols
        rows * cols float32 values, row-major
    u32   CRC32 of every preceding byte

Values are stored as float32, so a float64 checkpoint is rounded on save.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, LayerwiseError
from .model import FORMAT_VERSION, Checkpoint
from .plan import ModelSpec, parse_ini, spec_from_section, spec_to_ini

MAGIC = b"OELM"
HEADER_SECTION = "checkpoint"


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    spec_block = spec_to_ini(ckpt.spec, {HEADER_SECTION: ckpt.header} if ckpt.header else None).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(spec_block)), spec_block]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        rows, cols = arr.shape
        parts.append(struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<QQ", rows, cols))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, spec: ModelSpec | None = None) -> Checkpoint:
    """Parse checkpoint bytes; with ``spec`` given, tensors must fit that spec instead."""
    if len(data) < len(MAGIC) + 4 or data[:4] != MAGIC:
        raise FormatError("bad magic bytes, not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC mismatch, checkpoint corrupt or truncated")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (spec_len,) = r.unpack("<I")
    try:
        text = r.take(spec_len).decode("utf-8")
        parser = parse_ini(text, "<checkpoint spec>")
        embedded = spec_from_section(parser["model"])
    except (UnicodeDecodeError, KeyError, LayerwiseError) as exc:
        raise FormatError(f"unreadable spec block: {exc}") from exc
    header = dict(parser[HEADER_SECTION]) if HEADER_SECTION in parser else {}
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        rows, cols = r.unpack("<QQ")
        raw = r.take(rows * cols * 4)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if r.pos != len(body):
        raise FormatError("trailing bytes after last tensor")
    ckpt = Checkpoint(spec if spec is not None else embedded, tensors, version, header)
    ckpt.validate()
    return ckpt


def load_checkpoint(path, spec: ModelSpec | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, spec)
