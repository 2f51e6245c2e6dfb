"""Versioned binary checkpoints for emulator networks.

Layout (little endian)::

    b"DCEM" | u16 version | u32 config length | config text (UTF-8)
    | float64 values of every parameter in declaration order | u32 CRC32

The CRC covers every preceding byte.
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, DataError, VersionMismatchError
from .model import ModelConfig, build_model
from .synth import atomic_write

MAGIC = b"DCEM"
VERSION = 1


def encode_checkpoint(model):
    text = model.config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(text)), text]
    parts += [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.parameters()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob):
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CorruptFileError("not a checkpoint (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError("checkpoint checksum mismatch")
    version, n = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} unsupported (expected {VERSION})")
    config = ModelConfig.from_text(body[10:10 + n].decode("utf-8"))
    model = build_model(config)
    off = 10 + n
    params = model.parameters()
    expected = sum(p.data.size for p in params) * 8
    if len(body) - off != expected:
        raise CorruptFileError("checkpoint payload does not match its config")
    for p in params:
        count = p.data.size
        p.data = np.frombuffer(body, "<f8", count, off).reshape(p.shape).astype(float)
        off += 8 * count
    return model


def save_checkpoint(model, path):
    blob = encode_checkpoint(model)
    atomic_write(path, blob)
    return zlib.crc32(blob)


def load_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    return decode_checkpoint(blob)
