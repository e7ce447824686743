"""Binary checkpoint format for a :class:`~densemapnet.graph.ModelGraph`.

Layout, all little-endian::

    b"DMNW" | version u16 | record count u32
    per record: name length u16 | UTF-8 name | role u8 | 4 x dim u32 | f32 payload
    CRC-32 (u32) of every preceding byte

Shapes with fewer than four axes are right-padded with 1.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DMNW"
VERSION = 1
ROLES = ("kernel", "bias", "gamma", "beta", "running_mean", "running_var")
_HEADER = struct.Struct("<4sHI")
_RECORD = struct.Struct("<B4I")


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class ChecksumError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, layer, role, expected, found):
        super().__init__(f"{layer}.{role}: checkpoint shape {found} does not match model shape {expected}")
        self.layer = layer


def _dims(shape):
    if len(shape) > 4:
        raise ValueError(f"cannot store {len(shape)}-D parameter")
    return tuple(shape) + (1,) * (4 - len(shape))


def dumps(graph) -> bytes:
    records = list(graph.iter_parameters())
    parts = [_HEADER.pack(MAGIC, VERSION, len(records))]
    for layer, role, arr in records:
        name = layer.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(_RECORD.pack(ROLES.index(role), *_dims(arr.shape)))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(graph, path):
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(graph))
    os.replace(tmp, path)


def parse(blob: bytes):
    """Decode a checkpoint into ``{layer: {role: float32 array}}`` (4-D shapes)."""
    if len(blob) < _HEADER.size + 4:
        raise ChecksumError(f"checkpoint truncated ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch (corrupt or truncated file)")
    magic, version, count = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    pos = _HEADER.size
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            role_id, *dims = _RECORD.unpack_from(body, pos)
            pos += _RECORD.size
            size = int(np.prod(dims))
            if pos + 4 * size > len(body):
                raise FormatError(f"record {name} runs past the end of the file")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out.setdefault(name, {})[ROLES[role_id]] = arr.astype(np.float32)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint record: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after the last record")
    return out


def load_checkpoint(path, graph=None):
    """Read ``path``; if ``graph`` is given, validate against it and install.

    Validation covers every parameter before any is assigned, so a failed
    load leaves ``graph`` untouched. Returns the parameter dict.
    """
    stored = parse(Path(path).read_bytes())
    if graph is None:
        return stored
    staged = {}
    for layer, role, arr in graph.iter_parameters():
        found = stored.get(layer, {}).get(role)
        if found is None:
            raise FormatError(f"checkpoint is missing {layer}.{role}")
        if found.shape != _dims(arr.shape):
            raise ShapeMismatchError(layer, role, arr.shape, found.shape)
        staged.setdefault(layer, {})[role] = found.reshape(arr.shape).astype(arr.dtype)
    extra = {f"{l}.{r}" for l, g in stored.items() for r in g} - {f"{l}.{r}" for l, g in staged.items() for r in g}
    if extra:
        raise FormatError(f"checkpoint has parameters unknown to the model: {sorted(extra)[:5]}")
    for layer, group in staged.items():
        graph.params[layer].update(group)
    return staged


def infer_channels(stored):
    """Input channel count of the model a checkpoint was written for."""
    return int(stored["Conv2D_2"]["kernel"].shape[2])
