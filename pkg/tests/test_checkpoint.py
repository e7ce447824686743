import struct
import zlib

import numpy as np
import pytest

from densemapnet.checkpoint import (ChecksumError, FormatError, ShapeMismatchError, VersionError, dumps,
                                    infer_channels, load_checkpoint, parse, save_checkpoint)
from densemapnet.graph import build_densemapnet


def _snapshot(graph):
    return {(n, r): a.copy() for n, r, a in graph.iter_parameters()}


def test_round_trip_is_bit_exact(tmp_path):
    src = build_densemapnet(3, seed=3)
    rng = np.random.default_rng(0)
    for _, _, arr in src.iter_parameters():
        arr[...] = rng.standard_normal(arr.shape)
    save_checkpoint(src, tmp_path / "m.dmnw")
    dst = build_densemapnet(3, seed=9)
    load_checkpoint(tmp_path / "m.dmnw", dst)
    for (n, r), a in _snapshot(src).items():
        b = dst.params[n][r]
        assert a.shape == b.shape and a.tobytes() == b.tobytes(), (n, r)


def test_header_and_trailer():
    blob = dumps(build_densemapnet(1))
    magic, version, count = struct.unpack_from("<4sHI", blob)
    assert (magic, version) == (b"DMNW", 1)
    assert count == sum(1 for _ in build_densemapnet(1).iter_parameters())
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_truncated_file_leaves_graph_untouched(tmp_path):
    path = tmp_path / "m.dmnw"
    save_checkpoint(build_densemapnet(3, seed=1), path)
    path.write_bytes(path.read_bytes()[:-100])
    g = build_densemapnet(3, seed=2)
    before = _snapshot(g)
    with pytest.raises(ChecksumError):
        load_checkpoint(path, g)
    assert all(np.array_equal(a, g.params[n][r]) for (n, r), a in before.items())


def test_flipped_byte_fails_crc():
    blob = bytearray(dumps(build_densemapnet(1)))
    blob[200] ^= 0x01
    with pytest.raises(ChecksumError):
        parse(bytes(blob))


def test_channel_mismatch_names_first_conv(tmp_path):
    path = tmp_path / "c1.dmnw"
    save_checkpoint(build_densemapnet(1), path)
    g = build_densemapnet(3)
    before = _snapshot(g)
    with pytest.raises(ShapeMismatchError) as err:
        load_checkpoint(path, g)
    assert err.value.layer == "Conv2D_1"
    assert "Conv2D_1" in str(err.value)
    assert all(np.array_equal(a, g.params[n][r]) for (n, r), a in before.items())


def _resealed(blob, **fields):
    body = bytearray(blob[:-4])
    if "magic" in fields:
        body[:4] = fields["magic"]
    if "version" in fields:
        body[4:6] = struct.pack("<H", fields["version"])
    return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def test_unknown_version_rejected():
    with pytest.raises(VersionError):
        parse(_resealed(dumps(build_densemapnet(1)), version=7))


def test_bad_magic_rejected():
    with pytest.raises(FormatError):
        parse(_resealed(dumps(build_densemapnet(1)), magic=b"XXXX"))


def test_error_types_are_distinct():
    assert len({ChecksumError, FormatError, VersionError, ShapeMismatchError}) == 4
    assert not issubclass(ChecksumError, VersionError)


def test_infer_channels(tmp_path):
    for c in (1, 3):
        save_checkpoint(build_densemapnet(c), tmp_path / f"{c}.dmnw")
        assert infer_channels(load_checkpoint(tmp_path / f"{c}.dmnw")) == c


def test_save_is_atomic(tmp_path):
    path = tmp_path / "m.dmnw"
    save_checkpoint(build_densemapnet(1), path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.dmnw"]
