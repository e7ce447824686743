import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from densemapnet.data import (ImageFormatError, PFMHeaderError, PFMMagicError, PFMTruncatedError, StereoSample,
                              crop_kitti, denormalize_disparity, load_dataset, load_image, load_kitti_disparity,
                              load_pfm, normalize_disparity, read_meta, save_dataset, split_filter,
                              synth_generate, write_pfm, write_png16)
from densemapnet.metrics import epe


def test_pfm_little_endian_rows_flipped(tmp_path):
    path = tmp_path / "a.pfm"
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 1, 2, 3, 4))
    d = load_pfm(path)
    assert d.shape == (1, 2, 2, 1)
    assert d[0, :, :, 0].tolist() == [[3, 4], [1, 2]]


def test_pfm_big_endian(tmp_path):
    path = tmp_path / "b.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 1.5, -7.25))
    assert load_pfm(path)[0, 0, :, 0].tolist() == [1.5, 7.25]
    assert load_pfm(path, absolute=False)[0, 0, :, 0].tolist() == [1.5, -7.25]


@pytest.mark.parametrize("little", [True, False])
def test_pfm_round_trip_bit_exact(tmp_path, little):
    arr = np.random.default_rng(0).standard_normal((1, 7, 5, 1)).astype(np.float32)
    write_pfm(tmp_path / "r.pfm", arr, little_endian=little)
    assert load_pfm(tmp_path / "r.pfm", absolute=False).tobytes() == arr.tobytes()


@pytest.mark.parametrize("blob, err", [
    (b"PF\n2 2\n-1.0\n" + bytes(48), PFMMagicError),
    (b"Pf\n2 x\n-1.0\n" + bytes(16), PFMHeaderError),
    (b"Pf\n2 2\nnan\n" + bytes(16), PFMHeaderError),
    (b"Pf\n2 2\n", PFMHeaderError),
    (b"Pf\n2 2\n-1.0\n" + bytes(15), PFMTruncatedError),
])
def test_pfm_errors(tmp_path, blob, err):
    path = tmp_path / "bad.pfm"
    path.write_bytes(blob)
    with pytest.raises(err):
        load_pfm(path)


def test_kitti_decode(tmp_path):
    path = tmp_path / "d.png"
    write_png16(path, np.array([[256, 0, 43887]], dtype=np.uint16))
    d, m = load_kitti_disparity(path)
    assert d[0, 0, :, 0].tolist() == [1.0, 0.0, 171.43359375]
    assert m[0, 0, :, 0].tolist() == [1, 0, 1]


def test_kitti_rejects_8bit(tmp_path):
    path = tmp_path / "d8.png"
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(path)
    with pytest.raises(ImageFormatError):
        load_kitti_disparity(path)


def test_kitti_normalize_round_trip_exact(tmp_path):
    raw = np.random.default_rng(1).integers(1, 65535, (4, 6)).astype(np.uint16)
    write_png16(tmp_path / "d.png", raw)
    d, _ = load_kitti_disparity(tmp_path / "d.png")
    dmax = 256.0
    back = denormalize_disparity(normalize_disparity(d, dmax), dmax, np.float32)
    assert np.array_equal(back[0, ..., 0], raw / np.float32(256))


def _sample(h, w, dmax=192.0, disparity=None, raw=None):
    z = np.zeros((1, h, w, 3), np.float32)
    d = np.zeros((1, h, w, 1), np.float32) if disparity is None else disparity
    return StereoSample(z, z, d, np.ones((1, h, w, 1), np.float32), dmax, raw_max_disparity=raw)


def test_crop_kitti_geometry():
    s = _sample(376, 1241)
    s.disparity[0, -1, 8, 0] = 5.0  # bottom row, first cropped column
    c = crop_kitti(s)
    assert c.shape == (200, 1224)
    assert c.disparity[0, -1, 0, 0] == 5.0
    again = crop_kitti(c)
    assert all(np.array_equal(getattr(a, k), getattr(c, k)) for a in [again]
               for k in ("left", "right", "disparity", "valid_mask"))


def test_crop_kitti_too_small():
    with pytest.raises(ValueError):
        crop_kitti(_sample(100, 1241))


def test_normalize_examples(caplog):
    assert normalize_disparity(np.array([96.0]), 192)[0] == 0.5
    with caplog.at_level(logging.WARNING):
        out = normalize_disparity(np.array([10.0, 300.0, 400.0]), 192)
    assert out[1:].tolist() == [1.0, 1.0]
    assert "2 disparity values" in caplog.text
    with pytest.raises(ValueError):
        normalize_disparity(np.array([1.0]), 0)
    with pytest.raises(ValueError):
        denormalize_disparity(np.array([1.0]), -1)


# Quotients below the float32 normal range lose bits; disparities never get there.
_DISP = st.one_of(st.just(0.0), st.floats(2.0 ** -100, 192, width=32))


@settings(max_examples=300, deadline=None)
@given(_DISP, st.sampled_from([32.0, 100.0, 192.0, 227.0, 171.43359375]))
def test_normalize_inverse_exact_for_float32(x, dmax):
    x = np.float32(min(x, dmax))
    assert denormalize_disparity(normalize_disparity(x, dmax), dmax, np.float32) == x


@pytest.mark.parametrize("dmax", [32.0, 100.0, 192.0, 227.0])
def test_normalize_inverse_exact_on_kitti_grid(dmax):
    x = np.arange(int(dmax * 256) + 1, dtype=np.float32) / 256
    assert np.array_equal(denormalize_disparity(normalize_disparity(x, dmax), dmax, np.float32), x)


@settings(max_examples=200, deadline=None)
@given(_DISP)
def test_normalize_inverse_float64_within_one_ulp(x):
    x = min(float(x) * (1 + 1e-9), 192.0)
    back = denormalize_disparity(normalize_disparity(x, 192.0), 192.0)
    assert abs(back - x) <= np.spacing(x)


def test_split_ten_samples():
    samples = [_sample(2, 8) for _ in range(10)]
    train, test, rejected = split_filter(samples, seed=0)
    assert (len(train), len(test), rejected) == (9, 1, 0)
    assert not set(train.indices) & set(test.indices)
    assert sorted(train.indices + test.indices) == list(range(10))
    assert (train.split, test.split) == ("train", "test")


def test_split_rejects_unrealistic_disparity():
    d = np.zeros((1, 1, 960, 1), np.float32)
    d[0, 0, 5, 0] = 10_500
    bad = _sample(1, 960, dmax=20_000, disparity=d)
    samples = [_sample(1, 960) for _ in range(10)] + [bad]
    train, test, rejected = split_filter(samples, seed=3)
    assert rejected == 1 and 10 not in train.indices + test.indices
    # Width-exceeding maxima recorded before masking count too.
    flagged = _sample(1, 960, raw=10_500.0)
    assert split_filter([flagged, _sample(1, 960)], 0)[2] == 1


def test_split_deterministic_and_seed_sensitive():
    samples = [_sample(2, 8) for _ in range(30)]
    a, b = split_filter(samples, 7), split_filter(samples, 7)
    assert a[0].indices == b[0].indices and a[1].indices == b[1].indices
    assert split_filter(samples, 8)[0].indices != a[0].indices


def test_split_all_rejected():
    with pytest.raises(ValueError):
        split_filter([_sample(1, 8, raw=9.0)], 0)
    with pytest.raises(ValueError):
        split_filter([], 0)


def test_sample_invariants():
    with pytest.raises(ValueError):
        _sample(2, 8, dmax=1.0, disparity=np.full((1, 2, 8, 1), 2.0, np.float32))
    z = np.zeros((1, 2, 8, 3), np.float32)
    with pytest.raises(ValueError):
        StereoSample(z, z[:, :1], z[..., :1], z[..., :1], 4.0)


@pytest.fixture(scope="module")
def synth():
    return synth_generate(4, 32, 48, 12.0, seed=2)


def test_synth_shift_property(synth):
    for s in synth:
        d = s.disparity[0, ..., 0].astype(int)
        ys, xs = np.nonzero(s.valid_mask[0, ..., 0])
        assert len(ys) > 0.5 * s.valid_mask.size
        assert np.array_equal(s.left[0, ys, xs], s.right[0, ys, xs - d[ys, xs]])


def test_synth_rectangle_at_disparity_ten():
    for s in synth_generate(6, 32, 64, 12.0, seed=4):
        d = s.disparity[0, ..., 0]
        m = (d == 10) & (s.valid_mask[0, ..., 0] > 0)
        if m.any():
            ys, xs = np.nonzero(m)
            assert np.array_equal(s.right[0, ys, xs - 10], s.left[0, ys, xs])
            return
    pytest.fail("no disparity-10 region generated")


def test_synth_zero_disparity_identity():
    # A row with zero disparity everywhere holds only the unshifted background.
    checked = 0
    for s in synth_generate(8, 32, 32, 8.0, seed=0):
        for y in np.nonzero((s.disparity[0, :, :, 0] == 0).all(axis=1))[0]:
            assert np.array_equal(s.left[0, y], s.right[0, y])
            checked += 1
    assert checked > 0


def test_synth_self_consistency(synth):
    for s in synth:
        back = denormalize_disparity(normalize_disparity(s.disparity, s.dmax), s.dmax)
        assert epe(back, s.disparity, s.valid_mask) == 0.0


def test_synth_deterministic():
    a, b = synth_generate(2, 16, 24, 6.0, 9), synth_generate(2, 16, 24, 6.0, 9)
    for x, y in zip(a, b):
        assert x.left.tobytes() == y.left.tobytes() and x.disparity.tobytes() == y.disparity.tobytes()


def test_synth_rejects_large_dmax():
    with pytest.raises(ValueError):
        synth_generate(1, 16, 24, 24.0, 0)


def test_dataset_round_trip(tmp_path, synth):
    save_dataset(tmp_path, synth, {"count": 4, "H": 32, "W": 48, "dmax": 12.0, "seed": 2})
    assert read_meta(tmp_path / "meta.cfg")["count"] == "4"
    loaded, meta = load_dataset(tmp_path, channels=3)
    assert float(meta["dmax"]) == 12.0
    for a, b in zip(synth, loaded):
        assert np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)
        assert np.array_equal(a.valid_mask, b.valid_mask)
        assert np.array_equal(a.disparity * a.valid_mask, b.disparity * b.valid_mask)


def test_grayscale_replicated(tmp_path):
    Image.fromarray(np.full((4, 5), 51, np.uint8)).save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png", channels=3)
    assert img.shape == (1, 4, 5, 3) and np.all(img == np.float32(0.2))
