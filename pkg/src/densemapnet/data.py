"""Stereo dataset I/O plus a synthetic generator with exact ground truth."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

KITTI_CROP_W = 1224
KITTI_CROP_H = 200
TRAIN_FRACTION = 0.9


class PFMError(ValueError):
    """Base class for PFM parse failures."""


class PFMMagicError(PFMError):
    pass


class PFMHeaderError(PFMError):
    pass


class PFMTruncatedError(PFMError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    disparity: np.ndarray
    valid_mask: np.ndarray
    dmax: float
    # Largest valid disparity before out-of-range pixels were masked.
    raw_max_disparity: float = None

    def __post_init__(self):
        shapes = {a.shape[:3] for a in (self.left, self.right, self.disparity, self.valid_mask)}
        if len(shapes) != 1 or self.left.ndim != 4 or self.left.shape[0] != 1:
            raise ValueError("left, right, disparity and valid_mask must share a [1,H,W] shape")
        if self.disparity.shape[3] != 1 or self.valid_mask.shape[3] != 1:
            raise ValueError("disparity and valid_mask must be single-channel")
        valid = self.valid_mask > 0
        d = self.disparity[valid]
        if d.size and (d.min() < 0 or d.max() > self.dmax):
            raise ValueError(f"valid disparities must lie in [0, {self.dmax}]")

    @property
    def shape(self):
        return self.left.shape[1:3]


@dataclass(frozen=True)
class DatasetIndex:
    indices: tuple
    split: str
    seed: int

    def __len__(self):
        return len(self.indices)

    def select(self, samples):
        return [samples[i] for i in self.indices]


# -- PFM ---------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(\S+)")


def load_pfm(path, absolute=True):
    """Read a single-channel ``Pf`` map as ``[1,H,W,1]`` float32, top row first.

    Scene Flow stores some disparities with a sign; ``absolute`` folds it away.
    """
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise PFMHeaderError(f"{path}: incomplete PFM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w_tok, h_tok, s_tok = tokens
    if magic != b"Pf":
        raise PFMMagicError(f"{path}: expected 'Pf' magic, got {magic[:8]!r}")
    try:
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError:
        raise PFMHeaderError(f"{path}: malformed dims/scale {w_tok!r} {h_tok!r} {s_tok!r}") from None
    if width <= 0 or height <= 0 or not math.isfinite(scale) or scale == 0:
        raise PFMHeaderError(f"{path}: invalid dims {width}x{height} or scale {scale}")
    pos += 1  # single whitespace byte after the scale
    endian = "<" if scale < 0 else ">"
    count = width * height
    payload = raw[pos:pos + 4 * count]
    if len(payload) < 4 * count:
        raise PFMTruncatedError(f"{path}: payload has {len(payload)} bytes, need {4 * count}")
    data = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width)
    data = np.flipud(data).astype(np.float32)
    if absolute:
        data = np.abs(data)
    return data.reshape(1, height, width, 1)


def write_pfm(path, disparity, little_endian=True):
    arr = np.asarray(disparity, dtype=np.float32)
    arr = arr.reshape(arr.shape[-3], arr.shape[-2]) if arr.ndim == 4 else arr.squeeze()
    if arr.ndim != 2:
        raise ValueError(f"write_pfm expects a single-channel map, got shape {np.shape(disparity)}")
    h, w = arr.shape
    endian = "<" if little_endian else ">"
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n%s\n" % (w, h, b"-1.0" if little_endian else b"1.0"))
        f.write(np.flipud(arr).astype(endian + "f4").tobytes())


# -- images and KITTI ground truth ---------------------------------------------

def load_image(path, channels=3):
    """8-bit PNG/PPM to ``[1,H,W,channels]`` float32 in [0,1].

    Grayscale sources are replicated when three channels are requested.
    """
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB", "RGBA", "P"):
            raise ImageFormatError(f"{path}: unsupported image mode {img.mode}")
        arr = np.asarray(img.convert("L" if channels == 1 or img.mode == "L" else "RGB"))
    arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 1 and channels == 3:
        arr = np.repeat(arr, 3, axis=2)
    return arr[None]


def save_image(path, image):
    arr = np.asarray(image)
    arr = arr.reshape(arr.shape[-3:]) if arr.ndim == 4 else arr
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path)


def read_png16(path):
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise ImageFormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode}")
        raw = np.asarray(img)
    if raw.min() < 0 or raw.max() > 0xFFFF:
        raise ImageFormatError(f"{path}: values outside the uint16 range")
    return raw.astype(np.uint16)


def write_png16(path, raw):
    raw = np.asarray(raw)
    if raw.dtype != np.uint16:
        raise ValueError("write_png16 expects uint16 data")
    Image.fromarray(raw).save(path)


def load_kitti_disparity(path):
    """Decode a KITTI uint16 disparity PNG: ``d = raw / 256``, ``raw == 0`` invalid."""
    raw = read_png16(path)
    disparity = (raw.astype(np.float32) / 256.0)[None, ..., None]
    mask = (raw > 0).astype(np.float32)[None, ..., None]
    return disparity, mask


def crop_kitti(sample: StereoSample, width=KITTI_CROP_W, height=KITTI_CROP_H):
    """Bottom-anchored, horizontally centred crop."""
    H, W = sample.shape
    if H < height or W < width:
        raise ValueError(f"sample {W}x{H} is smaller than the {width}x{height} crop")
    y0, x0 = H - height, (W - width) // 2
    window = (slice(None), slice(y0, y0 + height), slice(x0, x0 + width), slice(None))
    return StereoSample(sample.left[window], sample.right[window], sample.disparity[window],
                        sample.valid_mask[window], sample.dmax)


# -- normalisation, filtering, splitting --------------------------------------

def normalize_disparity(gt, dmax):
    """``clip(gt, 0, dmax) / dmax`` as float64.

    Working in float64 makes :func:`denormalize_disparity` an exact inverse
    for float32 ground truth once cast back with ``dtype=np.float32``.
    """
    if not dmax > 0:
        raise ValueError(f"dmax must be positive, got {dmax}")
    gt = np.asarray(gt, dtype=np.float64)
    over = int(np.count_nonzero(gt > dmax))
    if over:
        log.warning("%d disparity values above dmax=%g clipped to 1.0", over, dmax)
    return np.clip(gt, 0, dmax) / float(dmax)


def denormalize_disparity(pred, dmax, dtype=None):
    if not dmax > 0:
        raise ValueError(f"dmax must be positive, got {dmax}")
    out = np.asarray(pred, dtype=np.float64) * float(dmax)
    return out if dtype is None else out.astype(dtype)


def max_valid_disparity(disparity, mask):
    valid = np.asarray(mask) > 0
    return float(np.asarray(disparity)[valid].max()) if valid.any() else 0.0


def _sample_max_disparity(sample):
    raw = getattr(sample, "raw_max_disparity", None)
    return raw if raw is not None else max_valid_disparity(sample.disparity, sample.valid_mask)


def split_filter(samples, seed, fraction=TRAIN_FRACTION):
    """Drop samples whose max valid disparity exceeds the image width, then
    shuffle and split ``round(0.9 n)`` / rest (halves round up).

    ``samples`` items need ``disparity``, ``valid_mask`` and ``shape``.
    Returns ``(train_index, test_index, rejected_count)``.
    """
    if not samples:
        raise ValueError("split_filter needs at least one sample")
    kept = [i for i, s in enumerate(samples) if _sample_max_disparity(s) <= s.shape[1]]
    rejected = len(samples) - len(kept)
    if not kept:
        raise ValueError(f"all {len(samples)} samples rejected by the disparity filter")
    order = np.random.default_rng(seed).permutation(len(kept))
    shuffled = tuple(kept[i] for i in order)
    n_train = int(math.floor(fraction * len(kept) + 0.5))
    return (DatasetIndex(shuffled[:n_train], "train", seed),
            DatasetIndex(shuffled[n_train:], "test", seed),
            rejected)


# -- synthetic stereo ------------------------------------------------------------

def _texture(rng, h, w, channels):
    base = rng.uniform(0.15, 0.85, size=channels)
    noise = rng.uniform(-0.15, 0.15, size=(h, w, channels))
    # Snap to the 8-bit grid so PNG storage is lossless.
    return np.rint(np.clip(base + noise, 0.0, 1.0) * 255).astype(np.float32) / np.float32(255)


def synth_generate(count, height, width, dmax, seed, channels=3):
    """Random rectified stereo pairs with exact integer disparity.

    Each scene is a textured background plane at a small disparity plus 2-5
    textured fronto-parallel rectangles at random disparities up to ``dmax``;
    nearer (larger disparity) rectangles occlude farther ones. The right view
    shows every layer shifted left by its disparity. Left pixels whose match
    falls outside the right image or is hidden there are marked invalid.
    """
    dmax_int = int(math.floor(dmax))
    if dmax >= width:
        raise ValueError(f"dmax ({dmax}) must be smaller than the image width ({width})")
    if dmax_int < 1 or height < 1 or width < 1 or count < 0:
        raise ValueError("invalid synthetic dataset dimensions")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        d_bg = int(rng.integers(0, max(1, dmax_int // 8) + 1))
        layers = [(d_bg, 0, 0, height, width + dmax_int, _texture(rng, height, width + dmax_int, channels))]
        for _ in range(int(rng.integers(2, 6))):
            h = int(rng.integers(height // 6, height // 2 + 1))
            w = int(rng.integers(width // 8, width // 3 + 1))
            y0 = int(rng.integers(0, height - h + 1))
            x0 = int(rng.integers(0, width - w + 1))
            d = int(rng.integers(d_bg + 1, dmax_int + 1)) if d_bg < dmax_int else dmax_int
            layers.append((d, y0, x0, h, w, _texture(rng, h, w, channels)))
        # Paint far to near; stable sort keeps draw order among equal depths.
        layers.sort(key=lambda layer: layer[0])
        left = np.zeros((height, width, channels))
        right = np.zeros((height, width, channels))
        left_id = np.zeros((height, width), dtype=np.int64)
        right_id = np.zeros((height, width), dtype=np.int64)
        disp = np.zeros((height, width))
        for lid, (d, y0, x0, h, w, tex) in enumerate(layers):
            if lid == 0:
                left[:] = tex[:, :width]
                right[:] = tex[:, d:d + width]
                disp[:] = d
                continue
            left[y0:y0 + h, x0:x0 + w] = tex
            left_id[y0:y0 + h, x0:x0 + w] = lid
            disp[y0:y0 + h, x0:x0 + w] = d
            r0, r1 = max(0, x0 - d), x0 + w - d
            if r1 > 0:
                right[y0:y0 + h, r0:r1] = tex[:, r0 - (x0 - d):]
                right_id[y0:y0 + h, r0:r1] = lid
        cols = np.arange(width)[None, :] - disp.astype(np.int64)
        inside = cols >= 0
        rows = np.broadcast_to(np.arange(height)[:, None], cols.shape)
        valid = inside & (right_id[rows, np.clip(cols, 0, None)] == left_id)
        samples.append(StereoSample(
            left=left[None].astype(np.float32),
            right=right[None].astype(np.float32),
            disparity=disp[None, ..., None].astype(np.float32),
            valid_mask=valid[None, ..., None].astype(np.float32),
            dmax=float(dmax),
        ))
    return samples


# -- dataset directory convention -----------------------------------------------

def write_meta(path, meta):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")


def read_meta(path):
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def save_dataset(directory, samples, meta):
    """Write ``left/NNNN.png``, ``right/NNNN.png``, ``disp/NNNN.pfm`` and ``meta.cfg``.

    Invalid pixels are stored as zero disparity and ``mask/NNNN.png`` keeps
    the validity mask so zero-disparity ground truth stays distinguishable.
    """
    root = Path(directory)
    for sub in ("left", "right", "disp", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        save_image(root / "left" / f"{stem}.png", s.left)
        save_image(root / "right" / f"{stem}.png", s.right)
        write_pfm(root / "disp" / f"{stem}.pfm", s.disparity * (s.valid_mask > 0))
        save_image(root / "mask" / f"{stem}.png", s.valid_mask)
    write_meta(root / "meta.cfg", meta)


def load_dataset(directory, channels=3, dmax=None):
    """Load a directory written by :func:`save_dataset`.

    Without a mask directory, pixels with zero disparity count as invalid
    (sparse ground truth convention). Disparity may be PFM or 16-bit PNG.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    meta = read_meta(root / "meta.cfg") if (root / "meta.cfg").exists() else {}
    if dmax is None:
        if "dmax" not in meta:
            raise ValueError(f"{root}: dmax missing from meta.cfg and not given")
        dmax = float(meta["dmax"])
    samples = []
    for left_path in sorted((root / "left").glob("*.png")):
        stem = left_path.stem
        pfm = root / "disp" / f"{stem}.pfm"
        if pfm.exists():
            disparity = load_pfm(pfm)
            mask = (disparity > 0).astype(np.float32)
        else:
            disparity, mask = load_kitti_disparity(root / "disp" / f"{stem}.png")
        mask_path = root / "mask" / f"{stem}.png"
        if mask_path.exists():
            mask = (load_image(mask_path, channels=1) > 0.5).astype(np.float32)
        raw_max = max_valid_disparity(disparity, mask)
        mask = mask * (disparity <= dmax)
        samples.append(StereoSample(load_image(left_path, channels), load_image(root / "right" / left_path.name, channels),
                                    disparity, mask, float(dmax), raw_max_disparity=raw_max))
    if not samples:
        raise FileNotFoundError(f"{root}: no samples found under left/")
    return samples, meta
