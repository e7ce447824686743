"""Disparity metrics, depth conversion, disparity image output, throughput."""
from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import write_png16
from .ops import INFERENCE, OpContext


@dataclass
class EvalReport:
    epe: float
    valid_pixel_count: int
    samples_evaluated: int
    throughput: float = 0.0
    wall_seconds: float = 0.0

    def format(self, timing=True):
        lines = [f"epe={self.epe:.6f}", f"valid_pixel_count={self.valid_pixel_count}",
                 f"samples_evaluated={self.samples_evaluated}"]
        if timing:
            lines += [f"throughput={self.throughput:.4f}", f"wall_seconds={self.wall_seconds:.3f}"]
        return "\n".join(lines)


def _masked_abs_sum(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones_like(pred) if mask is None else np.asarray(mask, dtype=np.float64)
    if pred.shape != gt.shape or mask.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    return float(np.sum(mask * np.abs(pred - gt))), float(np.sum(mask))


def epe(pred_px, gt_px, mask=None):
    """Mean absolute disparity error over valid pixels (f64 accumulation)."""
    err, count = _masked_abs_sum(pred_px, gt_px, mask)
    if count <= 0:
        raise ValueError("epe: mask selects no valid pixels")
    return err / count


def depth_from_disparity(d, f, baseline):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("disparity must be > 0 (zero or negative marks invalid/occluded pixels)")
    out = f * baseline / d
    return float(out) if out.ndim == 0 else out


def to_gray16(pred_px):
    d = np.asarray(pred_px, dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("disparity map must be finite and non-negative")
    return np.clip(np.rint(d * 256.0), 0, 0xFFFF).astype(np.uint16)


def colormap(pred_px, dmax):
    """Piecewise-linear blue -> green -> red over [0, dmax]; uint8 RGB."""
    t = np.clip(np.asarray(pred_px, dtype=np.float64) / dmax, 0.0, 1.0)
    r = np.clip(2 * t - 1, 0, 1)
    g = 1 - np.abs(2 * t - 1)
    b = np.clip(1 - 2 * t, 0, 1)
    return np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def _plane(pred_px):
    arr = np.asarray(pred_px)
    if arr.ndim == 4:
        if arr.shape[0] != 1 or arr.shape[3] != 1:
            raise ValueError(f"expected a single [1,H,W,1] map, got {arr.shape}")
        arr = arr[0, ..., 0]
    return arr


def emit_disparity_png(pred_px, path, mode="gray16", dmax=None):
    plane = _plane(pred_px)
    if mode == "gray16":
        write_png16(path, to_gray16(plane))
    elif mode == "colormap":
        to_gray16(plane)  # same finiteness / sign contract
        Image.fromarray(colormap(plane, dmax if dmax else max(float(plane.max()), 1e-12))).save(path)
    else:
        raise ValueError(f"unknown mode {mode!r}")


def evaluate(graph, samples, dmax, batch_size=1):
    """Inference-mode EPE over ``samples``."""
    err = count = 0.0
    started = time.perf_counter()
    for b0 in range(0, len(samples), batch_size):
        batch = samples[b0:b0 + batch_size]
        left = np.concatenate([s.left for s in batch])
        right = np.concatenate([s.right for s in batch])
        pred = graph.forward(left, right, OpContext(INFERENCE), retain=False)
        e, c = _masked_abs_sum(pred.astype(np.float64) * dmax,
                               np.concatenate([s.disparity for s in batch]),
                               np.concatenate([s.valid_mask for s in batch]))
        err += e
        count += c
    wall = time.perf_counter() - started
    if count <= 0:
        raise ValueError("evaluate: no valid pixels in the dataset")
    return EvalReport(epe=err / count, valid_pixel_count=int(count), samples_evaluated=len(samples),
                      throughput=len(samples) / wall if wall > 0 else 0.0, wall_seconds=wall)


@dataclass
class BenchResult:
    images_per_second: float
    median_seconds: float
    iterations: int
    checksum: str
    deterministic: bool

    def format(self, timing=True):
        lines = [f"iterations={self.iterations}", f"checksum={self.checksum}",
                 f"deterministic={int(self.deterministic)}"]
        if timing:
            lines = [f"images_per_second={self.images_per_second:.4f}",
                     f"median_seconds={self.median_seconds:.4f}"] + lines
        return "\n".join(lines)


def benchmark_throughput(graph, shape, iterations=10, warmup=2, seed=0):
    """Median-of-runs inference throughput on a fixed random pair.

    ``shape`` is ``(H, W)`` or ``(N, H, W)``. The output of every timed run
    must be bit-identical to the first warm-up output.
    """
    if iterations < 10 or warmup < 2:
        raise ValueError("benchmark needs iterations >= 10 and warmup >= 2")
    n, h, w = (1, *shape) if len(shape) == 2 else shape
    rng = np.random.default_rng(seed)
    left = rng.random((n, h, w, graph.channels), dtype=np.float32)
    right = rng.random((n, h, w, graph.channels), dtype=np.float32)
    ctx = OpContext(INFERENCE)
    reference = None
    for _ in range(warmup):
        reference = graph.forward(left, right, ctx, retain=False)
    times = []
    identical = True
    for _ in range(iterations):
        t0 = time.perf_counter()
        out = graph.forward(left, right, ctx, retain=False)
        times.append(time.perf_counter() - t0)
        identical &= bool(np.array_equal(out, reference))
    median = statistics.median(times)
    return BenchResult(images_per_second=n / median, median_seconds=median, iterations=iterations,
                       checksum=hashlib.sha256(reference.tobytes()).hexdigest()[:16],
                       deterministic=identical)
