"""Masked binary cross-entropy and the RMSprop epoch loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import normalize_disparity
from .ops import TRAIN, OpContext

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 1e-6
    rho: float = 0.9
    epsilon: float = 1e-7
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    dmax: float = 192.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if not self.dmax > 0:
            raise ValueError("dmax must be > 0")


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0


def bce_loss(pred, target, mask=None):
    """Masked mean binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [1e-7, 1-1e-7] for both the loss and the gradient.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    mask = np.ones_like(pred) if mask is None else np.asarray(mask)
    if mask.shape != pred.shape:
        raise ValueError(f"mask {mask.shape} does not match pred {pred.shape}")
    total = float(np.sum(mask, dtype=np.float64))
    if total <= 0:
        raise ValueError("bce_loss: mask selects no valid pixels")
    p = np.clip(pred.astype(np.float64), PRED_CLAMP, 1 - PRED_CLAMP)
    t = target.astype(np.float64)
    m = mask.astype(np.float64)
    loss = -float(np.sum(m * (t * np.log(p) + (1 - t) * np.log1p(-p)))) / total
    grad = m * (p - t) / (p * (1 - p) * total)
    return loss, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


def learning_rate_at(cfg: TrainConfig, step):
    return cfg.learning_rate / (1.0 + cfg.decay * step)


def rmsprop_step(params, grads, state: OptimizerState, cfg: TrainConfig):
    """Plain RMSprop update in place on ``params`` (``{layer: {role: array}}``).

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves parameters and state untouched.
    """
    for layer, group in grads.items():
        for role, g in group.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {layer}.{role}", layer=layer)
    lr = learning_rate_at(cfg, state.step)
    for layer, group in grads.items():
        for role, g in group.items():
            p = params[layer][role]
            key = (layer, role)
            v = state.velocity.get(key)
            if v is None:
                v = np.zeros_like(p)
            v = cfg.rho * v + (1 - cfg.rho) * (g * g)
            state.velocity[key] = v.astype(p.dtype, copy=False)
            params[layer][role] = (p - lr * g / (np.sqrt(v) + cfg.epsilon)).astype(p.dtype, copy=False)
    state.step += 1
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    epe: float
    lr: float
    seconds: float

    def format(self, timing=True):
        line = f"epoch={self.epoch} loss={self.loss:.6f} epe={self.epe:.6f} lr={self.lr:.6e}"
        return line + (f" seconds={self.seconds:.3f}" if timing else "")


def parse_log_line(line):
    fields = dict(part.split("=", 1) for part in line.split())
    return EpochRecord(int(fields["epoch"]), float(fields["loss"]), float(fields["epe"]),
                       float(fields["lr"]), float(fields.get("seconds", "nan")))


def stack_batch(samples, dmax):
    left = np.concatenate([s.left for s in samples])
    right = np.concatenate([s.right for s in samples])
    disparity = np.concatenate([s.disparity for s in samples])
    mask = np.concatenate([s.valid_mask for s in samples]).astype(left.dtype)
    target = normalize_disparity(disparity, dmax).astype(left.dtype)
    return left, right, disparity, target, mask


def fit(graph, samples, cfg: TrainConfig, state: OptimizerState = None, on_epoch=None, on_checkpoint=None):
    """Train ``graph`` in place; returns ``(records, state)``.

    Each epoch shuffles with ``(seed, epoch)``, keeps the last partial batch,
    and reports the pixel-weighted BCE and the train-mode EPE in pixels.
    ``on_checkpoint(graph, epoch)`` fires every ``checkpoint_every`` epochs
    and after the last one; ``on_epoch(record)`` after every epoch.
    """
    if not samples:
        raise ValueError("fit needs a non-empty dataset")
    state = state or OptimizerState()
    records = []
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = err_sum = weight = 0.0
        for b0 in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[b0:b0 + cfg.batch_size]]
            left, right, disparity, target, mask = stack_batch(batch, cfg.dmax)
            ctx = OpContext(TRAIN, rng_seed=cfg.seed, rng_stream_id=state.step)
            pred = graph.forward(left, right, ctx)
            loss, dpred = bce_loss(pred, target, mask)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {state.step}")
            rmsprop_step(graph.params, graph.backward(dpred), state, cfg)
            valid = float(mask.sum(dtype=np.float64))
            loss_sum += loss * valid
            err_sum += float(np.sum(mask * np.abs(pred.astype(np.float64) * cfg.dmax - disparity)))
            weight += valid
        record = EpochRecord(epoch, loss_sum / weight, err_sum / weight,
                             learning_rate_at(cfg, state.step), time.perf_counter() - started)
        records.append(record)
        log.info(record.format())
        if on_epoch:
            on_epoch(record)
        if on_checkpoint and (epoch == cfg.epochs or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0)):
            on_checkpoint(graph, epoch)
    return records, state


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
