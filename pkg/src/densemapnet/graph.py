"""DenseMapNet layer graph: construction plus forward and backward execution."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import INFERENCE, OpContext, ShapeError

SOURCES = ("left", "right")
KINDS = ("conv", "conv_transpose", "bn", "relu", "dropout", "maxpool",
         "upsample", "zeropad", "concat", "sigmoid")
CONV_KINDS = ("conv", "conv_transpose")
TRAINABLE_ROLES = ("kernel", "bias", "gamma", "beta")
STAT_ROLES = ("running_mean", "running_var")
SINK = "Sigmoid_1"
POOL = 8


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple
    kernel: int = 0
    dilation: int = 1
    out_channels: int = 0
    partition: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r} for {self.name}")


class GraphStateError(RuntimeError):
    """Backward requested without a retained forward pass."""


class _Builder:
    def __init__(self, channels):
        self.layers = []
        self.width = {"left": channels, "right": channels}

    def add(self, spec: LayerSpec, width: int) -> str:
        if spec.name in self.width:
            raise ValueError(f"duplicate layer name {spec.name}")
        missing = [i for i in spec.inputs if i not in self.width]
        if missing:
            raise ValueError(f"{spec.name} references undeclared inputs {missing}")
        self.layers.append(spec)
        self.width[spec.name] = width
        return spec.name

    def concat(self, name, inputs):
        return self.add(LayerSpec(name, "concat", tuple(inputs)), sum(self.width[i] for i in inputs))

    def conv_block(self, tag, src, kernel, cout, dilation, partition, dropout=True):
        """Conv -> BN -> ReLU (-> Dropout); returns the block's output name."""
        x = self.add(LayerSpec(f"Conv2D_{tag}", "conv", (src,), kernel, dilation, cout, partition), cout)
        x = self.add(LayerSpec(f"BN_{tag}", "bn", (x,), out_channels=cout), cout)
        x = self.add(LayerSpec(f"ReLU_{tag}", "relu", (x,), out_channels=cout), cout)
        if dropout:
            x = self.add(LayerSpec(f"Dropout_{tag}", "dropout", (x,), out_channels=cout), cout)
        return x

    def unary(self, name, kind, src):
        return self.add(LayerSpec(name, kind, (src,), out_channels=self.width[src]), self.width[src])


def build_densemapnet(channels=3, dmax=192.0, seed=0, dtype=np.float32):
    """Build the DenseMapNet graph for ``channels``-channel stereo pairs.

    Kernels are drawn from U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases and BN
    shifts start at 0, BN scales at 1.
    """
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    if not dmax > 0:
        raise ValueError(f"dmax must be positive, got {dmax}")
    b = _Builder(channels)

    # Correspondence network.
    x = b.concat("Concat_1", ["left", "right"])
    x = b.conv_block("1", x, 5, 32, 1, "correspondence")
    pooled = b.unary("MaxPooling_1", "maxpool", x)
    corr = [pooled]
    for i in range(1, 5):
        corr.append(b.conv_block(f"C{i}", corr[-1], 5, 32, i, "correspondence"))
    stack = b.concat("Concat_2", corr)

    # Disparity network: dense layers over the pooled left-image features.
    x = b.conv_block("2", "left", 5, 16, 1, "disparity")
    newest = b.unary("MaxPooling_2", "maxpool", x)
    for i in range(1, 5):
        stack = b.concat(f"Concat_D{i}", [newest, stack])
        x = b.conv_block(f"m{i}", stack, 1, 64, 1, "disparity", dropout=False)
        newest = b.conv_block(f"n{i}", x, 5, 16, i, "disparity")
    x = b.concat("Concat_3", [newest, stack])
    x = b.conv_block("4", x, 1, 32, 1, "disparity", dropout=False)
    x = b.unary("UpSampling_1", "upsample", x)
    up = b.unary("ZeroPadding_1", "zeropad", x)
    full = b.conv_block("3", "left", 5, 1, 1, "disparity")
    x = b.concat("Concat_4", [up, full])
    c5 = b.conv_block("5", x, 5, 16, 1, "disparity")
    x = b.concat("Concat_5", [x, c5])
    x = b.add(LayerSpec("Conv2DT_1", "conv_transpose", (x,), 9, 1, 1, "disparity"), 1)
    b.unary(SINK, "sigmoid", x)

    graph = ModelGraph(b.layers, channels=channels, dmax=float(dmax))
    graph.init_parameters(seed, dtype)
    return graph


class ModelGraph:
    """Topologically ordered layers plus a parameter store keyed by layer name.

    Not reentrant: ``forward`` keeps the intermediates that ``backward`` needs
    on the instance.
    """

    def __init__(self, layers, channels, dmax):
        self.layers = list(layers)
        self.channels = channels
        self.dmax = dmax
        self.by_name = {layer.name: layer for layer in self.layers}
        self.params = {}
        self.in_channels = {}
        width = {s: channels for s in SOURCES}
        for layer in self.layers:
            cin = [width[i] for i in layer.inputs]
            self.in_channels[layer.name] = cin
            width[layer.name] = sum(cin) if layer.kind == "concat" else (layer.out_channels or cin[0])
        self.width = width
        self.dropout_sites = {l.name: i for i, l in enumerate(l for l in self.layers if l.kind == "dropout")}
        self._requires_grad = {s: False for s in SOURCES}
        for layer in self.layers:
            self._requires_grad[layer.name] = (
                layer.kind in CONV_KINDS + ("bn",) or any(self._requires_grad[i] for i in layer.inputs)
            )
        consumers = {}
        for layer in self.layers:
            for i in layer.inputs:
                consumers[i] = consumers.get(i, 0) + 1
        self._consumers = consumers
        self._record = None

    # -- parameters ---------------------------------------------------------

    def init_parameters(self, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.params = {}
        for layer in self.layers:
            if layer.kind in CONV_KINDS:
                cin = self.in_channels[layer.name][0]
                k = layer.kernel
                bound = np.sqrt(6.0 / (k * k * cin))
                self.params[layer.name] = {
                    "kernel": rng.uniform(-bound, bound, (k, k, cin, layer.out_channels)).astype(dtype),
                    "bias": np.zeros(layer.out_channels, dtype=dtype),
                }
            elif layer.kind == "bn":
                c = layer.out_channels
                self.params[layer.name] = {
                    "gamma": np.ones(c, dtype=dtype),
                    "beta": np.zeros(c, dtype=dtype),
                    "running_mean": np.zeros(c, dtype=dtype),
                    "running_var": np.ones(c, dtype=dtype),
                }

    def iter_parameters(self, trainable=None):
        """Yield ``(layer, role, array)`` in graph order."""
        for name, group in self.params.items():
            for role, arr in group.items():
                if trainable is None or (role in TRAINABLE_ROLES) == trainable:
                    yield name, role, arr

    def astype(self, dtype):
        clone = copy.copy(self)
        clone.params = {n: {r: a.astype(dtype) for r, a in g.items()} for n, g in self.params.items()}
        clone._record = None
        return clone

    def conv_layers(self, partition=None):
        return [l for l in self.layers if l.kind in CONV_KINDS and (partition is None or l.partition == partition)]

    def concat_widths(self):
        return {l.name: self.width[l.name] for l in self.layers if l.kind == "concat"}

    # -- execution ----------------------------------------------------------

    def forward(self, left, right, ctx: OpContext = None, update_stats=True, retain=True):
        """Run the graph; returns the ``[N,H,W,1]`` sigmoid output.

        In train mode BN running statistics are updated unless
        ``update_stats`` is False. With ``retain=False`` intermediates are
        freed as soon as their last consumer has run and ``backward`` is
        unavailable.
        """
        ctx = ctx or OpContext(INFERENCE)
        left = ops.check_tensor(left, "left")
        right = ops.check_tensor(right, "right")
        if left.shape != right.shape:
            raise ShapeError(f"left {left.shape} and right {right.shape} differ")
        if left.shape[3] != self.channels:
            raise ShapeError(f"model expects {self.channels} channels, got {left.shape[3]}")
        if left.shape[1] < POOL or left.shape[2] < POOL:
            raise ShapeError(f"H and W must be >= {POOL}, got {left.shape[1:3]}")
        dtype = next(iter(self.params.values()))["kernel"].dtype
        acts = {"left": left.astype(dtype, copy=False), "right": right.astype(dtype, copy=False)}
        caches = {}
        remaining = dict(self._consumers)
        target_hw = left.shape[1:3]
        new_stats = {}

        for layer in self.layers:
            xs = [acts[i] for i in layer.inputs]
            p = self.params.get(layer.name)
            kind = layer.kind
            if kind == "concat":
                out = ops.concat_channels(xs)
                cache = [x.shape[3] for x in xs]
            elif kind == "conv":
                out, cache = ops.conv2d(xs[0], p["kernel"], p["bias"], layer.dilation, ctx)
            elif kind == "conv_transpose":
                out, cache = ops.conv2d_transpose(xs[0], p["kernel"], p["bias"], ctx)
            elif kind == "bn":
                out, cache, rm, rv = ops.batch_norm(xs[0], p["gamma"], p["beta"], p["running_mean"],
                                                    p["running_var"], ctx)
                new_stats[layer.name] = (rm, rv)
            elif kind == "relu":
                out, cache = ops.relu(xs[0]), xs[0]
            elif kind == "dropout":
                out, cache = ops.dropout(xs[0], ops.DROPOUT_RATE, ctx.substream(self.dropout_sites[layer.name]))
            elif kind == "maxpool":
                out, cache = ops.max_pool(xs[0], POOL)
            elif kind == "upsample":
                out, cache = ops.upsample_nearest(xs[0], POOL), None
            elif kind == "zeropad":
                out, cache = ops.zero_pad(xs[0], *target_hw), xs[0].shape
            else:
                out = ops.sigmoid(xs[0])
                cache = out
            acts[layer.name] = out
            if retain:
                caches[layer.name] = cache
            else:
                for i in layer.inputs:
                    remaining[i] -= 1
                    if remaining[i] == 0:
                        del acts[i]

        if ctx.training and update_stats:
            for name, (rm, rv) in new_stats.items():
                self.params[name]["running_mean"] = rm.astype(dtype, copy=False)
                self.params[name]["running_var"] = rv.astype(dtype, copy=False)
        self._record = caches if retain else None
        return acts[SINK]

    def backward(self, dout):
        """Gradients of every trainable parameter given d(loss)/d(output).

        Returns ``{layer: {role: grad}}``. Gradients arriving at a layer from
        several consumers (the dense concatenations) are summed.
        """
        if self._record is None:
            raise GraphStateError("backward() called without a retained forward pass")
        caches = self._record
        grads = {}
        pending = {SINK: np.asarray(dout)}
        for layer in reversed(self.layers):
            g = pending.pop(layer.name, None)
            if g is None:
                continue
            cache = caches[layer.name]
            kind = layer.kind
            need_dx = any(self._requires_grad[i] for i in layer.inputs)
            if kind == "concat":
                dxs = ops.concat_channels_backward(g, cache)
            elif kind == "conv":
                dx, dk, db = ops.conv2d_backward(g, cache, need_dx)
                grads[layer.name] = {"kernel": dk, "bias": db}
                dxs = [dx]
            elif kind == "conv_transpose":
                dx, dk, db = ops.conv2d_transpose_backward(g, cache, need_dx)
                grads[layer.name] = {"kernel": dk, "bias": db}
                dxs = [dx]
            elif kind == "bn":
                dx, dgamma, dbeta = ops.batch_norm_backward(g, cache)
                grads[layer.name] = {"gamma": dgamma, "beta": dbeta}
                dxs = [dx]
            elif kind == "relu":
                dxs = [ops.relu_backward(g, cache)]
            elif kind == "dropout":
                dxs = [ops.dropout_backward(g, cache)]
            elif kind == "maxpool":
                dxs = [ops.max_pool_backward(g, cache)]
            elif kind == "upsample":
                dxs = [ops.upsample_nearest_backward(g, POOL)]
            elif kind == "zeropad":
                dxs = [ops.zero_pad_backward(g, cache)]
            else:
                dxs = [ops.sigmoid_backward(g, cache)]
            for name, dx in zip(layer.inputs, dxs):
                if dx is None or not self._requires_grad[name]:
                    continue
                if name in pending:
                    pending[name] = pending[name] + dx
                else:
                    pending[name] = dx
        return grads


def count_parameters(graph: ModelGraph):
    """Return ``(trainable, non_trainable)`` scalar counts."""
    trainable = sum(a.size for _, _, a in graph.iter_parameters(trainable=True))
    frozen = sum(a.size for _, _, a in graph.iter_parameters(trainable=False))
    return int(trainable), int(frozen)


def parameter_table(graph: ModelGraph):
    """Per-layer ``(name, kind, trainable, non_trainable)`` rows."""
    rows = []
    for layer in graph.layers:
        group = graph.params.get(layer.name)
        if not group:
            continue
        t = sum(a.size for r, a in group.items() if r in TRAINABLE_ROLES)
        s = sum(a.size for r, a in group.items() if r in STAT_ROLES)
        rows.append((layer.name, layer.kind, int(t), int(s)))
    return rows
