"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    non_finite: list = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.worst < self.tolerance

    def __str__(self):
        lines = [f"{name}.max_rel_error={err:.3e}" for name, err in self.max_rel_error.items()]
        lines += [f"{name}.non_finite=1" for name in self.non_finite]
        lines += [f"tolerance={self.tolerance:g}", f"passed={int(self.passed)}"]
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-3):
    """Elementwise |a-n| / max(|a|, |n|, floor).

    The floor turns the measure into an absolute one for gradients much
    smaller than 1, where central differences carry O(h^2) + O(eps/h) noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(op, inputs, tolerance=1e-4, h=1e-5, seed=0, sample=None, floor=1e-3):
    """Compare analytic gradients of ``op`` against central differences.

    ``op(inputs)`` must return ``(output, backward)`` where ``backward(dout)``
    maps each input name to its analytic gradient. The scalar checked is
    ``sum(w * output)`` for a fixed random ``w``; a plain sum would make some
    operators (batch norm) look trivially correct.

    ``inputs`` is a dict of float64 arrays; they are perturbed in place and
    restored. ``sample`` optionally limits the check to that many randomly
    chosen elements per input.
    """
    rng = np.random.default_rng(seed)
    out, backward = op(inputs)
    weights = rng.standard_normal(np.shape(out))
    analytic = backward(weights)
    report = GradCheckReport(tolerance=tolerance)

    def loss():
        return float(np.sum(weights * op(inputs)[0]))

    for name, arr in inputs.items():
        if name not in analytic or analytic[name] is None:
            continue
        grad = np.asarray(analytic[name])
        if not np.all(np.isfinite(grad)):
            report.non_finite.append(name)
            continue
        if not arr.flags.c_contiguous:
            raise ValueError(f"input {name!r} must be C-contiguous to be perturbed in place")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = rng.choice(flat.size, size=sample, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * h)
        if not np.all(np.isfinite(numeric)):
            report.non_finite.append(name)
            continue
        err = relative_error(grad.reshape(-1)[idx], numeric, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report


def check_graph_gradients(graph, left, right, ctx, samples=20, targets=(), tolerance=1e-3,
                          h=1e-5, seed=0, floor=1e-3):
    """Finite-difference check of ``graph.backward`` on sampled parameters.

    ``graph`` should hold float64 parameters. ``samples`` (layer, role, index)
    entries are drawn at random from the trainable parameters; ``targets``
    adds explicit ``(layer, role)`` groups, each checked at one random index.
    Running statistics are left untouched.
    """
    rng = np.random.default_rng(seed)
    out = graph.forward(left, right, ctx, update_stats=False)
    weights = rng.standard_normal(out.shape)
    analytic = graph.backward(weights)
    groups = [(layer, role) for layer, role, _ in graph.iter_parameters(trainable=True)]
    picks = [groups[i] for i in rng.integers(0, len(groups), size=samples)] + list(targets)
    report = GradCheckReport(tolerance=tolerance)
    for layer, role in picks:
        arr = graph.params[layer][role]
        flat = arr.reshape(-1)
        i = int(rng.integers(0, flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up = float(np.sum(weights * graph.forward(left, right, ctx, update_stats=False, retain=False)))
        flat[i] = orig - h
        down = float(np.sum(weights * graph.forward(left, right, ctx, update_stats=False, retain=False)))
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[layer][role].reshape(-1)[i])
        key = f"{layer}.{role}[{i}]"
        if not (np.isfinite(numeric) and np.isfinite(a)):
            report.non_finite.append(key)
            continue
        report.max_rel_error[key] = float(relative_error(a, numeric, floor))
    return report
