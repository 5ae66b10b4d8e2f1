"""Finite-difference and untied-clone gradient verification, run in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .distill import LayerPairSet, at_loss, attention_map
from .nn import ArchSpec, BRCUnit, TransitionConv, brc_forward, residual_step
from .recurrence import build_student, untie
from .tensor import Tape, Tensor, backward, make_output

FD_STEP = 1e-4
FD_TOL = 1e-4
TIED_TOL = 1e-10
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


def rel_error(a, b, floor: float = REL_FLOOR) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights>; gives every output element a distinct upstream gradient."""
    return make_output(np.asarray(np.sum(out.data * weights)).reshape(()), (out,),
                       lambda g: (g * weights,))


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_op(name: str, forward: Callable[..., Tensor], inputs: Sequence[Tensor],
             rng: np.random.Generator, h: float = FD_STEP, tol: float = FD_TOL) -> CheckResult:
    """Compare tape gradients of ``forward(*inputs)`` with central differences.

    Non-scalar outputs are reduced by a fixed random projection.
    """
    probe = forward(*inputs)
    weights = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def loss_tensor():
        out = forward(*inputs)
        return out if weights is None else _project(out, weights)

    def loss_value():
        return float(loss_tensor().data)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = loss_tensor()
    backward(loss)
    worst = 0.0
    for t in inputs:
        num = numeric_grad(loss_value, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return CheckResult(name, worst, tol)


def _t(rng, *shape, lo=None):
    data = rng.standard_normal(shape)
    if lo is not None:
        data = np.where(np.abs(data) < lo, np.sign(data + 1e-12) * lo, data)
    return Tensor(data, dtype=np.float64)


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    f64 = np.float64
    results = []

    def run(name, fwd, *inputs):
        results.append(check_op(name, fwd, list(inputs), rng))

    run("conv2d[3x3,s1,p1]", lambda x, w: ops.conv2d(x, w, 1, 1), _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3))
    run("conv2d[3x3,s2,p1]", lambda x, w: ops.conv2d(x, w, 2, 1), _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3))
    run("conv2d[1x1,s2,p0]", lambda x, w: ops.conv2d(x, w, 2, 0), _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 1, 1))

    stats = ops.BNStats(3, dtype=f64)
    run("batchnorm[train]", lambda x, g, b: ops.batchnorm(x, g, b, stats, True),
        _t(rng, 4, 3, 3, 3), _t(rng, 3), _t(rng, 3))
    eval_stats = ops.BNStats(3, dtype=f64, mean=rng.standard_normal(3), var=rng.random(3) + 0.5)
    run("batchnorm[eval]", lambda x, g, b: ops.batchnorm(x, g, b, eval_stats, False),
        _t(rng, 4, 3, 3, 3), _t(rng, 3), _t(rng, 3))

    run("relu", ops.relu, _t(rng, 2, 3, 4, 4, lo=0.05))
    run("add", ops.add, _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3))
    run("sub", ops.sub, _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3))
    run("scale", lambda a: ops.scale(a, -1.7), _t(rng, 2, 3, 3, 3))
    run("square", ops.square, _t(rng, 2, 3, 3, 3))
    run("sum_all", ops.sum_all, _t(rng, 2, 3, 3))
    run("sum_channels", ops.sum_channels, _t(rng, 2, 3, 3, 3))
    run("l2_normalize", ops.l2_normalize, _t(rng, 3, 2, 3, 3))
    run("global_avg_pool", ops.global_avg_pool, _t(rng, 2, 3, 3, 3))
    run("linear", ops.linear, _t(rng, 4, 5), _t(rng, 5, 3), _t(rng, 3))
    labels = np.array([0, 2, 1, 2])
    run("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels), _t(rng, 4, 3))
    run("attention_map", attention_map, _t(rng, 2, 3, 4, 4))
    return results


def _kink_free_input(rng, shape, bn, margin: float = 1e-2, tries: int = 1000) -> Tensor:
    """Draw inputs whose BN outputs stay at least ``margin`` away from the ReLU kink.

    Central differences straddling the kink are wrong by O(1), which says
    nothing about the analytic gradient.
    """
    for _ in range(tries):
        x = rng.standard_normal(shape)
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        std = np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + ops.BN_EPS)
        pre = (x - mean) / std * bn.gamma.data[None, :, None, None] + bn.beta.data[None, :, None, None]
        if np.min(np.abs(pre)) > margin:
            return Tensor(x, dtype=np.float64)
    raise RuntimeError(f"no kink-free input of shape {shape} after {tries} draws")


def composite_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    f64 = np.float64
    results = []

    unit = BRCUnit(3, 2, "unit", rng, f64)
    bn = unit.bn_bank[1]
    bn.gamma.data[...] = rng.standard_normal(3)
    bn.beta.data[...] = rng.standard_normal(3)
    x = _kink_free_input(rng, (4, 3, 4, 4), bn)
    results.append(check_op("brc_forward", lambda x, k, g, b: brc_forward(unit, x, 1),
                            [x, unit.kernel, bn.gamma, bn.beta], rng))
    x = _kink_free_input(rng, (4, 3, 4, 4), unit.bn_bank[0])
    results.append(check_op(
        "residual_step", lambda x, k: residual_step(lambda h: brc_forward(unit, h, 0), x),
        [x, unit.kernel], rng))

    trans = TransitionConv(3, 5, "transition", rng, f64)
    x = _kink_free_input(rng, (3, 3, 6, 6), trans.bn)
    results.append(check_op("transition_conv", lambda x, k: trans(x, True), [x, trans.kernel], rng))

    teacher_acts = [_t(rng, 3, 6, 4, 4), _t(rng, 3, 8, 2, 2)]
    pairs = LayerPairSet([(0, 0), (1, 1)])
    results.append(check_op("at_loss", lambda a, b: at_loss([a, b], teacher_acts, pairs),
                            [_t(rng, 3, 2, 4, 4), _t(rng, 3, 4, 2, 2)], rng))
    return results


def tied_gradient_checks(seed: int = 0, ns=(1, 2, 3), tol: float = TIED_TOL) -> List[CheckResult]:
    """Shared-kernel gradient of the tied student vs the summed per-use gradients of its untied clone."""
    results = []
    for variant in (1, 2, 3):
        for n in ns:
            rng = np.random.default_rng([seed, variant, n])
            arch = ArchSpec.student(variant, n, num_classes=3, widths=(4, 6))
            tied = build_student(arch, dtype=np.float64, rng=rng)
            for p in tied.parameters():
                if p.name.endswith((".gamma", ".beta")):
                    p.data[...] += 0.3 * rng.standard_normal(p.shape)
            untied, copies = untie(tied)
            x = rng.standard_normal((3, 3, 6, 6))
            labels = np.array([0, 1, 2])
            proj = [rng.standard_normal((3, 4, 6, 6)), rng.standard_normal((3, 6, 3, 3))]

            def grads(net):
                with Tape():
                    logits, acts = net.forward(Tensor(x), train=True)
                    loss = ops.softmax_cross_entropy(logits, labels)
                    for a, w in zip(acts, proj):
                        loss = ops.add(loss, _project(a, w))
                return backward(loss)

            g_tied, g_untied = grads(tied), grads(untied)
            worst = 0.0
            for name, copy_names in copies.items():
                summed = np.zeros_like(g_tied[name])
                for c in copy_names:
                    summed = summed + g_untied[c]
                worst = max(worst, float(np.max(np.abs(g_tied[name] - summed)) /
                                     max(float(np.max(np.abs(summed))), 1e-300)))
            results.append(CheckResult(f"tied_kernel_grad[v{variant},n={n}]", worst, tol))
    return results


def run_gradchecks(seed: int = 0) -> List[CheckResult]:
    return op_checks(seed) + composite_checks(seed) + tied_gradient_checks(seed)


def format_report(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tol:.0e}  "
             f"{'PASS' if r.passed else 'FAIL'}" for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
