"""Finite-difference verification of every differentiable operation.

Each registered case builds a function of one or more float64 arrays.  A
probe draws fresh inputs, a random output cotangent ``c`` and a random input
direction ``d``, then compares the reverse-mode directional derivative
``<grad sum(c * f(x)), d>`` with the central difference
``(L(x + eps d) - L(x - eps d)) / (2 eps)``.  Inputs are drawn away from
kinks (relu at 0, clamp bounds, max-pool ties) so the difference quotient is
well defined.

Straight-through transforms are not in the registry: their forward pass is
piecewise constant, and their backward pass is the identity by definition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from dasrf import transforms as tf
from dasrf.backbones import BackboneSpec, build
from dasrf.cell import Edge, affine5_cell, cell_forward, chain_cell, mixed_edge_forward
from dasrf.temporal import (ShiftConfig, aggregate_classification, aggregate_segmentation, make_video,
                            shift_channels, temporal_shift)
from dasrf.tensor import ops
from dasrf.tensor.core import Tape, Tensor, backward, no_grad, precision

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass
class GradCase:
    name: str
    build: Builder
    kinked: bool = False     # composite with relu/max-pool inside: probes straddling a kink are redrawn


@dataclass
class GradResult:
    name: str
    probes: int
    max_rel_error: float
    errors: list[float]
    redrawn: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def _away(rng, shape, lo=0.05, hi=1.0):
    """Values with |x| in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    """Values separated by at least 0.01 so max-pool windows never tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.002, n)).reshape(shape)


def _image(rng, shape, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, shape)


def probe(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
          eps: float = 1e-5, smooth_check: bool = False) -> float | None:
    """Relative error between autodiff and central differences along one random direction.

    With ``smooth_check`` the difference quotient is recomputed at ``eps / 10``;
    if the two disagree the segment crosses a non-differentiable point and
    ``None`` is returned.  The test involves finite differences only, so it
    cannot mask a wrong analytic gradient.
    """
    with precision("f64"):
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        with Tape() as tape:
            out = fn(*leaves)
        cot = rng.normal(size=out.shape)
        with tape:
            loss = ops.sum(ops.mul(out, cot))
        grads = backward(tape, loss)
        dirs = [rng.normal(size=np.shape(x)) for x in inputs]
        # a unit joint direction keeps each pre-activation's move ~eps, so relu kinks are rarely crossed
        norm = np.sqrt(sum((d * d).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        ad = float(sum((grads[t] * d).sum() for t, d in zip(leaves, dirs)))

        def value(sign):
            with no_grad():
                shifted = [Tensor(x + sign * eps * d) for x, d in zip(inputs, dirs)]
                return float((fn(*shifted).data * cot).sum())

        fd = (value(1.0) - value(-1.0)) / (2 * eps)
        if smooth_check:
            fine = (value(0.1) - value(-0.1)) / (0.2 * eps)
            if abs(fd - fine) > 1e-5 * max(abs(fd), abs(fine), 1e-8):
                return None
    return abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)


def run_case(case: GradCase, probes: int = 20, seed: int = 0, eps: float = 1e-5) -> GradResult:
    errors, redrawn, k = [], 0, 0
    while len(errors) < probes:
        rng = np.random.default_rng([seed, k, sum(map(ord, case.name))])
        k += 1
        fn, inputs = case.build(rng)
        err = probe(fn, inputs, rng, eps, smooth_check=case.kinked)
        if err is None:
            redrawn += 1
            if redrawn > probes:
                raise RuntimeError(f"{case.name}: too many probes straddle a kink")
            continue
        errors.append(err)
    return GradResult(case.name, probes, max(errors), errors, redrawn)


# -- registry ------------------------------------------------------------------------

def _binary(op, positive_b=False):
    def b(rng):
        y = rng.uniform(0.5, 2.0, (3, 4)) if positive_b else rng.normal(size=(3, 4))
        return op, [rng.normal(size=(3, 4)), y]
    return b


def _unary(op, sample):
    return lambda rng: (op, [sample(rng)])


def _conv(stride, padding, dilation):
    def b(rng):
        fn = lambda x, w, bias: ops.conv2d_raw(x, w, bias, stride, padding, dilation)  # noqa: E731
        return fn, [rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]
    return b


def _transform(kind, lo=0.1, hi=0.9, fill="zeros", magnitude=None):
    op = tf.TransformOp(kind, magnitude)
    return lambda rng: ((lambda x: tf.apply(op, x, fill)), [_image(rng, (2, 3, 8, 8), lo, hi)])


def _mixed_edge(rng):
    edge = Edge(0, 1, tuple(tf.search_space_ops("affine5")))
    return (lambda x, tau: mixed_edge_forward(edge, x, tau),
            [_image(rng, (2, 3, 8, 8)), rng.normal(size=5)])


def _cell(make):
    def b(rng):
        cell = make()
        taus = [rng.normal(size=t.shape) for t in cell.tau]

        def fn(x, *tau):
            saved = list(cell.tau)
            cell.tau[:] = tau
            try:
                return cell_forward(cell, x)
            finally:
                cell.tau[:] = saved
        return fn, [_image(rng, (1, 3, 8, 8), 0.35, 0.65), *taus]
    return b


def _small_affine5():
    return affine5_cell(2)


def _smooth_full13():
    """full13 candidates minus the straight-through ones."""
    smooth = [op for op in tf.search_space_ops("full13") if op.differentiability == "smooth"]
    return chain_cell([smooth, smooth])


def _gated(rng):
    cfg = ShiftConfig("gated_shift")
    return (lambda x, g: temporal_shift(x, cfg, g), [rng.normal(size=(2, 3, 8, 2, 2)), rng.normal(size=2)])


def _aggregate_seg(rng):
    image = _image(rng, (2, 3, 8, 8))
    video = make_video(image, affine5_cell(1), 3)
    return (lambda maps: aggregate_segmentation(maps, video)[0], [rng.normal(size=(2, 3, 2, 8, 8))])


def _backbone(kind, head, mode):
    def b(rng):
        spec = BackboneSpec(kind=kind, depth=2, width=8, head=head, num_classes=3, norm=True,
                            shift_points=(1,), shift=ShiftConfig(mode))
        with precision("f64"):
            model = build(spec, rng, gate_init=0.3)
        names = sorted(model.params)

        def fn(x, *values):
            saved = {n: model.params[n] for n in names}
            model.params.update(zip(names, values))
            try:
                return model(x, frames=2)
            finally:
                model.params.update(saved)
        # zero-initialised residual scales would put relu(skip + 0 * branch) exactly on its kink
        values = [rng.normal(size=model.params[n].shape) if "scale" in n else model.params[n].data.copy()
                  for n in names]
        return fn, [rng.normal(size=(4, 3, 6, 6)), *values]
    return b


def _pixel_ce(rng):
    labels = rng.integers(0, 3, (2, 4, 4))
    mask = (rng.random((2, 4, 4)) > 0.3).astype(float)
    return (lambda z: ops.pixel_cross_entropy(z, labels, mask)), [rng.normal(size=(2, 3, 4, 4))]


def _cross_entropy(rng):
    labels = rng.integers(0, 4, 5)
    return (lambda z: ops.cross_entropy(z, labels)), [rng.normal(size=(5, 4))]


def _channel_norm(rng):
    return (lambda x, g, b: ops.channel_norm(x, g, b),
            [rng.normal(size=(3, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)])


def _channel_norm_frozen(rng):
    stats = (rng.normal(size=4), rng.uniform(0.5, 2.0, 4))
    return (lambda x, g, b: ops.channel_norm(x, g, b, stats=stats),
            [rng.normal(size=(3, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)])


CASES: list[GradCase] = [
    GradCase("add", _binary(ops.add)),
    GradCase("sub", _binary(ops.sub)),
    GradCase("mul", _binary(ops.mul)),
    GradCase("div", _binary(ops.div, positive_b=True)),
    GradCase("add_broadcast", lambda r: (ops.add, [r.normal(size=(3, 4)), r.normal(size=(1, 4))])),
    GradCase("neg", _unary(ops.neg, lambda r: r.normal(size=(3, 4)))),
    GradCase("power", _unary(lambda a: ops.power(a, 1.7), lambda r: r.uniform(0.5, 2.0, (3, 4)))),
    GradCase("exp", _unary(ops.exp, lambda r: r.normal(size=(3, 4)))),
    GradCase("log", _unary(ops.log, lambda r: r.uniform(0.5, 2.0, (3, 4)))),
    GradCase("relu", _unary(ops.relu, lambda r: _away(r, (3, 4)))),
    GradCase("sigmoid", _unary(ops.sigmoid, lambda r: r.normal(size=(3, 4)))),
    GradCase("tanh", _unary(ops.tanh, lambda r: r.normal(size=(3, 4)))),
    GradCase("clamp", _unary(lambda a: ops.clamp(a, -0.5, 0.5),
                             lambda r: r.choice([-1, 1], (3, 4)) * r.choice([r.uniform(0.05, 0.45), 0.9], (3, 4)))),
    GradCase("matmul", lambda r: (ops.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))])),
    GradCase("dense", lambda r: (ops.dense, [r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=2)])),
    GradCase("sum", _unary(lambda a: ops.sum(a, axis=1, keepdims=True), lambda r: r.normal(size=(3, 4, 2)))),
    GradCase("mean", _unary(lambda a: ops.mean(a, axis=(0, 2)), lambda r: r.normal(size=(3, 4, 2)))),
    GradCase("reshape", _unary(lambda a: ops.reshape(a, (4, 6)), lambda r: r.normal(size=(2, 3, 4)))),
    GradCase("transpose", _unary(lambda a: ops.transpose(a, (2, 0, 1)), lambda r: r.normal(size=(2, 3, 4)))),
    GradCase("getitem", _unary(lambda a: ops.getitem(a, (slice(None), np.array([0, 2, 2]))),
                               lambda r: r.normal(size=(2, 3, 4)))),
    GradCase("stack", lambda r: (lambda a, b: ops.stack([a, b], axis=1), [r.normal(size=(3, 4)), r.normal(size=(3, 4))])),
    GradCase("concat", lambda r: (lambda a, b: ops.concat([a, b], axis=1), [r.normal(size=(3, 2)), r.normal(size=(3, 4))])),
    GradCase("softmax", _unary(ops.softmax, lambda r: r.normal(size=(3, 5)))),
    GradCase("log_softmax", _unary(ops.log_softmax, lambda r: r.normal(size=(3, 5)))),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("pixel_cross_entropy", _pixel_ce),
    GradCase("conv2d", _conv(1, 0, 1)),
    GradCase("conv2d_strided_padded", _conv(2, 1, 1)),
    GradCase("conv2d_dilated", _conv(1, 2, 2)),
    GradCase("max_pool2d", _unary(lambda a: ops.max_pool2d(a, 2), lambda r: _distinct(r, (2, 3, 6, 6)))),
    GradCase("max_pool2d_padded", _unary(lambda a: ops.max_pool2d(a, 3, 2, 1), lambda r: _distinct(r, (1, 2, 7, 7)))),
    GradCase("global_avg_pool", _unary(ops.global_avg_pool, lambda r: r.normal(size=(2, 3, 4, 4)))),
    GradCase("resize_bilinear", _unary(lambda a: ops.resize_bilinear(a, (7, 5)), lambda r: r.normal(size=(2, 3, 4, 4)))),
    GradCase("channel_norm", _channel_norm),
    GradCase("channel_norm_frozen", _channel_norm_frozen),
    GradCase("TranslateX", _transform("TranslateX")),
    GradCase("TranslateY", _transform("TranslateY")),
    GradCase("Rotate", _transform("Rotate")),
    GradCase("Rotate_edge_fill", _transform("Rotate", fill="edge")),
    GradCase("Scale", _transform("Scale")),
    GradCase("ShearX", _transform("ShearX")),
    GradCase("ShearY", _transform("ShearY")),
    GradCase("Invert", _transform("Invert")),
    GradCase("Color", _transform("Color", 0.3, 0.7)),
    GradCase("Brightness", _transform("Brightness", 0.1, 0.8)),
    GradCase("Sharpness", _transform("Sharpness", 0.35, 0.65)),
    GradCase("Cutout", _transform("Cutout")),
    GradCase("mixed_edge", _mixed_edge),
    GradCase("cell_affine5", _cell(_small_affine5)),
    GradCase("cell_full13", _cell(_smooth_full13)),
    GradCase("shift_channels", _unary(lambda a: shift_channels(a, 2), lambda r: r.normal(size=(2, 3, 8, 2, 2)))),
    GradCase("gated_shift", _gated),
    GradCase("aggregate_classification", _unary(aggregate_classification, lambda r: r.normal(size=(2, 3, 4)))),
    GradCase("aggregate_segmentation", _aggregate_seg),
    GradCase("plain_cnn", _backbone("plain_cnn", "classifier", "tsm_fixed"), kinked=True),
    GradCase("mini_resnet_gated", _backbone("mini_resnet", "classifier", "gated_shift"), kinked=True),
    GradCase("plain_cnn_dense", _backbone("plain_cnn", "dense_predictor", "tsm_fixed"), kinked=True),
]


def run_all(probes: int = 20, seed: int = 0, names=None) -> list[GradResult]:
    return [run_case(c, probes, seed) for c in CASES if names is None or c.name in names]
