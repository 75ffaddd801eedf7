"""Registry of gradient checks covering every differentiable operation.

Each case builds a small random problem and hands a closure to
:func:`grad_check`.  ``run_suite(corrupt=name)`` deliberately scales the
backward pass of one case by 1.5 as a negative control.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from . import transforms as tf
from .backbone import BackboneConfig, MHCOLayer, Stem, gumbel_softmax
from .detect import DetectionHead, detection_loss
from .gradcheck import GradCheckReport, grad_check
from .heat import FrequencyEmbedding, heat_multiplier, hco_apply, predict_diffusivity
from .nn import channel_linear, conv2d, depthwise_conv2d, layer_norm
from .tensor import Tensor, precision

__all__ = ["GradCase", "registry", "run_suite", "DEFAULT_TOLERANCE"]

DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple]


def _corrupted(x: Tensor, factor: float = 1.5) -> Tensor:
    """Identity forward, scaled backward."""
    return Tensor._result(x.data.copy(), (x,), lambda g: x._accum(g * factor))


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, *shape):
    return Tensor(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.0, size=shape))


def _complex_out(z: tf.ComplexPair) -> Tensor:
    return T.concat([z.real, z.imag], axis=-1)


def _cases() -> list:
    c = []

    def add(name):
        def deco(fn):
            c.append(GradCase(name, fn))
            return fn
        return deco

    @add("add")
    def _(rng):
        return (lambda a, b: a + b), [_u(rng, 3, 4), _u(rng, 3, 4)]

    @add("add_broadcast")
    def _(rng):
        return (lambda a, b: a + b), [_u(rng, 2, 3, 4), _u(rng, 4)]

    @add("sub")
    def _(rng):
        return (lambda a, b: a - b), [_u(rng, 3, 4), _u(rng, 3, 4)]

    @add("mul")
    def _(rng):
        return (lambda a, b: a * b), [_u(rng, 3, 4), _u(rng, 3, 4)]

    @add("div")
    def _(rng):
        return (lambda a, b: a / b), [_u(rng, 3, 4), _away_from_zero(rng, 3, 4)]

    @add("matmul")
    def _(rng):
        return T.matmul, [_u(rng, 3, 4), _u(rng, 4, 2)]

    @add("matmul_batched")
    def _(rng):
        return T.matmul, [_u(rng, 2, 3, 4), _u(rng, 4, 2)]

    @add("sum_mean")
    def _(rng):
        return (lambda a: T.concat([a.sum(axis=1), a.mean(axis=1)], 0)), [_u(rng, 3, 4)]

    @add("reshape_transpose")
    def _(rng):
        return (lambda a: a.reshape(4, 6).transpose(1, 0)), [_u(rng, 2, 3, 4)]

    @add("getitem")
    def _(rng):
        idx = np.array([2, 0, 2, 1])
        return (lambda a: T.getitem(a, idx) * 1.0 + a[1:3].sum()), [_u(rng, 3, 4)]

    @add("concat")
    def _(rng):
        return (lambda a, b: T.concat([a, b], axis=1)), [_u(rng, 2, 3), _u(rng, 2, 2)]

    @add("pad2d")
    def _(rng):
        return (lambda a: T.pad2d(a, 2, 1)), [_u(rng, 2, 3, 3)]

    @add("exp")
    def _(rng):
        return T.exp, [_u(rng, 3, 4)]

    @add("sigmoid")
    def _(rng):
        return T.sigmoid, [_u(rng, 3, 4, lo=-3, hi=3)]

    @add("gelu")
    def _(rng):
        return T.gelu, [_u(rng, 3, 4, lo=-3, hi=3)]

    @add("softplus")
    def _(rng):
        return T.softplus, [_u(rng, 3, 4, lo=-3, hi=3)]

    @add("absolute")
    def _(rng):
        return T.absolute, [_away_from_zero(rng, 3, 4)]

    @add("maximum_minimum")
    def _(rng):
        a = _u(rng, 3, 4)
        b = Tensor(a.data + _away_from_zero(rng, 3, 4).data * 0.5)
        return (lambda x, y: T.maximum(x, y) * 2.0 + T.minimum(x, y)), [a, b]

    @add("softmax")
    def _(rng):
        return (lambda a: T.softmax(a, axis=-1)), [_u(rng, 3, 4, lo=-2, hi=2)]

    @add("layer_norm")
    def _(rng):
        return (lambda x, g, b: layer_norm(x, g, b)), [_u(rng, 2, 3, 2, 2), _u(rng, 3), _u(rng, 3)]

    @add("channel_linear")
    def _(rng):
        return channel_linear, [_u(rng, 2, 3, 2, 2), _u(rng, 3, 4), _u(rng, 4)]

    @add("depthwise_conv2d")
    def _(rng):
        return (lambda x, k, b: depthwise_conv2d(x, k, 1, 1, b)), [_u(rng, 2, 2, 4, 4), _u(rng, 2, 3, 3), _u(rng, 2)]

    @add("depthwise_conv2d_stride2")
    def _(rng):
        return (lambda x, k: depthwise_conv2d(x, k, 2, 0)), [_u(rng, 1, 2, 5, 5), _u(rng, 2, 3, 3)]

    @add("conv2d")
    def _(rng):
        return (lambda x, w, b: conv2d(x, w, b, stride=2, padding=1)), [_u(rng, 1, 2, 4, 4), _u(rng, 3, 2, 3, 3),
                                                                        _u(rng, 3)]

    for method in ("matrix", "fast"):
        @add(f"dct2[{method}]")
        def _(rng, m=method):
            return (lambda x: tf.dct2(x, m)), [_u(rng, 2, 4, 6)]

        @add(f"idct2[{method}]")
        def _(rng, m=method):
            return (lambda x: tf.idct2(x, m)), [_u(rng, 2, 4, 6)]

        @add(f"haar2[{method}]")
        def _(rng, m=method):
            return (lambda x: tf.haar2(x, m)), [_u(rng, 2, 4, 8)]

        @add(f"ihaar2[{method}]")
        def _(rng, m=method):
            return (lambda x: tf.ihaar2(x, m)), [_u(rng, 2, 4, 8)]

        @add(f"dft2[{method}]")
        def _(rng, m=method):
            return (lambda x: _complex_out(tf.dft2(x, m))), [_u(rng, 2, 4, 5)]

        @add(f"idft2[{method}]")
        def _(rng, m=method):
            return (lambda zr, zi: tf.idft2(tf.ComplexPair(zr, zi), m, check=False)), [_u(rng, 4, 5), _u(rng, 4, 5)]

    @add("heat_multiplier")
    def _(rng):
        grid = tf.frequency_grid(4, 6, "dct")
        return (lambda k: heat_multiplier(k, 0.7, grid)), [_u(rng, 4, 6, lo=0.1, hi=1.0)]

    @add("dct_heat_idct_chain")
    def _(rng):
        grid = tf.frequency_grid(6, 6, "dct")
        return (lambda x, k: tf.idct2(tf.dct2(x) * heat_multiplier(k, 1.0, grid))), [_u(rng, 2, 6, 6),
                                                                                      _u(rng, 6, 6, lo=0.1, hi=1.0)]

    for expert in ("dct", "dft", "haar"):
        @add(f"hco_apply[{expert}]")
        def _(rng, e=expert):
            return (lambda u, k: hco_apply(u, e, k, 1.0)), [_u(rng, 2, 2, 4, 8), _u(rng, 4, 8, lo=0.05, hi=1.0)]

        @add(f"hco_apply_windowed[{expert}]")
        def _(rng, e=expert):
            return (lambda u, k: hco_apply(u, e, k, 0.5, window=4)), [_u(rng, 1, 2, 8, 8),
                                                                       _u(rng, 4, 4, lo=0.05, hi=1.0)]

    @add("hco_apply_padded_haar")
    def _(rng):
        return (lambda u, k: hco_apply(u, "haar", k, 1.0, pad_haar=True)), [_u(rng, 1, 2, 3, 6),
                                                                             _u(rng, 4, 8, lo=0.05, hi=1.0)]

    for expert in ("dct", "dft", "haar"):
        @add(f"predicted_k_hco[{expert}]")
        def _(rng, e=expert):
            def fn(u, fes, w, b):
                return hco_apply(u, e, predict_diffusivity(fes, w, b), 1.0)
            return fn, [_u(rng, 1, 2, 4, 4), _u(rng, 3, 4, 4), _u(rng, 3, 1), _u(rng, 1)]

    @add("gumbel_softmax_soft")
    def _(rng):
        seed = int(rng.integers(1 << 30))
        return (lambda z: gumbel_softmax(z, 0.7, False, np.random.default_rng(seed)).weights), [_u(rng, 3, 3)]

    @add("head_loss_disjoint")
    def _(rng):
        # predictions never overlap their targets, so the detached IoU target stays 0
        head = DetectionHead(4, 3, rng)
        anchors = np.array([[0.0, 0.0, -2.5, -2.5], [0.3, -0.3, -2.5, -2.5]])
        gt = np.array([[0.8, 0.8, 0.1, 0.1], [0.2, 0.2, 0.1, 0.1]])

        def fn(feats, w_box, w_cls, w1):
            head.w_box, head.w_cls, head.w1 = w_box, w_cls, w1
            boxes, logits = head(feats, Tensor(anchors))
            return detection_loss(boxes, logits, gt, [0, 2]).total
        return fn, [_u(rng, 2, 4), _u(rng, 4, 4) * 0.1, _u(rng, 4, 3), _u(rng, 4, 4)]

    @add("head_loss_overlap_cls")
    def _(rng):
        head = DetectionHead(4, 3, rng)
        feats = Tensor(rng.uniform(-1, 1, size=(2, 4)))
        gt = np.array([[0.45, 0.5, 0.4, 0.4], [0.6, 0.55, 0.5, 0.3]])

        def fn(w_cls, b_cls):
            head.w_cls, head.b_cls = w_cls, b_cls
            boxes, logits = head(feats)
            return detection_loss(boxes, logits, gt, [1, 0]).total
        return fn, [_u(rng, 4, 3), _u(rng, 3)]

    @add("mhco_layer_soft")
    def _(rng):
        cfg = BackboneConfig(in_channels=2, resolution=(32, 32), depths=(1, 1, 1, 1), channels=(4, 4, 4, 4))
        layer = MHCOLayer(4, cfg, rng)
        layer.route_mode = "soft"
        fes = FrequencyEmbedding(4, 4, 4, rng, std=0.5)
        seed = int(rng.integers(1 << 30))

        def fn(x, fe, kw, pw):
            fes.value, layer.diffusivity.weight, layer.policy.fc.weight = fe, kw, pw
            return layer(x, fes, np.random.default_rng(seed), 1.0)
        return fn, [_u(rng, 2, 4, 4, 4), Tensor(fes.value.data.copy()), _u(rng, 4, 1), _u(rng, 4, 3)]

    @add("backbone_1layer_soft")
    def _(rng):
        cfg = BackboneConfig(in_channels=2, resolution=(32, 32), depths=(1, 1, 1, 1), channels=(4, 4, 4, 4))
        stem = Stem(2, 4, rng)
        layer = MHCOLayer(4, cfg, rng)
        layer.route_mode = "soft"
        fes = FrequencyEmbedding(4, 4, 4, rng, std=0.5)
        seed = int(rng.integers(1 << 30))

        def fn(frames, w1, fe):
            stem.w1, fes.value = w1, fe
            return layer(stem(frames), fes, np.random.default_rng(seed), 1.0)
        return fn, [_u(rng, 1, 2, 16, 16), Tensor(stem.w1.data.copy()), Tensor(fes.value.data.copy())]

    return c


def registry() -> list:
    return _cases()


def run_suite(names=None, seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
              corrupt: str | None = None) -> list:
    """Run the registered checks (optionally a subset) and return their reports."""
    cases = registry()
    known = {c.name for c in cases}
    if corrupt is not None and corrupt not in known:
        raise ValueError(f"unknown gradient check {corrupt!r}")
    if names is not None:
        unknown = set(names) - known
        if unknown:
            raise ValueError(f"unknown gradient checks: {sorted(unknown)}")
        cases = [c for c in cases if c.name in names]
    reports = []
    with precision(64):
        for i, case in enumerate(cases):
            rng = np.random.default_rng([seed, i])
            try:
                fn, inputs = case.build(rng)
                if case.name == corrupt:
                    fn = (lambda f: lambda *a: _corrupted(f(*a)))(fn)
                reports.append(grad_check(fn, inputs, tolerance, name=case.name, seed=seed))
            except Exception as exc:  # a crashing op is a failed check, not a crashed suite
                reports.append(GradCheckReport(case.name, float("inf"), tolerance, False,
                                               f"{type(exc).__name__}: {exc}"))
    return reports
