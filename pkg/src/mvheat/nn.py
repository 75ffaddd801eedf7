"""Layer-level differentiable operations and a light module container."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import ConfigError, Parameter, ShapeError, Tensor, as_tensor, get_dtype

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "layer_norm",
    "channel_linear",
    "depthwise_conv2d",
    "conv2d",
    "LN_EPS",
]

LN_EPS = 1e-5


class Module:
    """Container that discovers parameters and sub-modules through attributes.

    Lists of modules are supported; parameter names are dotted paths such as
    ``stages.2.layers.0.mlp1.weight``.
    """

    training = True

    def named_parameters(self, prefix: str = ""):
        out = OrderedDict()
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list:
        # shared parameters appear once
        seen, params = set(), []
        for p in self.named_parameters().values():
            if id(p) not in seen:
                seen.add(id(p))
                params.append(p)
        return params

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map over the last axis: ``x @ weight + bias``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, channels: int, axis: int = 1):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=self.axis)


def _affine_shape(ndim: int, axis: int, n: int) -> tuple:
    shape = [1] * ndim
    shape[axis] = n
    return tuple(shape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS, axis: int = 1) -> Tensor:
    """Normalise across ``axis`` (the channel axis) then apply a per-channel affine map."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for {n} channels")
    bshape = _affine_shape(x.ndim, axis, n)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=other))
        if beta.requires_grad:
            beta._accum(g.sum(axis=other))
        if x.requires_grad:
            dxh = g * g_
            m1 = dxh.mean(axis=axis, keepdims=True)
            m2 = (dxh * xhat).mean(axis=axis, keepdims=True)
            x._accum(inv * (dxh - m1 - xhat * m2))

    return Tensor._result(out, (x, gamma, beta), backward)


def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-position channel mixing on ``N x C x H x W``: weight is ``C_in x C_out``."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    n, c = x.shape[:2]
    if weight.shape[0] != c:
        raise ShapeError(f"channel_linear: input has {c} channels, weight is {weight.shape}")
    spatial = x.shape[2:]
    xf = x.data.reshape(n, c, -1)
    wt = weight.data.T
    out = wt @ xf
    if bias is not None:
        out = out + bias.data[:, None]
    d = weight.shape[1]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(n, d, -1)
        if x.requires_grad:
            x._accum((weight.data @ gf).reshape(x.shape))
        if weight.requires_grad:
            weight._accum(np.einsum("ncp,ndp->cd", xf, gf, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accum(gf.sum(axis=(0, 2)))

    return Tensor._result(out.reshape((n, d) + spatial), parents, backward)


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    out = (n + 2 * padding - k) // stride + 1
    if out < 1:
        raise ConfigError(
            f"convolution output extent < 1 (size {n}, kernel {k}, stride {stride}, padding {padding})"
        )
    return out


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                     bias: Tensor | None = None) -> Tensor:
    """Convolve each channel of ``N x C x H x W`` with its own ``k x k`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"depthwise kernel must be square with odd size, got {kernel.shape}")
    if padding < 0:
        raise ConfigError("padding must be nonnegative")
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} vs kernel {kernel.shape}")
    h, w = x.shape[2:]
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kd = kernel.data
    out = np.zeros((x.shape[0], c, ho, wo), dtype=x.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + span_h:stride, j:j + span_w:stride] * kd[:, i, j][None, :, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i:i + span_h:stride, j:j + span_w:stride] += g * kd[:, i, j][None, :, None, None]
            x._accum(gp[:, :, padding:padding + h, padding:padding + w])
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(k):
                for j in range(k):
                    gk[:, i, j] = (g * xp[:, :, i:i + span_h:stride, j:j + span_w:stride]).sum(axis=(0, 2, 3))
            kernel._accum(gk)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._result(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Dense convolution; weight is ``C_out x C_in x k x k``."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    cout, cin, k, _ = weight.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    n, _, h, w = x.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((n, cin, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
    cols = cols.reshape(n, cin * k * k, ho * wo)
    wm = weight.data.reshape(cout, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            weight._accum(np.einsum("nop,nkp->ok", gf, cols, optimize=True).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(gf.sum(axis=(0, 2)))
        if x.requires_grad:
            gc = (wm.T @ gf).reshape(n, cin, k, k, ho, wo)
            gp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i:i + span_h:stride, j:j + span_w:stride] += gc[:, :, i, j]
            x._accum(gp[:, :, padding:padding + h, padding:padding + w])

    return Tensor._result(out.reshape(n, cout, ho, wo), parents, backward)


def init_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def zeros_param(*shape) -> Parameter:
    return Parameter(np.zeros(shape, dtype=get_dtype()))
