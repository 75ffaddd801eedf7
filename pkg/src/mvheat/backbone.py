"""MoE heat-conduction layers and the four-stage backbone."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transforms as tf
from .heat import EXPERTS, DiffusivityPredictor, FrequencyEmbedding, HCOConfig, hco_apply
from .nn import LayerNorm, Linear, Module, channel_linear, conv2d, depthwise_conv2d
from .tensor import (ConfigError, Parameter, ShapeError, Tensor, as_tensor, concat, gelu, get_dtype,
                     getitem, softmax, straight_through)

__all__ = [
    "ExpertRoute",
    "StageConfig",
    "BackboneConfig",
    "gumbel_softmax",
    "PolicyNetwork",
    "MHCOLayer",
    "Stem",
    "Downsample",
    "Backbone",
    "parameter_summary",
]


@dataclass
class ExpertRoute:
    weights: Tensor
    mode: str
    choice: np.ndarray

    @property
    def shape(self):
        return self.weights.shape


def gumbel_softmax(logits, temperature: float, hard: bool, rng: np.random.Generator | None) -> ExpertRoute:
    """Sample a relaxed categorical route per row of ``logits`` (``N x E``).

    ``rng=None`` means no Gumbel noise.  In hard mode the forward value is the
    one-hot argmax of the soft sample while gradients flow through the soft
    sample (straight-through).
    """
    if not temperature > 0:
        raise ConfigError(f"Gumbel-Softmax temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    if rng is not None:
        u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=logits.shape)
        noise = -np.log(-np.log(u))
        logits = logits + Tensor(noise.astype(logits.dtype))
    soft = softmax(logits * (1.0 / temperature), axis=-1)
    choice = soft.data.argmax(axis=-1)
    if not hard:
        return ExpertRoute(soft, "soft", choice)
    onehot = np.zeros(soft.shape, dtype=soft.dtype)
    onehot[np.arange(soft.shape[0]), choice] = 1.0
    return ExpertRoute(straight_through(soft, onehot), "hard", choice)


class PolicyNetwork(Module):
    """Global average pool then one linear layer: one score per enabled expert."""

    def __init__(self, channels: int, n_experts: int, rng: np.random.Generator):
        self.fc = Linear(channels, n_experts, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(x.mean(axis=(2, 3)))


@dataclass(frozen=True)
class StageConfig:
    depth: int
    channels: int


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 10
    resolution: tuple = (640, 640)
    depths: tuple = (2, 2, 12, 2)
    channels: tuple = (96, 192, 384, 768)
    experts: tuple = EXPERTS
    hco: HCOConfig = field(default_factory=HCOConfig)
    window: int | None = None
    mlp_ratio: int = 4
    transform_method: str = "auto"

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.channels) != 4:
            raise ConfigError("backbone needs exactly four stages")
        if any(d < 1 for d in self.depths) or any(c < 1 for c in self.channels):
            raise ConfigError("stage depths and channels must be positive")
        if not self.experts or any(e not in EXPERTS for e in self.experts):
            raise ConfigError(f"experts must be a nonempty subset of {EXPERTS}")
        ordered = tuple(e for e in EXPERTS if e in self.experts)
        object.__setattr__(self, "experts", ordered)
        h, w = self.resolution
        if h % 32 or w % 32:
            raise ConfigError(f"input extents must be divisible by 32, got {h}x{w}")

    @property
    def stages(self) -> list:
        return [StageConfig(d, c) for d, c in zip(self.depths, self.channels)]

    def stage_extent(self, i: int) -> tuple:
        h, w = self.resolution
        return h // 2 ** (i + 2), w // 2 ** (i + 2)

    def frequency_extent(self, i: int) -> tuple:
        """Shape of the diffusivity map (and FEs) serving stage ``i``."""
        if self.window:
            return self.window, self.window
        h, w = self.stage_extent(i)
        if "haar" in self.experts:
            h, w = _next_pow2(h), _next_pow2(w)
        return h, w


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


class MHCOLayer(Module):
    """Pre-norm residual block: routed heat conduction, then an MLP.

    ``y = x + proj(HCO_route(dwconv(norm1(x))))`` followed by
    ``y = y + fc2(gelu(fc1(norm2(y))))``.
    """

    route_mode = "hard"

    def __init__(self, channels: int, config: BackboneConfig, rng: np.random.Generator):
        c = channels
        self.experts = config.experts
        self.t = config.hco.t
        self.window = config.window
        self.method = config.transform_method
        self.norm1 = LayerNorm(c)
        bound = 1.0 / 3.0
        self.dw_kernel = Parameter(rng.uniform(-bound, bound, size=(c, 3, 3)))
        self.dw_bias = Parameter(np.zeros(c))
        self.policy = PolicyNetwork(c, len(self.experts), rng)
        self.diffusivity = DiffusivityPredictor(c, config.hco, rng)
        self.proj_w = Parameter(rng.uniform(-1, 1, size=(c, c)) / np.sqrt(c))
        self.proj_b = Parameter(np.zeros(c))
        hidden = config.mlp_ratio * c
        self.norm2 = LayerNorm(c)
        self.fc1_w = Parameter(rng.uniform(-1, 1, size=(c, hidden)) / np.sqrt(c))
        self.fc1_b = Parameter(np.zeros(hidden))
        self.fc2_w = Parameter(rng.uniform(-1, 1, size=(hidden, c)) / np.sqrt(hidden))
        self.fc2_b = Parameter(np.zeros(c))
        # testing hook: replaces hco_apply, e.g. with an identity
        self.hco_fn = hco_apply

    def route(self, u: Tensor, rng=None, temperature: float = 1.0) -> ExpertRoute:
        logits = self.policy(u)
        if self.training:
            return gumbel_softmax(logits, temperature, self.route_mode == "hard", rng)
        choice = logits.data.argmax(axis=-1)
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[np.arange(len(choice)), choice] = 1.0
        return ExpertRoute(Tensor(onehot), "argmax", choice)

    def _diffuse(self, u: Tensor, expert: str, k: Tensor) -> Tensor:
        h, w = u.shape[-2:]
        if expert != "haar" and not self.window and k.shape != (h, w):
            k = getitem(k, (slice(0, h), slice(0, w)))
        return self.hco_fn(u, expert, k, self.t, window=self.window, method=self.method, pad_haar=True)

    def hco_branch(self, x: Tensor, fes: FrequencyEmbedding | None, rng=None,
                   temperature: float = 1.0) -> tuple:
        u = depthwise_conv2d(self.norm1(x), self.dw_kernel, 1, 1, self.dw_bias)
        kshape = fes.shape[1:] if fes is not None else self._kshape(u)
        k = self.diffusivity(fes, kshape)
        route = self.route(u, rng, temperature)
        n = u.shape[0]
        if self.training:
            mixed = None
            for e, expert in enumerate(self.experts):
                we = getitem(route.weights, (slice(None), slice(e, e + 1))).reshape(n, 1, 1, 1)
                term = self._diffuse(u, expert, k) * we
                mixed = term if mixed is None else mixed + term
        else:
            parts, order = [], []
            for e, expert in enumerate(self.experts):
                idx = np.flatnonzero(route.choice == e)
                if idx.size:
                    parts.append(self._diffuse(getitem(u, idx), expert, k))
                    order.append(idx)
            order = np.concatenate(order)
            mixed = concat(parts, axis=0) if len(parts) > 1 else parts[0]
            if not np.array_equal(order, np.arange(n)):
                mixed = getitem(mixed, np.argsort(order))
        return channel_linear(mixed, self.proj_w, self.proj_b), route

    def _kshape(self, u: Tensor) -> tuple:
        if self.window:
            return self.window, self.window
        h, w = u.shape[-2:]
        if "haar" in self.experts:
            return _next_pow2(h), _next_pow2(w)
        return h, w

    def forward(self, x: Tensor, fes: FrequencyEmbedding | None = None, rng=None,
                temperature: float = 1.0) -> Tensor:
        branch, self.last_route = self.hco_branch(x, fes, rng, temperature)
        y = x + branch
        z = channel_linear(self.norm2(y), self.fc1_w, self.fc1_b)
        return y + channel_linear(gelu(z), self.fc2_w, self.fc2_b)


def _conv_param(rng, cout, cin, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    return Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)))


class Stem(Module):
    """Two stride-2 3x3 convolutions with GELU between: stride-4 embedding."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        mid = max(out_channels // 2, 1)
        self.w1 = _conv_param(rng, mid, in_channels, 3)
        self.b1 = Parameter(np.zeros(mid))
        self.w2 = _conv_param(rng, out_channels, mid, 3)
        self.b2 = Parameter(np.zeros(out_channels))

    def forward(self, frames: Tensor) -> Tensor:
        frames = as_tensor(frames)
        h, w = frames.shape[-2:]
        if h % 4 or w % 4:
            raise ConfigError(f"stem input extents must be divisible by 4, got {h}x{w}")
        x = gelu(conv2d(frames, self.w1, self.b1, stride=2, padding=1))
        return conv2d(x, self.w2, self.b2, stride=2, padding=1)


class Downsample(Module):
    """LayerNorm then a 2x2 stride-2 convolution (patch merging)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.norm = LayerNorm(cin)
        self.w = _conv_param(rng, cout, cin, 2)
        self.b = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(self.norm(x), self.w, self.b, stride=2)


class Stage(Module):
    def __init__(self, index: int, config: BackboneConfig, rng: np.random.Generator):
        c = config.channels[index]
        self.down = Downsample(config.channels[index - 1], c, rng) if index > 0 else None
        self.layers = [MHCOLayer(c, config, rng) for _ in range(config.depths[index])]
        self.fes = None
        if config.hco.k_mode == "predicted":
            self.fes = FrequencyEmbedding(c, *config.frequency_extent(index), rng)

    def forward(self, x, rng=None, temperature=1.0):
        if self.down is not None:
            x = self.down(x)
        for layer in self.layers:
            x = layer(x, self.fes, rng, temperature)
        return x


class Backbone(Module):
    """Stem plus four MHCO stages at strides 4, 8, 16 and 32."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator | int = 0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.config = config
        self.stem = Stem(config.in_channels, config.channels[0], rng)
        self.stages = [Stage(i, config, rng) for i in range(4)]

    def forward(self, frames, rng=None, temperature: float = 1.0) -> list:
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=get_dtype()))
        if tuple(frames.shape[-2:]) != tuple(self.config.resolution):
            raise ShapeError(f"backbone built for {self.config.resolution}, got input {frames.shape}")
        x = self.stem(frames)
        outs = []
        for stage in self.stages:
            x = stage(x, rng, temperature)
            outs.append(x)
        return outs

    def routes(self) -> list:
        return [layer.last_route for s in self.stages for layer in s.layers]


def parameter_summary(module: Module) -> dict:
    """Parameter counts per top-level component plus the total."""
    counts = {}
    for name, p in module.named_parameters().items():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.size
    counts["total"] = module.num_parameters()
    return counts
