"""Heat conduction in a spectral basis.

A feature map ``U0`` is diffused for time ``t`` by moving it into a
frequency basis, attenuating coefficient ``(i, j)`` by
``exp(-k(i, j) * (vx(i)^2 + vy(j)^2) * t)`` and transforming back.  The
diffusivity map ``k`` is either a constant, one learnable scalar, or a
per-frequency map predicted from learnable frequency embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import transforms as tf
from .nn import Module, channel_linear
from .tensor import ConfigError, Parameter, ShapeError, Tensor, as_tensor, get_dtype, getitem, pad2d, softplus
from .tensor import exp as texp

__all__ = [
    "EXPERTS",
    "HCOConfig",
    "DiffusivityError",
    "FrequencyEmbedding",
    "DiffusivityPredictor",
    "heat_multiplier",
    "hco_apply",
    "predict_diffusivity",
    "mirror_frequencies",
]

EXPERTS = ("dct", "dft", "haar")
K_MODES = ("fixed", "learnable_scalar", "predicted")


class DiffusivityError(ValueError):
    """Diffusivity map contains a negative entry."""


@dataclass(frozen=True)
class HCOConfig:
    t: float = 1.0
    k_mode: str = "predicted"
    k_value: float = float(np.log(2.0))

    def __post_init__(self):
        if not self.t > 0:
            raise ConfigError(f"diffusion time t must be positive, got {self.t}")
        if self.k_mode not in K_MODES:
            raise ConfigError(f"k_mode must be one of {K_MODES}, got {self.k_mode!r}")
        if self.k_value < 0:
            raise ConfigError("fixed k must be nonnegative")


def heat_multiplier(k, t: float, grid: tf.FrequencyGrid) -> Tensor:
    """``exp(-k * (vx^2 + vy^2) * t)`` on the frequency grid; differentiable in ``k``."""
    if not t > 0:
        raise ConfigError(f"diffusion time t must be positive, got {t}")
    k = as_tensor(k)
    if k.shape[-2:] != (grid.height, grid.width):
        raise ShapeError(f"diffusivity shape {k.shape} does not match grid {grid.height}x{grid.width}")
    if np.any(k.data < 0):
        raise DiffusivityError("diffusivity map has negative entries")
    lam = (grid.squared_norm() * t).astype(k.dtype)
    return texp(k * Tensor(-lam))


def mirror_frequencies(k: Tensor) -> Tensor:
    """``k[-i mod H, -j mod W]`` as a differentiable gather."""
    h, w = k.shape[-2:]
    ri = (-np.arange(h)) % h
    rj = (-np.arange(w)) % w
    return getitem(k, (Ellipsis, ri[:, None], rj[None, :]))


def _apply_global(u0: Tensor, expert: str, k: Tensor, t: float, method: str) -> Tensor:
    h, w = u0.shape[-2:]
    if expert == "dct":
        m = heat_multiplier(k, t, tf.frequency_grid(h, w, "dct"))
        return tf.idct2(tf.dct2(u0, method) * m, method)
    if expert == "dft":
        # a mirror-symmetric k keeps the attenuated spectrum Hermitian
        k = (k + mirror_frequencies(k)) * 0.5
        m = heat_multiplier(k, t, tf.frequency_grid(h, w, "dft"))
        z = tf.dft2(u0, method)
        return tf.idft2(tf.ComplexPair(z.real * m, z.imag * m), method)
    if expert == "haar":
        hp, wp = _next_pow2(h), _next_pow2(w)
        if k.shape[-2:] != (hp, wp):
            raise ShapeError(f"Haar expert needs a {hp}x{wp} diffusivity map, got {k.shape}")
        x = pad2d(u0, hp - h, wp - w)
        m = heat_multiplier(k, t, tf.frequency_grid(hp, wp, "haar"))
        y = tf.ihaar2(tf.haar2(x, method) * m, method)
        if (hp, wp) != (h, w):
            y = getitem(y, (Ellipsis, slice(0, h), slice(0, w)))
        return y
    raise ConfigError(f"unknown expert {expert!r}; expected one of {EXPERTS}")


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


def hco_apply(u0, expert: str, k, t: float = 1.0, window: int | None = None,
              method: str = "auto", pad_haar: bool = False) -> Tensor:
    """Diffuse ``u0`` (``... x H x W``) for time ``t`` in the basis of ``expert``.

    ``k`` is an ``H x W`` diffusivity map shared across leading axes.  With
    ``window`` the transform runs independently on non-overlapping
    ``window x window`` tiles and ``k`` is ``window x window``.  The Haar
    expert requires power-of-two extents unless ``pad_haar`` is set, in which
    case the field is zero-padded on the bottom/right and ``k`` must have the
    padded extent.
    """
    u0, k = as_tensor(u0), as_tensor(k)
    if expert not in EXPERTS:
        raise ConfigError(f"unknown expert {expert!r}; expected one of {EXPERTS}")
    if window:
        return _apply_windowed(u0, expert, k, t, window, method)
    h, w = u0.shape[-2:]
    if expert == "haar" and not pad_haar and not (tf.is_power_of_two(h) and tf.is_power_of_two(w)):
        raise ConfigError(f"Haar expert needs power-of-two extents, got {h}x{w}")
    if expert != "haar" and k.shape[-2:] != (h, w):
        raise ShapeError(f"diffusivity shape {k.shape} does not match field {h}x{w}")
    return _apply_global(u0, expert, k, t, method)


def _apply_windowed(u0: Tensor, expert: str, k: Tensor, t: float, window: int, method: str) -> Tensor:
    *lead, h, w = u0.shape
    if h % window or w % window:
        raise ConfigError(f"window {window} does not tile a {h}x{w} field")
    if k.shape[-2:] != (window, window):
        raise ShapeError(f"windowed diffusivity must be {window}x{window}, got {k.shape}")
    if expert == "haar" and not tf.is_power_of_two(window):
        raise ConfigError("Haar windows must be a power of two")
    nl = len(lead)
    tiles = u0.reshape(*lead, h // window, window, w // window, window)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    tiles = tiles.transpose(perm)
    out = _apply_global(tiles, expert, k, t, method)
    return out.transpose(perm).reshape(*lead, h, w)


def predict_diffusivity(fes, weight, bias) -> Tensor:
    """``softplus(linear(FEs))``: a nonnegative ``H x W`` map from ``C x H x W`` embeddings.

    ``weight`` is ``C x 1`` and ``bias`` has one element.
    """
    fes = as_tensor(fes)
    c, h, w = fes.shape
    if weight.shape != (c, 1):
        raise ShapeError(f"projection weight must be ({c}, 1), got {weight.shape}")
    z = channel_linear(fes.reshape(1, c, h, w), weight, bias)
    return softplus(z.reshape(h, w))


class FrequencyEmbedding(Module):
    """Learnable ``C x H x W`` tensor shaped like a stage's frequency representation."""

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator, std: float = 0.02):
        self.value = Parameter(rng.normal(0.0, std, size=(channels, height, width)))

    @property
    def shape(self):
        return self.value.shape


class DiffusivityPredictor(Module):
    """Produces the diffusivity map for one heat-conduction layer."""

    def __init__(self, channels: int, config: HCOConfig, rng: np.random.Generator):
        self.mode = config.k_mode
        self.k_value = config.k_value
        if self.mode == "predicted":
            bound = 1.0 / np.sqrt(channels)
            self.weight = Parameter(rng.uniform(-bound, bound, size=(channels, 1)))
            self.bias = Parameter(np.zeros(1))
        elif self.mode == "learnable_scalar":
            # softplus^-1 of the fixed default so every mode starts from the same k
            self.raw = Parameter(np.array([np.log(np.expm1(config.k_value))]))

    def forward(self, fes: FrequencyEmbedding | None, shape: tuple) -> Tensor:
        if self.mode == "predicted":
            if fes is None:
                raise ConfigError("predicted k needs frequency embeddings")
            k = predict_diffusivity(fes.value, self.weight, self.bias)
            if k.shape != tuple(shape):
                raise ShapeError(f"frequency embedding shape {k.shape} does not match {shape}")
            return k
        if self.mode == "learnable_scalar":
            return softplus(self.raw) * Tensor(np.ones(shape, dtype=self.raw.dtype))
        return Tensor(np.full(shape, self.k_value, dtype=get_dtype()))
