"""Orthonormal 2D spectral transforms over the two trailing axes.

Every transform has two numerically independent paths:

* ``matrix`` -- explicit separable matrix products (the reference path);
* ``fast``   -- FFT-based DCT/DFT and pairwise lifting for Haar.

``method="auto"`` picks the matrix path while both extents are at most
:data:`MATRIX_LIMIT` and the fast path above.  All transforms are linear, so
their backward passes are the adjoint transforms.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .tensor import ConfigError, ShapeError, Tensor, as_tensor

__all__ = [
    "MATRIX_LIMIT",
    "SymmetryError",
    "ComplexPair",
    "FrequencyGrid",
    "frequency_grid",
    "dct_matrix",
    "haar_matrix",
    "dct2",
    "idct2",
    "dft2",
    "idft2",
    "haar2",
    "ihaar2",
    "is_power_of_two",
]

MATRIX_LIMIT = 64


class SymmetryError(ValueError):
    """A spectrum that should be Hermitian-symmetric is not."""


@dataclass(frozen=True)
class ComplexPair:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real/imag shapes differ: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


@dataclass(frozen=True)
class FrequencyGrid:
    """Per-row (``vx``) and per-column (``vy``) frequencies in radians per sample."""

    height: int
    width: int
    vx: np.ndarray
    vy: np.ndarray
    kind: str

    def squared_norm(self) -> np.ndarray:
        return self.vx[:, None] ** 2 + self.vy[None, :] ** 2


def frequency_grid(height: int, width: int, kind: str = "dct") -> FrequencyGrid:
    """Frequency values for a coefficient grid.

    ``kind="dct"`` (also used for Haar, by coefficient position) gives
    ``pi * i / n``; ``kind="dft"`` gives the aliased magnitude
    ``2 pi min(i, n - i) / n``.
    """
    if height < 1 or width < 1:
        raise ConfigError(f"grid extents must be positive, got {height}x{width}")
    if kind in ("dct", "haar"):
        vx = np.pi * np.arange(height) / height
        vy = np.pi * np.arange(width) / width
    elif kind == "dft":
        i, j = np.arange(height), np.arange(width)
        vx = 2 * np.pi * np.minimum(i, height - i) / height
        vy = 2 * np.pi * np.minimum(j, width - j) / width
    else:
        raise ConfigError(f"unknown frequency convention {kind!r}")
    return FrequencyGrid(height, width, vx, vy, "dft" if kind == "dft" else "dct")


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix: rows are cosine basis vectors."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    c = np.cos(np.pi * i * (2 * j + 1) / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


@lru_cache(maxsize=None)
def dft_matrix(n: int) -> np.ndarray:
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


@lru_cache(maxsize=None)
def haar_matrix(n: int) -> np.ndarray:
    """One analysis level of the orthonormal Haar transform on ``n`` samples."""
    m = np.zeros((n, n))
    half = n // 2
    r = np.arange(half)
    m[r, 2 * r] = m[r, 2 * r + 1] = np.sqrt(0.5)
    m[half + r, 2 * r] = np.sqrt(0.5)
    m[half + r, 2 * r + 1] = -np.sqrt(0.5)
    return m


def _use_matrix(shape, method: str) -> bool:
    if method == "matrix":
        return True
    if method == "fast":
        return False
    if method != "auto":
        raise ConfigError(f"unknown transform method {method!r}")
    return max(shape[-2:]) <= MATRIX_LIMIT


def _sep(a: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ x @ b.T`` over the trailing two axes, as two flat matrix products."""
    *lead, h, w = x.shape
    y = x.reshape(-1, w) @ b.T
    y = np.swapaxes(y.reshape(-1, h, b.shape[0]), 1, 2).reshape(-1, h) @ a.T
    return np.swapaxes(y.reshape(-1, b.shape[0], a.shape[0]), 1, 2).reshape(*lead, a.shape[0], b.shape[0])


# ---------------------------------------------------------------------------
# numpy kernels

def _dct2_np(x: np.ndarray, inverse: bool, matrix: bool) -> np.ndarray:
    h, w = x.shape[-2:]
    if matrix:
        ch, cw = dct_matrix(h).astype(x.dtype), dct_matrix(w).astype(x.dtype)
        return _sep(ch.T, x, cw.T) if inverse else _sep(ch, x, cw)
    fn = scipy.fft.idctn if inverse else scipy.fft.dctn
    return fn(x, type=2, norm="ortho", axes=(-2, -1)).astype(x.dtype, copy=False)


def _dft2_np(x: np.ndarray, matrix: bool) -> np.ndarray:
    """Unnormalised forward DFT of a real or complex array."""
    h, w = x.shape[-2:]
    if matrix:
        return _sep(dft_matrix(h), x, dft_matrix(w))
    return np.fft.fft2(x, axes=(-2, -1))


def _idft2_np(z: np.ndarray, matrix: bool) -> np.ndarray:
    h, w = z.shape[-2:]
    if matrix:
        return _sep(dft_matrix(h).conj(), z, dft_matrix(w).conj()) / (h * w)
    return np.fft.ifft2(z, axes=(-2, -1))


def _haar_levels(h: int, w: int):
    levels = []
    while h > 1 or w > 1:
        levels.append((h, w))
        h, w = max(h // 2, 1), max(w // 2, 1)
    return levels


def _haar_check(shape) -> None:
    h, w = shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ConfigError(f"Haar transform needs power-of-two extents, got {h}x{w}")


def _lift_rows(a: np.ndarray, axis: int) -> np.ndarray:
    even = np.take(a, np.arange(0, a.shape[axis], 2), axis=axis)
    odd = np.take(a, np.arange(1, a.shape[axis], 2), axis=axis)
    return np.concatenate([(even + odd), (even - odd)], axis=axis) * np.sqrt(0.5)


def _unlift_rows(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    s, d = np.split(a, 2, axis=axis)
    even, odd = (s + d) * np.sqrt(0.5), (s - d) * np.sqrt(0.5)
    out = np.empty_like(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(0, n, 2)
    out[tuple(idx)] = even
    idx[axis] = slice(1, n, 2)
    out[tuple(idx)] = odd
    return out


def _haar2_np(x: np.ndarray, inverse: bool, matrix: bool) -> np.ndarray:
    _haar_check(x.shape)
    out = np.array(x, copy=True)
    levels = _haar_levels(*x.shape[-2:])
    if inverse:
        levels = levels[::-1]
    for h, w in levels:
        block = out[..., :h, :w]
        if matrix:
            mh = haar_matrix(h).astype(x.dtype) if h > 1 else np.ones((1, 1), x.dtype)
            mw = haar_matrix(w).astype(x.dtype) if w > 1 else np.ones((1, 1), x.dtype)
            block = _sep(mh.T, block, mw.T) if inverse else _sep(mh, block, mw)
        else:
            step = _unlift_rows if inverse else _lift_rows
            if h > 1:
                block = step(block, block.ndim - 2)
            if w > 1:
                block = step(block, block.ndim - 1)
        out[..., :h, :w] = block
    return out


# ---------------------------------------------------------------------------
# differentiable wrappers

def _linear_op(x, forward, adjoint) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(forward(x.data), (x,), lambda g: x._accum(adjoint(g)))


def dct2(x, method: str = "auto") -> Tensor:
    """Orthonormal type-II DCT along both spatial axes."""
    m = _use_matrix(as_tensor(x).shape, method)
    return _linear_op(x, lambda a: _dct2_np(a, False, m), lambda g: _dct2_np(g, True, m))


def idct2(x, method: str = "auto") -> Tensor:
    """Inverse of :func:`dct2` (orthonormal type-III)."""
    m = _use_matrix(as_tensor(x).shape, method)
    return _linear_op(x, lambda a: _dct2_np(a, True, m), lambda g: _dct2_np(g, False, m))


def haar2(x, method: str = "auto") -> Tensor:
    """Full-depth orthonormal 2D Haar decomposition (Mallat layout)."""
    x = as_tensor(x)
    _haar_check(x.shape)
    m = _use_matrix(x.shape, method)
    return _linear_op(x, lambda a: _haar2_np(a, False, m), lambda g: _haar2_np(g, True, m))


def ihaar2(x, method: str = "auto") -> Tensor:
    x = as_tensor(x)
    _haar_check(x.shape)
    m = _use_matrix(x.shape, method)
    return _linear_op(x, lambda a: _haar2_np(a, True, m), lambda g: _haar2_np(g, False, m))


def dft2(x, method: str = "auto") -> ComplexPair:
    """Unnormalised forward 2D DFT of a real field, returned as real/imag tensors."""
    x = as_tensor(x)
    m = _use_matrix(x.shape, method)
    h, w = x.shape[-2:]
    y = _dft2_np(x.data, m)
    dtype = x.dtype

    # adjoint of the forward DFT is (H*W) * inverse DFT
    def from_real(g):
        x._accum((h * w * _idft2_np(g, m).real).astype(dtype, copy=False))

    def from_imag(g):
        x._accum((-h * w * _idft2_np(g, m).imag).astype(dtype, copy=False))

    re = Tensor._result(np.ascontiguousarray(y.real, dtype=dtype), (x,), from_real)
    im = Tensor._result(np.ascontiguousarray(y.imag, dtype=dtype), (x,), from_imag)
    return ComplexPair(re, im)


def hermitian_residual(z: np.ndarray) -> float:
    """Largest deviation of ``z[i, j]`` from ``conj(z[-i, -j])``."""
    mirrored = np.roll(np.flip(z, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))
    return float(np.max(np.abs(z - mirrored.conj()), initial=0.0))


def idft2(z: ComplexPair, method: str = "auto", check: bool = True, tol: float = 1e-6) -> Tensor:
    """Normalised inverse 2D DFT returning the real reconstruction.

    With ``check`` the spectrum must be Hermitian-symmetric within ``tol``
    (relative to its largest magnitude), otherwise :class:`SymmetryError`.
    """
    re, im = z.real, z.imag
    m = _use_matrix(re.shape, method)
    h, w = re.shape[-2:]
    zc = re.data + 1j * im.data
    if check:
        scale = max(1.0, float(np.max(np.abs(zc), initial=0.0)))
        resid = hermitian_residual(zc)
        if resid > tol * scale:
            raise SymmetryError(f"spectrum is not Hermitian (residual {resid:.3e}, tolerance {tol:g})")
    dtype = re.dtype
    out = np.ascontiguousarray(_idft2_np(zc, m).real, dtype=dtype)

    def backward(g):
        p = _dft2_np(g, m) / (h * w)
        re._accum(p.real.astype(dtype, copy=False))
        im._accum(p.imag.astype(dtype, copy=False))

    return Tensor._result(out, (re, im), backward)
