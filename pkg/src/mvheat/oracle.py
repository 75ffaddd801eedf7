"""Finite-difference reference solver for the constant-k heat equation.

``u_t = k (u_xx + u_yy)`` is integrated with explicit Euler in time and the
5-point Laplacian in space.  Boundaries are either Neumann (ghost cells mirror
the edge cells, so no heat leaves the domain) or periodic.

The input field lives on the unit pixel grid.  With ``dx < 1`` the oracle
first prolongs it to a finer grid by summing its own cosine (Neumann) or
Fourier (periodic) series -- evaluated directly, without the transforms
module -- integrates there and samples the result back at pixel positions.
Refining ``dx`` removes the spatial truncation error of the 5-point stencil,
so the FD answer converges to the spectral one at second order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError

__all__ = ["OracleGrid", "pde_oracle_solve", "stable_dt"]

BOUNDARIES = ("neumann", "periodic")


@dataclass
class OracleGrid:
    u: np.ndarray
    boundary: str = "neumann"
    dx: float = 1.0
    dt_fd: float | None = None
    cfl: float = 0.2

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 2:
            raise ConfigError(f"oracle field must be 2D, got shape {self.u.shape}")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"boundary must be one of {BOUNDARIES}")
        r = 1.0 / self.dx
        if abs(r - round(r)) > 1e-9 or round(r) < 1:
            raise ConfigError(f"dx must be 1/r for a positive integer r, got {self.dx}")

    @property
    def refine(self) -> int:
        return int(round(1.0 / self.dx))


def stable_dt(dx: float, k: float) -> float:
    """Largest stable explicit step, ``dx^2 / (4 k)``."""
    return np.inf if k == 0 else dx * dx / (4.0 * k)


def _cosine_prolong(f: np.ndarray, r: int) -> np.ndarray:
    def basis(n):
        i = np.arange(n)
        norm = np.where(i == 0, np.sqrt(1.0 / n), np.sqrt(2.0 / n))
        coarse = np.arange(n) + 0.5
        fine = (np.arange(n * r) + 0.5) / r
        return (norm[None, :] * np.cos(np.pi * i[None, :] * coarse[:, None] / n),
                norm[None, :] * np.cos(np.pi * i[None, :] * fine[:, None] / n))

    ch, fh = basis(f.shape[0])
    cw, fw = basis(f.shape[1])
    coeff = ch.T @ f @ cw
    return fh @ coeff @ fw.T


def _fourier_prolong(f: np.ndarray, r: int) -> np.ndarray:
    def basis(n):
        freq = np.arange(n)
        freq = np.where(freq > n // 2, freq - n, freq)
        coarse = np.arange(n)
        fine = np.arange(n * r) / r
        e_c = np.exp(-2j * np.pi * np.outer(freq, coarse) / n)
        e_f = np.exp(2j * np.pi * np.outer(fine, freq) / n)
        if n % 2 == 0:
            # the Nyquist term of a real signal is a cosine
            e_f[:, n // 2] = np.cos(np.pi * fine)
        return e_c, e_f

    ah, bh = basis(f.shape[0])
    aw, bw = basis(f.shape[1])
    coeff = ah @ f @ aw.T
    return (bh @ coeff @ bw.T).real / f.size


def _laplacian(u: np.ndarray, boundary: str) -> np.ndarray:
    p = np.pad(u, 1, mode="edge" if boundary == "neumann" else "wrap")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * u


def _restrict(fine: np.ndarray, r: int, boundary: str) -> np.ndarray:
    if r == 1:
        return fine
    if boundary == "periodic":
        return fine[::r, ::r]
    m = r // 2
    if r % 2:
        return fine[m::r, m::r]
    return 0.25 * (fine[m - 1::r, m - 1::r] + fine[m::r, m - 1::r]
                   + fine[m - 1::r, m::r] + fine[m::r, m::r])


def pde_oracle_solve(grid: OracleGrid, k: float, t: float, return_fine: bool = False) -> np.ndarray:
    """Integrate the heat equation from ``grid.u`` to time ``t``.

    The time step is ``grid.dt_fd`` if given, else ``cfl * dx^2 / k``; it is
    shortened so an integer number of steps lands exactly on ``t``.
    """
    if k < 0:
        raise ConfigError("oracle diffusivity must be nonnegative")
    if t < 0:
        raise ConfigError("oracle time must be nonnegative")
    dx, r = grid.dx, grid.refine
    dt = grid.dt_fd if grid.dt_fd is not None else (grid.cfl * dx * dx / k if k > 0 else t)
    if k > 0 and dt > stable_dt(dx, k) * (1 + 1e-12):
        raise ConfigError(f"oracle step {dt:g} exceeds the stability bound {stable_dt(dx, k):g}")
    prolong = _cosine_prolong if grid.boundary == "neumann" else _fourier_prolong
    u = grid.u.copy() if r == 1 else prolong(grid.u, r)
    if t > 0 and k > 0:
        n = int(np.ceil(t / dt - 1e-12))
        step = t / n
        coef = k * step / (dx * dx)
        for _ in range(n):
            u = u + coef * _laplacian(u, grid.boundary)
    return u if return_fine else _restrict(u, r, grid.boundary)
