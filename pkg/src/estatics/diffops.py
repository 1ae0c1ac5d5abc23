"""Finite differences, joint total variation weights and the membrane operator.

Each voxel carries six one-sided differences ``(+x, -x, +y, -y, +z, -z)``
scaled by ``1 / (spacing * sqrt(2))`` so that the forward and backward
copies of a lattice edge together count it once. Differences that would
leave the grid are zero (Neumann boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Grid3, ParameterMaps

EPS_W = 1e-5
MODES = ("none", "tikhonov", "jtv")


@dataclass(frozen=True)
class RegConfig:
    mode: str = "jtv"
    lam: tuple[float, ...] = (5e3, 5e3, 5e3, 10.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown regularisation mode {self.mode!r}")
        lam = tuple(float(v) for v in self.lam)
        if any(not np.isfinite(v) or v < 0 for v in lam):
            raise ValueError("regularisation factors must be finite and >= 0")
        object.__setattr__(self, "lam", lam)

    @classmethod
    def make(cls, mode: str, n_contrasts: int, intercept: float = 5e3,
             decay: float = 10.0) -> "RegConfig":
        return cls(mode, (intercept,) * n_contrasts + (decay,))

    def effective_lam(self) -> np.ndarray:
        lam = np.asarray(self.lam)
        return np.zeros_like(lam) if self.mode == "none" else lam


def _stack(maps) -> np.ndarray:
    return maps.stack() if isinstance(maps, ParameterMaps) else np.asarray(maps, dtype=np.float64)


def _axis_slices(ndim: int, axis: int):
    lo = [slice(None)] * ndim
    hi = [slice(None)] * ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return tuple(lo), tuple(hi)


def grad_apply(f: np.ndarray, grid: Grid3) -> np.ndarray:
    """Six scaled one-sided differences; output shape ``(*lead, 6, nx, ny, nz)``."""
    f = np.asarray(f, dtype=np.float64)
    out = np.zeros(f.shape[:-3] + (6,) + f.shape[-3:])
    for a in range(3):
        ax = f.ndim - 3 + a
        lo, hi = _axis_slices(f.ndim, ax)
        d = (f[hi] - f[lo]) / (grid.spacing[a] * np.sqrt(2.0))
        out[(..., 2 * a) + lo[-3:]] = d
        out[(..., 2 * a + 1) + hi[-3:]] = d
    return out


def grad_adjoint(g: np.ndarray, grid: Grid3) -> np.ndarray:
    """Exact transpose of :func:`grad_apply`."""
    g = np.asarray(g, dtype=np.float64)
    out = np.zeros(g.shape[:-4] + g.shape[-3:])
    nd = out.ndim
    for a in range(3):
        lo, hi = _axis_slices(nd, nd - 3 + a)
        s = 1.0 / (grid.spacing[a] * np.sqrt(2.0))
        e = g[(..., 2 * a) + lo[-3:]] + g[(..., 2 * a + 1) + hi[-3:]]
        out[lo] -= s * e
        out[hi] += s * e
    return out


def squared_gradient_norm(f: np.ndarray, grid: Grid3) -> np.ndarray:
    """Per-voxel ``|G_i f|^2`` without materialising the 6-vector field."""
    f = np.asarray(f, dtype=np.float64)
    out = np.zeros(f.shape)
    for a in range(3):
        lo, hi = _axis_slices(f.ndim, f.ndim - 3 + a)
        d2 = 0.5 * ((f[hi] - f[lo]) / grid.spacing[a]) ** 2
        out[lo] += d2
        out[hi] += d2
    return out


def jtv_weights(maps, lam, grid: Grid3, eps: float = EPS_W) -> np.ndarray:
    x = _stack(maps)
    lam = np.asarray(lam, dtype=np.float64)
    q = np.tensordot(lam, squared_gradient_norm(x, grid), axes=(0, 0))
    return np.maximum(eps, np.sqrt(q))


def jtv_energy_and_weights(maps, cfg: RegConfig, grid: Grid3,
                           eps: float = EPS_W) -> tuple[float, np.ndarray]:
    """JTV energy ``sum_i w_i`` and the closed-form bound weights ``w``."""
    if cfg.mode != "jtv":
        raise ValueError("jtv_energy_and_weights needs mode='jtv'")
    w = jtv_weights(maps, cfg.lam, grid, eps)
    return float(w.sum()), w


def _edge_weights(inv_w: np.ndarray | None, lo, hi):
    if inv_w is None:
        return 1.0
    return 0.5 * (inv_w[lo] + inv_w[hi])


def membrane_apply(maps, weights: np.ndarray | None, lam, grid: Grid3) -> np.ndarray:
    """Channelwise ``lam_c * L theta_c`` with ``L = sum_i G_i^T G_i / w_i``.

    ``weights=None`` means uniform unit weights (the Tikhonov membrane).
    """
    x = _stack(maps)
    lam = np.asarray(lam, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = np.zeros_like(x)
    inv_w = None if weights is None else 1.0 / np.asarray(weights, dtype=np.float64)
    for a in range(3):
        lo, hi = _axis_slices(3, a)
        ew = _edge_weights(inv_w, lo, hi) / grid.spacing[a] ** 2
        flux = (x[(slice(None),) + hi] - x[(slice(None),) + lo]) * ew
        out[(slice(None),) + lo] -= flux
        out[(slice(None),) + hi] += flux
    out *= lam.reshape((-1, 1, 1, 1))
    return out[0] if single else out


def membrane_diagonal(weights: np.ndarray | None, grid: Grid3) -> np.ndarray:
    """Diagonal of ``L`` (unit lambda) at every voxel."""
    diag = np.zeros(grid.dims)
    inv_w = None if weights is None else 1.0 / np.asarray(weights, dtype=np.float64)
    for a in range(3):
        lo, hi = _axis_slices(3, a)
        ew = _edge_weights(inv_w, lo, hi) / grid.spacing[a] ** 2
        diag[lo] += ew
        diag[hi] += ew
    return diag


def membrane_energy(maps, weights: np.ndarray | None, lam, grid: Grid3) -> float:
    """``sum_c lam_c theta_c^T L theta_c`` (no 1/2 factor)."""
    x = _stack(maps)
    lam = np.asarray(lam, dtype=np.float64)
    q = squared_gradient_norm(x, grid)
    if weights is not None:
        q = q / weights
    return float(np.tensordot(lam, q.reshape(len(lam), -1).sum(axis=1), axes=1))
