"""Voxelwise loglinear ESTATICS fit with a decay shared across contrasts."""

from __future__ import annotations

import logging

import numpy as np

from .projection import is_identity, pull
from .volume import Dataset, ParameterMaps, check_dataset

log = logging.getLogger(__name__)

R_MAX = 2000.0


def series_on_recon_grid(d: Dataset, c: int) -> np.ndarray:
    """Echoes of series ``c`` resampled onto the reconstruction grid, (E, *dims)."""
    s = d.series[c]
    data = np.stack([e.data for e in s.echoes]).astype(np.float64)
    if is_identity(s.pose) and s.native_grid == d.recon_grid:
        return data
    pose = s.pose.inverse() if s.pose is not None else None
    return pull(data, pose, d.recon_grid, s.native_grid)


def fit_loglinear(d: Dataset, weighted: bool = False, r_max: float = R_MAX,
                  floor_rel: float = 1e-6, return_flags: bool = False):
    """Least-squares fit of ``ln s = theta_c - t r`` over all echoes of all contrasts.

    Each voxel solves a (C+1)x(C+1) arrow system in closed form: the
    intercepts are eliminated first, leaving a scalar equation in ``r``.
    ``weighted=True`` weights each log-echo by its squared magnitude.
    Intensities below ``floor_rel`` times the series mean get zero weight.
    The decay is clamped to ``[0, r_max]`` and the intercepts re-solved.
    """
    check_dataset(d)
    n_c = d.n_contrasts
    dims = d.recon_grid.dims
    sums = np.zeros((5, n_c) + dims)  # U, T, Y, TT, TY per contrast
    usable = np.zeros(dims, dtype=np.int64)
    for c in range(n_c):
        s = series_on_recon_grid(d, c)
        tes = d.series[c].tes.reshape((-1, 1, 1, 1))
        floor = floor_rel * max(float(s.mean()), np.finfo(float).tiny)
        ok = s > floor
        y = np.log(np.maximum(s, floor))
        u = ok * (s * s if weighted else 1.0)
        sums[0, c] = u.sum(0)
        sums[1, c] = (u * tes).sum(0)
        sums[2, c] = (u * y).sum(0)
        sums[3, c] = (u * tes * tes).sum(0)
        sums[4, c] = (u * tes * y).sum(0)
        usable += ok.sum(0)
    uu, tt, yy, t2, ty = sums
    has = uu > 0
    safe_u = np.where(has, uu, 1.0)
    num = np.where(has, ty - tt * yy / safe_u, 0.0).sum(0)
    den = np.where(has, t2 - tt * tt / safe_u, 0.0).sum(0)
    scale = np.max(np.where(has, t2, 0.0), axis=0)
    flags = (usable < 2) | (den <= 1e-12 * np.maximum(scale, np.finfo(float).tiny))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(flags, 0.0, -num / np.where(flags, 1.0, den))
    r = np.clip(r, 0.0, r_max)
    theta = np.where(has, (yy + r * tt) / safe_u, 0.0)
    if np.any(~has):
        # contrast with no usable echo here: fall back to the floor level
        for c in range(n_c):
            theta[c][~has[c]] = np.log(floor_rel)
        flags |= ~has.all(0)
    if flags.any():
        log.info("loglinear fit: %d flagged voxels", int(flags.sum()))
    maps = ParameterMaps(theta, r)
    return (maps, flags) if return_flags else maps
