"""Compiled inner loops for the Newton-system operators and the smoother.

All arrays are C-contiguous float64 with channels first. ``sx``, ``sy``,
``sz`` are per-axis membrane row scales (ones on the
finest level). The weighted kernel uses edge weights
``(1/w_p + 1/w_q) / 2``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def system_apply(x, diag, cross, inv_w, weighted, lam, ih2, scale, out):
    """``out = H_d x + scale * lam * L_w x`` on the finest grid."""
    nc1, nx, ny, nz = x.shape
    nc = nc1 - 1
    for c in range(nc1):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    out[c, i, j, k] = diag[c, i, j, k] * x[c, i, j, k]
    for c in range(nc):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    out[c, i, j, k] += cross[c, i, j, k] * x[nc, i, j, k]
                    out[nc, i, j, k] += cross[c, i, j, k] * x[c, i, j, k]
    # each lattice edge once: flux into both end points
    for c in range(nc1):
        if lam[c] == 0.0:
            continue
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    xp = x[c, i, j, k]
                    if i + 1 < nx:
                        e = lam[c] * scale * ih2[0]
                        if weighted:
                            e *= 0.5 * (inv_w[i, j, k] + inv_w[i + 1, j, k])
                        f = e * (xp - x[c, i + 1, j, k])
                        out[c, i, j, k] += f
                        out[c, i + 1, j, k] -= f
                    if j + 1 < ny:
                        e = lam[c] * scale * ih2[1]
                        if weighted:
                            e *= 0.5 * (inv_w[i, j, k] + inv_w[i, j + 1, k])
                        f = e * (xp - x[c, i, j + 1, k])
                        out[c, i, j, k] += f
                        out[c, i, j + 1, k] -= f
                    if k + 1 < nz:
                        e = lam[c] * scale * ih2[2]
                        if weighted:
                            e *= 0.5 * (inv_w[i, j, k] + inv_w[i, j, k + 1])
                        f = e * (xp - x[c, i, j, k + 1])
                        out[c, i, j, k] += f
                        out[c, i, j, k + 1] -= f
    return out


@njit(cache=True)
def _membrane_row(x, c, i, j, k, ih2, sx, sy, sz):
    """Returns (sum_q e_pq (x_p - x_q), sum_q e_pq) for the uniform level membrane."""
    nx, ny, nz = x.shape[1], x.shape[2], x.shape[3]
    xp = x[c, i, j, k]
    acc = 0.0
    dsum = 0.0
    e = ih2[0] * sx[i]
    if i + 1 < nx:
        acc += e * (xp - x[c, i + 1, j, k])
        dsum += e
    if i > 0:
        acc += e * (xp - x[c, i - 1, j, k])
        dsum += e
    e = ih2[1] * sy[j]
    if j + 1 < ny:
        acc += e * (xp - x[c, i, j + 1, k])
        dsum += e
    if j > 0:
        acc += e * (xp - x[c, i, j - 1, k])
        dsum += e
    e = ih2[2] * sz[k]
    if k + 1 < nz:
        acc += e * (xp - x[c, i, j, k + 1])
        dsum += e
    if k > 0:
        acc += e * (xp - x[c, i, j, k - 1])
        dsum += e
    return acc, dsum


@njit(cache=True)
def level_residual(x, g, diag, cross, lam, ih2, sx, sy, sz, out):
    """``out = g - (H_d + lam L) x`` for a uniform-weight level operator."""
    nc1, nx, ny, nz = x.shape
    nc = nc1 - 1
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                xr = x[nc, i, j, k]
                acc_r = diag[nc, i, j, k] * xr
                for c in range(nc):
                    acc_r += cross[c, i, j, k] * x[c, i, j, k]
                    hx = diag[c, i, j, k] * x[c, i, j, k] + cross[c, i, j, k] * xr
                    m, _ = _membrane_row(x, c, i, j, k, ih2, sx, sy, sz)
                    out[c, i, j, k] = g[c, i, j, k] - hx - lam[c] * m
                m, _ = _membrane_row(x, nc, i, j, k, ih2, sx, sy, sz)
                out[nc, i, j, k] = g[nc, i, j, k] - acc_r - lam[nc] * m
    return out


@njit(cache=True)
def gs_sweep(x, g, diag, cross, lam, ih2, sx, sy, sz, colour):
    """One in-place block Gauss-Seidel pass over voxels with ``(i+j+k) % 2 == colour``.

    Each voxel solves its arrow block (data block plus membrane diagonal)
    exactly against the current local residual.
    """
    nc1, nx, ny, nz = x.shape
    nc = nc1 - 1
    res = np.empty(nc1)
    dd = np.empty(nc1)
    for i in range(nx):
        for j in range(ny):
            k0 = (colour + i + j) % 2
            for k in range(k0, nz, 2):
                xr = x[nc, i, j, k]
                acc_r = diag[nc, i, j, k] * xr
                for c in range(nc):
                    acc_r += cross[c, i, j, k] * x[c, i, j, k]
                    hx = diag[c, i, j, k] * x[c, i, j, k] + cross[c, i, j, k] * xr
                    m, ds = _membrane_row(x, c, i, j, k, ih2, sx, sy, sz)
                    res[c] = g[c, i, j, k] - hx - lam[c] * m
                    dd[c] = diag[c, i, j, k] + lam[c] * ds
                m, ds = _membrane_row(x, nc, i, j, k, ih2, sx, sy, sz)
                res[nc] = g[nc, i, j, k] - acc_r - lam[nc] * m
                dd[nc] = diag[nc, i, j, k] + lam[nc] * ds
                # arrow block solve through the Schur complement of the decay entry
                # (unknowns without any curvature are left unchanged)
                schur = dd[nc]
                rhs = res[nc]
                for c in range(nc):
                    if dd[c] > 0.0:
                        ratio = cross[c, i, j, k] / dd[c]
                        schur -= cross[c, i, j, k] * ratio
                        rhs -= ratio * res[c]
                dr = rhs / schur if schur > 0.0 else 0.0
                x[nc, i, j, k] += dr
                for c in range(nc):
                    if dd[c] > 0.0:
                        x[c, i, j, k] += (res[c] - cross[c, i, j, k] * dr) / dd[c]
    return x
