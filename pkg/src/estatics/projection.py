"""Rigid transforms and trilinear pull/push resampling.

World coordinates of a grid are centred: ``world = (index - (n - 1) / 2) * spacing``.
A :class:`RigidTransform` maps native-space world coordinates of a series
onto reconstruction world coordinates, so :func:`pull` samples a
reconstruction-space field at the native voxel centres.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from .volume import Grid3


@dataclass(frozen=True, eq=False)
class RigidTransform:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"rigid transform must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("rigid transform has non-finite entries")
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-10, rtol=0):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(rot) < 0 or not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("matrix is not a proper rigid transform")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_params(cls, params) -> "RigidTransform":
        """Build from ``(tx, ty, tz, rx, ry, rz)``: mm and the rotation vector in radians.

        The rotation is the matrix exponential of the skew matrix of the
        rotation vector.
        """
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (6,):
            raise ValueError("expected 6 rigid parameters")
        m = np.eye(4)
        m[:3, :3] = Rotation.from_rotvec(p[3:]).as_matrix()
        m[:3, 3] = p[:3]
        return cls(m)

    def inverse(self) -> "RigidTransform":
        m = np.eye(4)
        rot = self.matrix[:3, :3]
        m[:3, :3] = rot.T
        m[:3, 3] = -rot.T @ self.matrix[:3, 3]
        return RigidTransform(m)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(4)))

    def __eq__(self, other):
        return isinstance(other, RigidTransform) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def is_identity(t: RigidTransform | None) -> bool:
    return t is None or t.is_identity


def voxel_to_world(grid: Grid3) -> np.ndarray:
    m = np.eye(4)
    h = np.asarray(grid.spacing)
    m[:3, :3] = np.diag(h)
    m[:3, 3] = -(np.asarray(grid.dims) - 1) / 2 * h
    return m


def _axis_weights(coord: np.ndarray, n: int):
    # replicate extension: clamp sample positions into the field
    coord = np.clip(coord, 0.0, n - 1)
    lo = np.floor(coord)
    frac = coord - lo
    lo = lo.astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, frac


@lru_cache(maxsize=64)
def _pull_matrix(key: bytes, src: Grid3, out: Grid3) -> sparse.csr_matrix:
    m = np.frombuffer(key, dtype=np.float64).reshape(4, 4)
    vox = np.linalg.inv(voxel_to_world(src)) @ m @ voxel_to_world(out)
    idx = np.indices(out.dims, dtype=np.float64).reshape(3, -1)
    coords = vox[:3, :3] @ idx + vox[:3, 3:4]
    snapped = np.round(coords)
    coords = np.where(np.abs(coords - snapped) < 1e-9, snapped, coords)

    parts = [_axis_weights(coords[a], src.dims[a]) for a in range(3)]
    nx, ny, nz = src.dims
    rows, cols, vals = [], [], []
    row = np.arange(out.n_voxels)
    for cx in (0, 1):
        ix = parts[0][cx]
        wx = parts[0][2] if cx else 1.0 - parts[0][2]
        for cy in (0, 1):
            iy = parts[1][cy]
            wy = parts[1][2] if cy else 1.0 - parts[1][2]
            for cz in (0, 1):
                iz = parts[2][cz]
                wz = parts[2][2] if cz else 1.0 - parts[2][2]
                w = wx * wy * wz
                keep = w != 0
                rows.append(row[keep])
                cols.append(((ix * ny + iy) * nz + iz)[keep])
                vals.append(w[keep])
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(out.n_voxels, src.n_voxels),
    )
    mat.sum_duplicates()
    return mat


def pull_matrix(t: RigidTransform, src: Grid3, out: Grid3) -> sparse.csr_matrix:
    """Sparse trilinear sampling operator from ``src`` onto ``out`` under ``t``."""
    return _pull_matrix(np.ascontiguousarray(t.matrix).tobytes(), src, out)


def pull(f: np.ndarray, t: RigidTransform | None, out_grid: Grid3,
         src_grid: Grid3 | None = None) -> np.ndarray:
    """Sample ``f`` (leading channel axes allowed) at the voxel centres of ``out_grid``."""
    f = np.asarray(f, dtype=np.float64)
    if src_grid is None:
        src_grid = Grid3(f.shape[-3:], out_grid.spacing)
    if is_identity(t) and src_grid == out_grid:
        return f.copy()
    t = t or RigidTransform.identity()
    lead = f.shape[:-3]
    flat = f.reshape(-1, src_grid.n_voxels)
    out = (pull_matrix(t, src_grid, out_grid) @ flat.T).T
    return out.reshape(lead + out_grid.dims)


def push(g: np.ndarray, t: RigidTransform | None, recon_grid: Grid3,
         native_grid: Grid3 | None = None) -> np.ndarray:
    """Adjoint of :func:`pull`: scatter native-grid values back onto ``recon_grid``."""
    g = np.asarray(g, dtype=np.float64)
    if native_grid is None:
        native_grid = Grid3(g.shape[-3:], recon_grid.spacing)
    if is_identity(t) and native_grid == recon_grid:
        return g.copy()
    t = t or RigidTransform.identity()
    lead = g.shape[:-3]
    flat = g.reshape(-1, native_grid.n_voxels)
    out = (pull_matrix(t, recon_grid, native_grid).T @ flat.T).T
    return out.reshape(lead + recon_grid.dims)
