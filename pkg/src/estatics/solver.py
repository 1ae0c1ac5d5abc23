"""Newton-system solvers: multigrid on a stiffer substitute system, then CG.

The Newton system is ``(H_d + L (x) diag(lam)) x = g``. ``H_d`` has one
symmetric arrow block per voxel: every intercept channel couples only to
itself and to the decay channel. ``L`` is the weighted membrane operator.
The substitute system replaces ``L`` by ``L / min(w)`` with uniform weights,
which dominates ``L`` and is cheap to relax with multigrid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .volume import Grid3

log = logging.getLogger(__name__)


class SolverError(ArithmeticError):
    """Non-finite iterate: the operator is not positive definite."""


@dataclass(frozen=True)
class SolverConfig:
    cg_tol: float = 1e-4
    cg_max_iter: int = 100
    vcycles: int = 2
    pre_sweeps: int = 2
    post_sweeps: int = 2
    coarsest_size: int = 4
    max_levels: int = 6

    def __post_init__(self):
        if not 0 < self.cg_tol < 1:
            raise ValueError("cg_tol must be in (0, 1)")
        if min(self.cg_max_iter, self.vcycles, self.max_levels) < 1:
            raise ValueError("iteration caps must be positive")


@dataclass(frozen=True)
class ArrowBlocks:
    """Per-voxel symmetric arrow blocks.

    ``diag`` has shape (C+1, *dims) with the decay entry last and ``cross``
    (C, *dims) holds the intercept/decay couplings.
    """

    diag: np.ndarray
    cross: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = self.diag * x
        out[:-1] += self.cross * x[-1]
        out[-1] += np.sum(self.cross * x[:-1], axis=0)
        return out

    def solve(self, g: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
        """Solve each voxel block exactly; ``extra`` is added to the diagonal.

        Unknowns with zero curvature (no data and no prior) get a zero step.
        """
        d = self.diag if extra is None else self.diag + extra
        b = self.cross
        dc = d[:-1]
        ratio = np.divide(b, dc, out=np.zeros_like(b), where=dc > 0)
        schur = d[-1] - np.sum(b * ratio, axis=0)
        out = np.empty_like(g)
        num = g[-1] - np.sum(ratio * g[:-1], axis=0)
        out[-1] = np.divide(num, schur, out=np.zeros_like(num), where=schur > 0)
        num = g[:-1] - b * out[-1]
        out[:-1] = np.divide(num, dc, out=np.zeros_like(num), where=dc > 0)
        return out

    def dense(self, index: tuple[int, int, int]) -> np.ndarray:
        n = self.diag.shape[0]
        m = np.diag(self.diag[(slice(None),) + index])
        m[:-1, -1] = m[-1, :-1] = self.cross[(slice(None),) + index]
        return m

    def map(self, fn) -> "ArrowBlocks":
        return ArrowBlocks(fn(self.diag), fn(self.cross))


_NO_WEIGHTS = np.ones((1, 1, 1))
# diagonal multiplier standing in for a fixed unknown in the substitute system
PIN_FACTOR = 1e6


def _inv_h2(grid: Grid3) -> np.ndarray:
    return 1.0 / np.asarray(grid.spacing, dtype=np.float64) ** 2


@dataclass(frozen=True)
class NewtonSystem:
    hess: ArrowBlocks
    weights: np.ndarray | None
    lam: np.ndarray
    grid: Grid3
    # extra factor on the membrane, used by the substitute system
    scale: float = 1.0
    # decay unknowns held fixed: decoupled from their neighbours and the
    # intercepts, keeping only their own diagonal entry
    fixed: np.ndarray | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if self.fixed is not None:
            xf = x[-1][self.fixed]
            x = x.copy()
            x[-1][self.fixed] = 0.0
        weighted = self.weights is not None
        inv_w = np.ascontiguousarray(1.0 / self.weights) if weighted else _NO_WEIGHTS
        out = _kernels.system_apply(
            x, np.ascontiguousarray(self.hess.diag), np.ascontiguousarray(self.hess.cross),
            inv_w, weighted,
            np.asarray(self.lam, dtype=np.float64), _inv_h2(self.grid), float(self.scale),
            np.empty_like(x))
        if self.fixed is not None:
            out[-1][self.fixed] = self.hess.diag[-1][self.fixed] * xf
        return out

    def substitute(self) -> "NewtonSystem":
        """Uniform-weight system with ``L / min(w)``.

        Fixed unknowns are approximated by a very stiff diagonal, which the
        multigrid levels can restrict like any other block.
        """
        scale = self.scale
        if self.weights is not None:
            scale = scale / float(np.min(self.weights))
        hess = self.hess
        if self.fixed is not None:
            ref = hess.diag[-1] + 2.0 * scale * self.lam[-1] * float(_inv_h2(self.grid).sum())
            diag = hess.diag.copy()
            diag[-1] = np.where(self.fixed, hess.diag[-1] + PIN_FACTOR * ref, hess.diag[-1])
            hess = ArrowBlocks(diag, hess.cross)
        elif self.weights is None:
            return self
        return NewtonSystem(hess, None, self.lam, self.grid, scale)

    def dense(self) -> np.ndarray:
        n = self.lam.size * self.grid.n_voxels
        eye = np.eye(n)
        shape = (self.lam.size,) + self.grid.dims
        cols = [self.apply(eye[k].reshape(shape)).ravel() for k in range(n)]
        return np.array(cols).T


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.ravel(), b.ravel()))


def cg_solve(sys: NewtonSystem, g: np.ndarray, x0: np.ndarray | None = None,
             cfg: SolverConfig = SolverConfig(), history: list | None = None):
    """Plain conjugate gradients. Returns ``(x, iterations, relative_residual)``."""
    x = np.zeros_like(g) if x0 is None else np.array(x0, dtype=np.float64)
    gnorm = np.sqrt(_dot(g, g))
    if gnorm == 0:
        return np.zeros_like(g), 0, 0.0
    r = g - sys.apply(x)
    rr = _dot(r, r)
    if not np.isfinite(rr):
        raise SolverError("non-finite CG starting point or right-hand side")
    rel = np.sqrt(rr) / gnorm
    if history is not None:
        history.append(rel)
    it = 0
    p = r.copy()
    while rel >= cfg.cg_tol and it < cfg.cg_max_iter:
        q = sys.apply(p)
        alpha = rr / _dot(p, q)
        x += alpha * p
        r -= alpha * q
        rr_new = _dot(r, r)
        it += 1
        if not np.isfinite(rr_new):
            raise SolverError(f"non-finite CG iterate at iteration {it}")
        p = r + (rr_new / rr) * p
        rr = rr_new
        rel = np.sqrt(rr) / gnorm
        if history is not None:
            history.append(rel)
    return x, it, rel


# -- multigrid ---------------------------------------------------------------


def _coarse_dim(n: int) -> int:
    return (n + 1) // 2 if n > 1 else 1


def _prolong_1d(nc: int, nf: int) -> np.ndarray:
    """Linear interpolation matrix (nf, nc).

    Odd sizes are vertex-centred (end points aligned, exact 2:1), even sizes
    cell-centred with replicated ends.
    """
    p = np.zeros((nf, nc))
    if nc == 1:
        p[:, 0] = 1.0
        return p
    if nf % 2:
        pos = np.arange(nf) / 2.0
    else:
        pos = np.clip((np.arange(nf) + 0.5) / 2.0 - 0.5, 0.0, nc - 1)
    lo = np.minimum(np.floor(pos).astype(int), nc - 1)
    hi = np.minimum(lo + 1, nc - 1)
    frac = pos - lo
    p[np.arange(nf), lo] += 1.0 - frac
    p[np.arange(nf), hi] += frac
    return p


def _apply_sep(mats, x: np.ndarray) -> np.ndarray:
    # x: (..., n0, n1, n2); apply one matrix per spatial axis
    out = x @ mats[2].T
    out = mats[1] @ out
    lead, (n0, n1, n2) = out.shape[:-3], out.shape[-3:]
    out = mats[0] @ out.reshape(lead + (n0, n1 * n2))
    return out.reshape(lead + (mats[0].shape[0], n1, n2))


def _coarse_grid(grid: Grid3) -> Grid3:
    dims = tuple(_coarse_dim(n) for n in grid.dims)
    spacing = tuple(h * 2 if m < n else h for h, n, m in zip(grid.spacing, grid.dims, dims))
    return Grid3(dims, spacing)


def prolongation(fine: Grid3, coarse: Grid3):
    """Per-axis interpolation matrices from ``coarse`` to ``fine``."""
    return [_prolong_1d(c, f) for c, f in zip(coarse.dims, fine.dims)]


def prolong(mats, x: np.ndarray) -> np.ndarray:
    return _apply_sep(mats, x)


def restrict(mats, x: np.ndarray) -> np.ndarray:
    """Full-weighting restriction ``P^T / 8``."""
    return _apply_sep([m.T for m in mats], x) / 8.0


def _restrict_average(mats, x: np.ndarray) -> np.ndarray:
    # P^T normalised by its row sums: the residual equation on coarse cells
    num = _apply_sep([m.T for m in mats], x)
    den = _apply_sep([m.T for m in mats], np.ones(x.shape[-3:]))
    return num / den


class _LevelOp:
    """Uniform membrane plus arrow blocks, with per-axis row scales on coarse levels.

    The row scales approximate the Galerkin operator near the boundary,
    where coarse cells cover fewer fine cells.
    """

    def __init__(self, hess: ArrowBlocks, lam: np.ndarray, grid: Grid3, axis_scales=None):
        self.hess = ArrowBlocks(np.ascontiguousarray(hess.diag), np.ascontiguousarray(hess.cross))
        self.lam = np.asarray(lam, dtype=np.float64).ravel()
        self.grid = grid
        self.axis_scales = [np.ones(n) if s is None else np.ascontiguousarray(s, dtype=np.float64)
                            for n, s in zip(grid.dims, axis_scales or [None] * 3)]
        self._ih2 = _inv_h2(grid)

    def _args(self):
        return (self.hess.diag, self.hess.cross, self.lam, self._ih2, *self.axis_scales)

    def residual(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return _kernels.level_residual(x, g, *self._args(), np.empty_like(x))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        return -self.residual(x, np.zeros_like(x))

    def smooth(self, x: np.ndarray, g: np.ndarray, sweeps: int) -> np.ndarray:
        for _ in range(sweeps):
            for colour in (0, 1):
                _kernels.gs_sweep(x, g, *self._args(), colour)
        return x

    def dense(self) -> np.ndarray:
        n = self.lam.size * self.grid.n_voxels
        eye = np.eye(n)
        shape = (self.lam.size,) + self.grid.dims
        return np.array([self.apply(eye[k].reshape(shape)).ravel() for k in range(n)]).T


@dataclass
class _Level:
    op: _LevelOp
    prolong: list = field(default_factory=list)  # to the next coarser level


def _build_levels(sys: NewtonSystem, cfg: SolverConfig) -> list[_Level]:
    op = _LevelOp(sys.hess, sys.scale * sys.lam, sys.grid)
    levels = [_Level(op)]
    while (len(levels) < cfg.max_levels
           and min(levels[-1].op.grid.dims) > cfg.coarsest_size):
        fine = levels[-1].op
        cgrid = _coarse_grid(fine.grid)
        mats = prolongation(fine.grid, cgrid)
        hess = fine.hess.map(lambda a: _restrict_average(mats, a))
        scales = []
        for a, m in enumerate(mats):
            rows = m.sum(axis=0)
            prev = fine.axis_scales[a]
            scales.append((m.T @ prev) / rows * (2.0 / rows))
        levels[-1].prolong = mats
        levels.append(_Level(_LevelOp(hess, fine.lam, cgrid, scales)))
    return levels


class _CoarseSolver:
    def __init__(self, op: _LevelOp):
        self.shape = (op.lam.size,) + op.grid.dims
        self.pinv = np.linalg.pinv(op.dense())

    def __call__(self, g: np.ndarray) -> np.ndarray:
        return (self.pinv @ g.ravel()).reshape(self.shape)


def _vcycle(levels, coarse, x, g, cfg, k=0):
    level = levels[k]
    if k == len(levels) - 1:
        return coarse(g)
    x = level.op.smooth(x, g, cfg.pre_sweeps)
    r = level.op.residual(x, g)
    mats = level.prolong
    rc = _restrict_average(mats, r)
    ec = _vcycle(levels, coarse, np.zeros_like(rc), rc, cfg, k + 1)
    x = x + prolong(mats, ec)
    return level.op.smooth(x, g, cfg.post_sweeps)


def multigrid(sys: NewtonSystem, g: np.ndarray, cfg: SolverConfig = SolverConfig(),
              x0: np.ndarray | None = None, cycles: int | None = None,
              history: list | None = None) -> np.ndarray:
    """Run V-cycles on ``sys`` itself (uniform membrane weights expected)."""
    if np.all(sys.lam == 0):
        return sys.hess.solve(g)
    if sys.weights is not None:
        raise ValueError("multigrid expects a uniform-weight system")
    levels = _build_levels(sys, cfg)
    coarse = _CoarseSolver(levels[-1].op)
    g = np.ascontiguousarray(g, dtype=np.float64)
    x = np.zeros_like(g) if x0 is None else np.array(x0, dtype=np.float64)
    for _ in range(cfg.vcycles if cycles is None else cycles):
        x = _vcycle(levels, coarse, x, g, cfg)
        if history is not None:
            history.append(float(np.linalg.norm(g - sys.apply(x))))
    return x


def vcycle_substitute(sys: NewtonSystem, g: np.ndarray,
                      cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Approximate solution of the substitute system ``H_d + L/min(w) (x) diag(lam)``."""
    return multigrid(sys.substitute(), g, cfg)


@dataclass(frozen=True)
class SolveReport:
    warm_residual: float
    cg_iterations: int
    final_residual: float


def solve_newton_system(sys: NewtonSystem, g: np.ndarray,
                        cfg: SolverConfig = SolverConfig()):
    """Multigrid warm start on the substitute system, refined by CG on the true one."""
    x_warm = vcycle_substitute(sys, g, cfg)
    gnorm = np.linalg.norm(g)
    warm_res = float(np.linalg.norm(g - sys.apply(x_warm)) / gnorm) if gnorm else 0.0
    x, it, res = cg_solve(sys, g, x_warm, cfg)
    log.debug("newton solve: warm residual %.3g, %d CG iterations, final %.3g",
              warm_res, it, res)
    return x, SolveReport(warm_res, it, res)
