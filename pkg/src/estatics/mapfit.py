"""Nonlinear MAP ESTATICS fit with Tikhonov or joint total variation priors.

The data term is ``sum_{c,t} |s_ct - exp(Psi_c theta_c - t Psi_c r)|^2 / (2 sigma_c^2)``.
Each outer iteration refreshes the JTV bound weights, then takes Fisher
scoring Newton steps on the bounded objective, with backtracking so every
accepted step decreases it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffops
from .diffops import RegConfig
from .loglinear import R_MAX, fit_loglinear
from .projection import is_identity, pull_matrix
from .signal import NumericalError
from .solver import ArrowBlocks, NewtonSystem, SolverConfig, solve_newton_system
from .volume import Dataset, ParameterMaps, check_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    reg: RegConfig = RegConfig()
    max_outer: int = 30
    max_newton_per_outer: int = 1
    objective_tol: float = 1e-6
    solver: SolverConfig = SolverConfig()
    r_max: float = R_MAX
    max_halvings: int = 10

    def __post_init__(self):
        if self.max_outer < 1 or self.max_newton_per_outer < 1 or self.max_halvings < 0:
            raise ValueError("iteration caps must be positive")
        if not self.objective_tol > 0:
            raise ValueError("objective_tol must be > 0")


@dataclass
class FitReport:
    objective: list[float] = field(default_factory=list)
    data_term: list[float] = field(default_factory=list)
    prior_term: list[float] = field(default_factory=list)
    cg_iterations: list[int] = field(default_factory=list)
    warm_residuals: list[float] = field(default_factory=list)
    cg_residuals: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    status: str = "max_outer"

    def tick(self, stage: str, start: float) -> None:
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - start

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "data_term": self.data_term,
            "prior_term": self.prior_term,
            "cg_iterations": self.cg_iterations,
            "warm_residuals": self.warm_residuals,
            "cg_residuals": self.cg_residuals,
            "step_sizes": self.step_sizes,
            "timings": self.timings,
        }


class _Series:
    def __init__(self, d: Dataset, c: int):
        s = d.series[c]
        self.data = np.stack([e.data for e in s.echoes]).astype(np.float64)
        self.tes = s.tes.reshape((-1, 1, 1, 1))
        self.inv_var = 1.0 / s.sigma ** 2
        self.native_shape = s.native_grid.dims
        if is_identity(s.pose) and s.native_grid == d.recon_grid:
            self.psi = None
        else:
            pose = s.pose
            self.psi = pull_matrix(pose, d.recon_grid, s.native_grid)
            self.psi_t = self.psi.T.tocsr()
        self.recon_shape = d.recon_grid.dims

    def pull(self, f: np.ndarray) -> np.ndarray:
        if self.psi is None:
            return f
        return (self.psi @ f.reshape(f.shape[0], -1).T).T.reshape((f.shape[0],) + self.native_shape)

    def push(self, g: np.ndarray) -> np.ndarray:
        if self.psi is None:
            return g
        return (self.psi_t @ g.reshape(g.shape[0], -1).T).T.reshape((g.shape[0],) + self.recon_shape)

    def predict(self, theta_c: np.ndarray, r: np.ndarray) -> np.ndarray:
        eta, rho = self.pull(np.stack([theta_c, r]))
        with np.errstate(over="ignore", invalid="ignore"):
            return np.exp(eta[None] - self.tes * rho[None])


class DataModel:
    """Data term, gradient and Fisher blocks for one dataset."""

    def __init__(self, d: Dataset):
        check_dataset(d)
        self.grid = d.recon_grid
        self.series = [_Series(d, c) for c in range(d.n_contrasts)]

    def _predict(self, x: np.ndarray, c: int) -> np.ndarray:
        pred = self.series[c].predict(x[c], x[-1])
        if not np.all(np.isfinite(pred)):
            bad = np.argwhere(~np.isfinite(pred))[0]
            raise NumericalError(
                f"non-finite prediction in series {c}, echo {bad[0]}, voxel {tuple(bad[1:])}")
        return pred

    def data_term(self, x: np.ndarray) -> float:
        total = 0.0
        for c, s in enumerate(self.series):
            res = self._predict(x, c) - s.data
            total += 0.5 * s.inv_var * float(np.sum(res * res))
        return total

    def grad_and_fisher(self, x: np.ndarray) -> tuple[np.ndarray, ArrowBlocks]:
        n_c = len(self.series)
        grad = np.zeros_like(x)
        diag = np.zeros_like(x)
        cross = np.zeros((n_c,) + x.shape[1:])
        for c, s in enumerate(self.series):
            pred = self._predict(x, c)
            # gradient uses the residual, the Fisher blocks the expected curvature
            gw = (pred - s.data) * pred * s.inv_var
            hw = pred * pred * s.inv_var
            native = np.stack([
                gw.sum(0),
                -(s.tes * gw).sum(0),
                hw.sum(0),
                -(s.tes * hw).sum(0),
                (s.tes * s.tes * hw).sum(0),
            ])
            g_c, g_r, h_cc, h_cr, h_rr = s.push(native)
            grad[c] += g_c
            grad[-1] += g_r
            diag[c] += h_cc
            cross[c] += h_cr
            diag[-1] += h_rr
        return grad, ArrowBlocks(diag, cross)


def _prior_weights(cfg: FitConfig, x: np.ndarray, model: DataModel):
    if cfg.reg.mode == "jtv":
        return diffops.jtv_weights(x, cfg.reg.lam, model.grid)
    return None


def _prior_term(x, weights, cfg: FitConfig, grid) -> float:
    if cfg.reg.mode == "none":
        return 0.0
    return 0.5 * diffops.membrane_energy(x, weights, cfg.reg.lam, grid)


def _as_stack(maps) -> np.ndarray:
    return maps.stack() if isinstance(maps, ParameterMaps) else np.asarray(maps, dtype=np.float64)


def _check_weights(weights, cfg: FitConfig):
    if cfg.reg.mode == "jtv" and weights is None:
        raise ValueError("jtv mode needs bound weights")
    if cfg.reg.mode != "jtv" and weights is not None:
        raise ValueError(f"weights are only used in jtv mode, not {cfg.reg.mode!r}")


def objective(maps, d: Dataset, weights: np.ndarray | None, cfg: FitConfig,
              model: DataModel | None = None) -> tuple[float, float, float]:
    """``(total, data, prior)`` with prior ``1/2 sum_c lam_c theta_c^T L theta_c``."""
    _check_weights(weights, cfg)
    model = model or DataModel(d)
    x = _as_stack(maps)
    data = model.data_term(x)
    prior = _prior_term(x, weights, cfg, model.grid)
    total = data + prior
    if not np.isfinite(total):
        raise NumericalError("objective is not finite")
    return total, data, prior


def grad_and_fisher(maps, d: Dataset, weights: np.ndarray | None, cfg: FitConfig,
                    model: DataModel | None = None) -> tuple[np.ndarray, ArrowBlocks]:
    """Gradient of :func:`objective` and the Fisher-scoring data Hessian blocks.

    With a pose, the blocks use ``diag(Psi^T s^2)``, which dominates
    ``Psi^T diag(s^2) Psi`` because the trilinear weights are nonnegative
    and sum to one.
    """
    _check_weights(weights, cfg)
    model = model or DataModel(d)
    x = _as_stack(maps)
    grad, hess = model.grad_and_fisher(x)
    if cfg.reg.mode != "none":
        grad = grad + diffops.membrane_apply(x, weights, cfg.reg.lam, model.grid)
    return grad, hess


# decay values this close to a bound count as active
BOUND_EPS = 1e-3


def active_bounds(x: np.ndarray, g: np.ndarray, r_max: float) -> np.ndarray:
    """Decay voxels on a bound whose descent direction points outside it.

    Clamping after an unconstrained Newton step need not decrease the
    objective, so these unknowns are held fixed in the Newton system.
    """
    r, gr = x[-1], g[-1]
    return ((r <= BOUND_EPS) & (gr > 0)) | ((r >= r_max - BOUND_EPS) & (gr < 0))


def fit_map(d: Dataset, cfg: FitConfig = FitConfig(),
            init: ParameterMaps | None = None) -> tuple[ParameterMaps, FitReport]:
    """Regularised nonlinear fit; starts from the loglinear fit unless ``init`` is given."""
    report = FitReport()
    t0 = time.perf_counter()
    model = DataModel(d)
    x = (init if init is not None else fit_loglinear(d, r_max=cfg.r_max)).stack().copy()
    x[-1] = np.clip(x[-1], 0.0, cfg.r_max)
    report.tick("init", t0)

    grid = model.grid
    lam = cfg.reg.effective_lam()
    jtv = cfg.reg.mode == "jtv"

    def bound(x, w):
        data = model.data_term(x)
        prior = _prior_term(x, w, cfg, grid)
        if jtv:
            prior += 0.5 * float(w.sum())
        return data + prior, data, prior

    w = None
    prev = None
    for outer in range(cfg.max_outer):
        t = time.perf_counter()
        w = _prior_weights(cfg, x, model)
        f_cur, data, prior = bound(x, w)
        report.tick("weights", t)
        report.objective.append(f_cur)
        report.data_term.append(data)
        report.prior_term.append(prior)
        if prev is not None and prev - f_cur <= cfg.objective_tol * abs(prev):
            report.status = "converged"
            break
        prev = f_cur
        stalled = False
        for _ in range(cfg.max_newton_per_outer):
            t = time.perf_counter()
            g, hess = model.grad_and_fisher(x)
            if cfg.reg.mode != "none":
                g += diffops.membrane_apply(x, w, lam, grid)
            report.tick("gradient", t)
            if not np.any(g):
                break
            t = time.perf_counter()
            fixed = active_bounds(x, g, cfg.r_max)
            g[-1][fixed] = 0.0
            sys = NewtonSystem(hess, w, lam, grid, fixed=fixed if fixed.any() else None)
            dx, solve = solve_newton_system(sys, g, cfg.solver)
            report.cg_iterations.append(solve.cg_iterations)
            report.warm_residuals.append(solve.warm_residual)
            report.cg_residuals.append(solve.final_residual)
            report.tick("solve", t)

            t = time.perf_counter()
            step = 1.0
            accepted = False
            for _ in range(cfg.max_halvings + 1):
                cand = x - step * dx
                cand[-1] = np.clip(cand[-1], 0.0, cfg.r_max)
                try:
                    f_new = bound(cand, w)[0]
                except NumericalError:
                    f_new = np.inf
                if f_new <= f_cur:
                    accepted = True
                    break
                step *= 0.5
            report.tick("line_search", t)
            if not accepted:
                stalled = True
                break
            report.step_sizes.append(step)
            x, f_cur = cand, f_new
        if stalled:
            report.status = "stalled"
            log.warning("line search exhausted after %d outer iterations", outer)
            break
    else:
        w = _prior_weights(cfg, x, model)
        f_cur, data, prior = bound(x, w)
        report.objective.append(f_cur)
        report.data_term.append(data)
        report.prior_term.append(prior)
    report.tick("total", t0)
    return ParameterMaps.from_stack(x), report
