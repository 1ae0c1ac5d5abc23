"""Spoiled gradient-echo forward model and quantitative map derivation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import RigidTransform, pull
from .volume import Dataset, Grid3, ParameterMaps


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


def _first_bad(a: np.ndarray):
    idx = np.argwhere(~np.isfinite(a))
    return tuple(int(i) for i in idx[0])


def predict_echo(maps: ParameterMaps, c: int, te: float,
                 pose: RigidTransform | None = None,
                 native_grid: Grid3 | None = None,
                 recon_grid: Grid3 | None = None) -> np.ndarray:
    """Predicted magnitude ``exp(Psi theta_c - te * Psi r)`` on the native grid.

    Both maps are resampled first and exponentiated afterwards.
    """
    if recon_grid is None:
        spacing = native_grid.spacing if native_grid is not None else (1.0, 1.0, 1.0)
        recon_grid = Grid3(maps.r.shape, spacing)
    if native_grid is None:
        native_grid = recon_grid
    theta = pull(maps.theta[c], pose, native_grid, recon_grid)
    r = pull(maps.r, pose, native_grid, recon_grid)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(theta - te * r)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite predicted echo at voxel {_first_bad(out)}")
    return out


def ernst_signal(m0, alpha_eff, tr, r1, te=0.0, r2s=0.0, mtsat=0.0):
    """Steady-state spoiled gradient-echo magnitude.

    ``m0 sin(a) (1 - E1) / (1 - cos(a) (1 - d) E1) * (1 - d) * exp(-te r2s)``
    with ``E1 = exp(-tr r1)`` and ``d`` the per-TR MT saturation.
    """
    e1 = np.exp(-np.multiply(tr, r1))
    keep = 1.0 - np.asarray(mtsat, dtype=np.float64)
    s0 = m0 * np.sin(alpha_eff) * (1.0 - e1) / (1.0 - np.cos(alpha_eff) * keep * e1) * keep
    return s0 * np.exp(-np.multiply(te, r2s))


@dataclass(frozen=True)
class QuantMaps:
    """R1 (1/s), apparent proton density ``a`` and MT saturation (fraction).

    ``undefined`` flags voxels where a denominator vanished; their values
    are set to NaN. ``mtsat`` is None without an MTw series.
    """

    r1: np.ndarray
    a: np.ndarray
    mtsat: np.ndarray | None
    undefined: np.ndarray


def _flag_small(den: np.ndarray, num: np.ndarray, rel: float) -> np.ndarray:
    scale = np.mean(np.abs(num)) if num.size else 0.0
    return np.abs(den) < rel * max(scale, np.finfo(float).tiny)


def compute_quantitative_maps(maps: ParameterMaps, d: Dataset, small_angle: bool = False,
                              floor: float = 1e-9) -> QuantMaps:
    """R1, apparent PD and MTsat from the fitted log-intercepts.

    Uses the rational dual-flip-angle approximation of the SGE signal,
    ``S = A a rho / (rho + a^2 / 2)``. By default the flip angle enters as
    ``2 tan(a / 2)`` and ``rho = 2 tanh(R1 TR / 2)``, which makes the
    rational form exact for the steady-state signal when both TRs match.
    ``small_angle=True`` uses ``a`` and ``rho = R1 TR`` directly. MTsat is
    obtained by solving the steady-state equation with saturation for the
    MT intercept given ``A`` and ``R1``; with ``small_angle=True`` it uses
    the rational approximation instead.
    """
    ipd, it1, imt = d.index_of("PDw"), d.index_of("T1w"), d.index_of("MTw")
    if ipd is None or it1 is None:
        raise ValueError("need exactly one PDw and one T1w series")
    b1 = np.ones(d.recon_grid.dims) if d.b1_map is None else d.b1_map

    def angle(i):
        a = b1 * d.series[i].meta.flip_angle
        return a if small_angle else 2.0 * np.tan(a / 2.0)

    s_pd, s_t1 = np.exp(maps.theta[ipd]), np.exp(maps.theta[it1])
    a_pd, a_t1 = angle(ipd), angle(it1)
    tr_pd, tr_t1 = d.series[ipd].meta.tr, d.series[it1].meta.tr

    with np.errstate(divide="ignore", invalid="ignore"):
        num = 0.5 * (s_t1 * a_t1 / tr_t1 - s_pd * a_pd / tr_pd)
        den = s_pd / a_pd - s_t1 / a_t1
        bad = _flag_small(den, num, floor)
        r1 = num / den
        a_num = s_pd * s_t1 * (tr_t1 * a_t1 / a_pd - tr_pd * a_pd / a_t1)
        a_den = s_t1 * tr_t1 * a_t1 - s_pd * tr_pd * a_pd
        bad |= _flag_small(a_den, a_num, floor)
        amp = a_num / a_den
        if not small_angle:
            # r1 above is rho / TR; undo the tanh substitution
            r1 = 2.0 * np.arctanh(np.clip(r1 * tr_t1 / 2.0, -1.0, 1.0)) / tr_t1
        mtsat = None
        if imt is not None:
            s_mt = np.exp(maps.theta[imt])
            alpha = b1 * d.series[imt].meta.flip_angle
            tr_mt = d.series[imt].meta.tr
            if small_angle:
                mtsat = (amp * alpha / s_mt - 1.0) * r1 * tr_mt - alpha ** 2 / 2.0
            else:
                e1 = np.exp(-r1 * tr_mt)
                gain = amp * np.sin(alpha) * (1.0 - e1)
                m_num = gain - s_mt * (1.0 - np.cos(alpha) * e1)
                m_den = s_mt * np.cos(alpha) * e1 + gain
                bad |= _flag_small(m_den, m_num, floor)
                mtsat = m_num / m_den
    bad |= ~np.isfinite(r1) | ~np.isfinite(amp)
    if mtsat is not None:
        bad |= ~np.isfinite(mtsat)
        mtsat = np.where(bad, np.nan, mtsat)
    return QuantMaps(np.where(bad, np.nan, r1), np.where(bad, np.nan, amp), mtsat, bad)
