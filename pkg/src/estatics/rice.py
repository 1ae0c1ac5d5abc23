"""Rice distribution and the two-class Rice mixture noise estimator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import i0e, i1e, logsumexp

from .volume import EchoVolume

log = logging.getLogger(__name__)

# log I0 switches from the power series to the asymptotic expansion here;
# with the term counts below both are accurate to ~1e-14 at the switch.
LOGI0_SWITCH = 20.0
_SERIES_TERMS = 64
_ASYMPTOTIC_TERMS = 24


class RiceMixtureError(RuntimeError):
    """The mixture fit degenerated; supply the noise level manually."""


def log_i0(z) -> np.ndarray:
    """``ln I0(z)`` for ``z >= 0``."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    small = z <= LOGI0_SWITCH
    if np.any(small):
        out[small] = np.log(_i0_series(z[small]))
    if np.any(~small):
        out[~small] = _log_i0_asymptotic(z[~small])
    return out


def _i0_series(z: np.ndarray) -> np.ndarray:
    q = (z / 2.0) ** 2
    term = np.ones_like(z)
    total = np.ones_like(z)
    # terms past the peak shrink geometrically; the largest argument decides
    # how many are needed
    zmax = float(z.max()) if z.size else 0.0
    n_terms = min(_SERIES_TERMS, int(2.2 * zmax) + 20)
    for k in range(1, n_terms):
        term = term * q / (k * k)
        total += term
    return total


def _log_i0_asymptotic(z: np.ndarray) -> np.ndarray:
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(1, _ASYMPTOTIC_TERMS):
        term = term * (2 * k - 1) ** 2 / (8.0 * k * z)
        total += term
    return z - 0.5 * np.log(2.0 * math.pi * z) + np.log(total)


def rice_logpdf(x, nu, sigma):
    """Log density of the Rice distribution; ``-inf`` at ``x = 0``."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be > 0")
    x, nu, sigma = np.broadcast_arrays(np.asarray(x, dtype=np.float64),
                                       np.asarray(nu, dtype=np.float64),
                                       np.asarray(sigma, dtype=np.float64))
    s2 = sigma * sigma
    with np.errstate(divide="ignore"):
        out = np.log(x / s2) + log_i0(x * nu / s2) - (x * x + nu * nu) / (2.0 * s2)
    out = np.where(x == 0, -np.inf, out)
    return out if out.ndim else float(out)


def rice_sample(nu, sigma: float, seed: int) -> np.ndarray:
    """Magnitude of ``nu + n1 + i n2`` with i.i.d. ``N(0, sigma^2)`` noise."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    nu = np.asarray(nu, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(2,) + nu.shape)
    return np.hypot(nu + noise[0], noise[1])


def _bessel_ratio(z: np.ndarray) -> np.ndarray:
    return i1e(z) / i0e(z)


def otsu_threshold(x: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(x, bins=bins)
    centres = 0.5 * (edges[1:] + edges[:-1])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centres)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(centres[np.argmax(between[:-1])])


def _kmeans_1d(x: np.ndarray, k: int, iters: int = 50) -> np.ndarray:
    """Lloyd iterations from quantile centres; labels sorted by centre."""
    centres = np.quantile(x, (np.arange(k) + 0.5) / k)
    labels = np.zeros(x.size, dtype=np.int64)
    for _ in range(iters):
        edges = 0.5 * (centres[1:] + centres[:-1])
        new = np.searchsorted(edges, x)
        if np.array_equal(new, labels) and _ > 0:
            break
        labels = new
        for j in range(k):
            if np.any(labels == j):
                centres[j] = x[labels == j].mean()
        centres = np.sort(centres)
    return labels


def _init_from_labels(x: np.ndarray, labels: np.ndarray, n_classes: int):
    """Starting (nu, sigma, pi) from a hard split; label 0 is background.

    With two labels only (an Otsu split) the foreground is divided at its
    quantiles.
    """
    if labels.max() == 1 and n_classes > 2:
        fg = x[labels == 1]
        cuts = np.quantile(fg, np.arange(1, n_classes - 1) / (n_classes - 1))
        labels = labels.copy()
        labels[labels == 1] = 1 + np.searchsorted(cuts, fg)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        return None
    sigma0 = math.sqrt(np.mean(x[labels == 0] ** 2) / 2.0)
    fg = [math.sqrt(max(np.mean(x[labels == k] ** 2) - 2 * sigma0 ** 2, 0.0))
          for k in range(1, n_classes)]
    return np.concatenate([[0.0], fg]), sigma0, counts / x.size


@dataclass(frozen=True)
class RiceMixtureFit:
    """Result of :func:`fit_rice_mixture`, background class first.

    ``single_class`` is set when a single Rayleigh (pure background) class
    explains the volume better by BIC than two classes; ``pi`` is then
    ``(1, 0)``.
    """

    sigma: float
    nu: tuple[float, ...]
    pi: tuple[float, ...]
    loglik: float
    iterations: int
    converged: bool
    trace: tuple[float, ...] = ()
    single_class: bool = False


def _rice_em(x, nu, sigma, pi, max_iter, tol):
    trace = []
    converged = False
    x2 = x * x
    it = 0
    for it in range(1, max_iter + 1):
        logp = rice_logpdf(x[None, :], nu[:, None], sigma) + np.log(pi)[:, None]
        norm = logsumexp(logp, axis=0)
        trace.append(float(norm.sum()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        resp = np.exp(logp - norm)
        mass = resp.sum(axis=1)
        if np.any(mass < 1e-6 * x.size):
            raise RiceMixtureError("a mixture class collapsed to zero weight; set sigma manually")
        ratio = _bessel_ratio(x[None, :] * nu[:, None] / sigma ** 2)
        xa = (resp * x * ratio).sum(axis=1)
        nu = xa / mass
        var = ((resp * x2).sum() - 2 * np.dot(nu, xa) + np.dot(nu ** 2, mass)) / (2 * x.size)
        if not var > 0:
            raise RiceMixtureError("noise variance collapsed; set sigma manually")
        sigma = math.sqrt(var)
        pi = mass / x.size
    return nu, sigma, pi, trace, it, converged


def fit_rice_mixture(first_echo: EchoVolume | np.ndarray, max_iter: int = 1000,
                     tol: float = 1e-6, min_voxels: int = 10_000,
                     n_classes: int = 2) -> RiceMixtureFit:
    """EM fit of a background/foreground Rice mixture with a shared sigma.

    The phase of each voxel is treated as missing data, which gives the
    moment-matching updates ``nu_k = E[x A(x nu_k / s^2)]`` and
    ``sigma^2 = (E[x^2] - 2 nu E[x A] + nu^2) / 2`` (``A = I1 / I0``).
    Initialisation is deterministic: Otsu split, background Rayleigh MLE.
    ``n_classes > 2`` models several foreground Rice classes. EM then runs
    from two starts (Otsu split with the foreground cut at its quantiles,
    and 1-D k-means) and keeps the higher likelihood.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    data = first_echo.data if isinstance(first_echo, EchoVolume) else first_echo
    x = np.asarray(data, dtype=np.float64).ravel()
    if x.size < min_voxels:
        raise ValueError(f"need >= {min_voxels} voxels for a reliable noise estimate, got {x.size}")
    x = x[np.isfinite(x) & (x > 0)]
    if x.size < 2 or np.ptp(x) == 0:
        raise RiceMixtureError("volume has no intensity spread; set sigma manually")

    inits = [_init_from_labels(x, (x > otsu_threshold(x)).astype(np.int64), n_classes)]
    if n_classes > 2:
        inits.append(_init_from_labels(x, _kmeans_1d(x, n_classes), n_classes))
    best, error = None, None
    for init in inits:
        if init is None:
            continue
        try:
            run = _rice_em(x, *init, max_iter, tol)
        except RiceMixtureError as err:
            error = err
            continue
        if best is None or run[3][-1] > best[3][-1]:
            best = run
    if best is None:
        raise error or RiceMixtureError(
            "could not split background and foreground; set sigma manually")
    nu, sigma, pi, trace, it, converged = best
    if not converged:
        log.warning("Rice mixture stopped at max_iter=%d without converging", max_iter)

    # pure-background alternative: one Rayleigh class (nu stays at 0)
    s1 = math.sqrt(np.mean(x * x) / 2.0)
    nu1, sigma1, _, trace1, it1, conv1 = _rice_em(
        x, np.zeros(1), s1, np.ones(1), max_iter, tol)
    penalty = (3.0 * (n_classes - 1)) * math.log(x.size)  # BIC: extra free parameters
    if -2 * trace1[-1] <= -2 * trace[-1] + penalty:
        return RiceMixtureFit(float(sigma1), (float(nu1[0]),) * n_classes,
                              (1.0,) + (0.0,) * (n_classes - 1),
                              trace1[-1], it1, conv1, tuple(trace1), single_class=True)

    order = np.argsort(nu)
    return RiceMixtureFit(
        sigma=float(sigma),
        nu=tuple(float(nu[k]) for k in order),
        pi=tuple(float(pi[k]) for k in order),
        loglik=trace[-1],
        iterations=it,
        converged=converged,
        trace=tuple(trace),
    )
