"""Leave-one-echo-out validation, Z-scores and across-repeat statistics."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffops import RegConfig
from .loglinear import fit_loglinear
from .mapfit import FitConfig, fit_map
from .projection import is_identity, pull
from .rice import rice_logpdf
from .signal import NumericalError, QuantMaps, predict_echo
from .solver import SolverConfig, SolverError
from .volume import Dataset, DatasetError, ParameterMaps

log = logging.getLogger(__name__)

SCORE_MASKS = ("GM", "WM", "CSF", "parenchyma")
GROUPINGS = ("cell", "pooled")
HIST_BINS = 100
HIST_RANGES = {"r1": (0.0, 2.5), "r2s": (0.0, 100.0), "mtsat": (0.0, 0.05)}

FitFn = Callable[[Dataset], ParameterMaps]


# -- fitting methods -----------------------------------------------------------


def make_method(name: str, lam_intercept: float = 5e3, lam_decay: float = 10.0,
                weighted: bool = False, fit_cfg: FitConfig | None = None) -> FitFn:
    """Fit function for ``log``, ``tkh`` or ``jtv``."""
    if name == "log":
        return lambda d: fit_loglinear(d, weighted=weighted)
    modes = {"tkh": "tikhonov", "jtv": "jtv"}
    if name not in modes:
        raise ValueError(f"unknown method {name!r}; expected log, tkh or jtv")
    base = fit_cfg or FitConfig()

    def fit(d: Dataset) -> ParameterMaps:
        reg = RegConfig.make(modes[name], d.n_contrasts, lam_intercept, lam_decay)
        cfg = FitConfig(reg=reg, max_outer=base.max_outer,
                        max_newton_per_outer=base.max_newton_per_outer,
                        objective_tol=base.objective_tol, solver=base.solver,
                        r_max=base.r_max, max_halvings=base.max_halvings)
        return fit_map(d, cfg)[0]

    return fit


# -- leave-one-echo-out --------------------------------------------------------


@dataclass(frozen=True)
class LooScore:
    """Rice log-likelihood of one left-out echo, summed per mask."""

    repeat: int
    method: str
    contrast: int
    echo_index: int
    loglik: dict
    n_voxels: dict


@dataclass
class ScoreTable:
    scores: list[LooScore] = field(default_factory=list)
    missing: list[tuple] = field(default_factory=list)
    # (repeat, method, contrast, echo_index, mask) -> Z
    z: dict = field(default_factory=dict)
    grouping: str = "cell"

    def rows(self) -> list[dict]:
        out = []
        for s in self.scores:
            for m in s.loglik:
                out.append({
                    "repeat": s.repeat, "method": s.method, "contrast": s.contrast,
                    "echo_index": s.echo_index, "mask": m, "loglik": s.loglik[m],
                    "n_voxels": s.n_voxels[m],
                    "z": self.z.get((s.repeat, s.method, s.contrast, s.echo_index, m), ""),
                })
        return out

    def write_csv(self, path) -> None:
        cols = ["repeat", "method", "contrast", "echo_index", "mask", "loglik", "n_voxels", "z"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(self.rows())

    def mean_z(self, mask: str = "parenchyma") -> dict[str, float]:
        by_method: dict[str, list[float]] = {}
        for (_, method, _, _, m), z in self.z.items():
            if m == mask:
                by_method.setdefault(method, []).append(z)
        return {k: float(np.mean(v)) for k, v in by_method.items()}

    def mean_loglik(self, mask: str = "parenchyma") -> dict[str, float]:
        by_method: dict[str, list[float]] = {}
        for s in self.scores:
            by_method.setdefault(s.method, []).append(s.loglik[mask])
        return {k: float(np.mean(v)) for k, v in by_method.items()}


def _native_mask(mask: np.ndarray, d: Dataset, c: int) -> np.ndarray:
    s = d.series[c]
    if is_identity(s.pose) and s.native_grid == d.recon_grid:
        return mask
    return pull(mask.astype(np.float64), s.pose, s.native_grid, d.recon_grid) >= 0.5


def score_echo(observed: np.ndarray, predicted: np.ndarray, sigma: float,
               masks: dict) -> tuple[dict, dict]:
    """Per-mask Rice log-likelihood sums; parenchyma is GM + WM."""
    logp = rice_logpdf(observed, predicted, sigma)
    loglik, counts = {}, {}
    for name in ("GM", "WM", "CSF"):
        m = masks[name]
        loglik[name] = float(np.sum(logp[m]))
        counts[name] = int(m.sum())
    loglik["parenchyma"] = loglik["GM"] + loglik["WM"]
    counts["parenchyma"] = counts["GM"] + counts["WM"]
    return loglik, counts


def run_loo(datasets: Sequence[Dataset], methods: Sequence[tuple[str, FitFn]],
            masks: dict | None = None, grouping: str = "cell",
            progress: Callable[[str], None] | None = None) -> ScoreTable:
    """Fit every method with each echo left out in turn and score its prediction.

    ``masks`` defaults to each dataset's own GM/WM/CSF masks. A fit that
    fails marks its cell missing and the run continues.
    """
    if not methods:
        raise ValueError("need at least one method")
    table = ScoreTable(grouping=grouping)
    for rep, d in enumerate(datasets):
        rep_masks = masks if masks is not None else d.masks
        absent = [k for k in ("GM", "WM", "CSF") if k not in rep_masks]
        if absent:
            raise DatasetError(f"repeat {rep}: missing masks {absent}")
        for c, s in enumerate(d.series):
            native = {k: _native_mask(np.asarray(rep_masks[k], dtype=bool), d, c)
                      for k in ("GM", "WM", "CSF")}
            for e, echo in enumerate(s.echoes):
                reduced = d.without_echo(c, e)
                for name, fit in methods:
                    t0 = time.perf_counter()
                    try:
                        maps = fit(reduced)
                        pred = predict_echo(maps, c, echo.te, s.pose, s.native_grid, d.recon_grid)
                    except (NumericalError, SolverError, DatasetError, ValueError) as err:
                        log.warning("repeat %d %s contrast %d echo %d failed: %s",
                                    rep, name, c, e, err)
                        table.missing.append((rep, name, c, e))
                        continue
                    loglik, counts = score_echo(echo.data, pred, s.sigma, native)
                    table.scores.append(LooScore(rep, name, c, e, loglik, counts))
                    msg = (f"repeat {rep} {name} c{c} e{e}: parenchyma {loglik['parenchyma']:.1f}"
                           f" ({time.perf_counter() - t0:.1f}s)")
                    log.info(msg)
                    if progress:
                        progress(msg)
    try:
        zscores(table, grouping)
    except ValueError as err:
        log.warning("Z-scores not computed: %s", err)
    return table


def zscores(table: ScoreTable, grouping: str = "cell") -> ScoreTable:
    """Normalise log-likelihoods to zero mean and unit population S.D. per group.

    ``cell`` groups by (contrast, left-out echo, mask) across methods and
    repeats; ``pooled`` groups by mask across everything. A group with
    zero variance gets Z = 0 and a warning.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    groups: dict[tuple, list[tuple]] = {}
    for s in table.scores:
        for m, v in s.loglik.items():
            key = (s.contrast, s.echo_index, m) if grouping == "cell" else (m,)
            groups.setdefault(key, []).append(((s.repeat, s.method, s.contrast, s.echo_index, m), v))
    z = {}
    for key, items in groups.items():
        if len(items) < 2:
            raise ValueError(f"Z-score group {key} has fewer than 2 entries")
        vals = np.array([v for _, v in items])
        sd = vals.std()
        if not sd > 0:
            warnings.warn(f"zero variance in Z-score group {key}; Z set to 0", RuntimeWarning,
                          stacklevel=2)
            zs = np.zeros_like(vals)
        else:
            zs = (vals - vals.mean()) / sd
        for (k, _), zv in zip(items, zs):
            z[k] = float(zv)
    table.z = z
    table.grouping = grouping
    return table


# -- across-repeat statistics -------------------------------------------------


def _fields(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, ParameterMaps):
        out = {f"theta_{c}": obj.theta[c] for c in range(obj.n_contrasts)}
        out["r2s"] = obj.r
        return out
    if isinstance(obj, QuantMaps):
        out = {"r1": obj.r1, "pd": obj.a}
        if obj.mtsat is not None:
            out["mtsat"] = obj.mtsat
        return out
    return {k: np.asarray(v, dtype=np.float64) for k, v in dict(obj).items()}


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int
    invalid: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow + self.invalid


def histogram(values: np.ndarray, lo: float, hi: float, bins: int = HIST_BINS) -> Histogram:
    """Fixed-range histogram; out-of-range and non-finite values are counted separately."""
    values = np.asarray(values, dtype=np.float64).ravel()
    finite = np.isfinite(values)
    v = values[finite]
    edges = np.linspace(lo, hi, bins + 1)
    under = int(np.sum(v < lo))
    over = int(np.sum(v > hi))
    counts, _ = np.histogram(v[(v >= lo) & (v <= hi)], bins=edges)
    return Histogram(edges, counts, under, over, int((~finite).sum()))


@dataclass
class StatsBundle:
    """S.D. maps use the population convention (divide by the number of repeats)."""

    sd_maps: dict
    mean_maps: dict
    mean_sd: dict  # (field, mask) -> mean in-mask S.D.
    mean_value: dict  # (field, mask) -> mean in-mask value
    histograms: dict  # (field, mask) -> Histogram of the across-repeat mean
    n_repeats: int
    sd_convention: str = "population"

    def to_dict(self) -> dict:
        return {
            "n_repeats": self.n_repeats,
            "sd_convention": self.sd_convention,
            "mean_sd": {f"{f}/{m}": v for (f, m), v in self.mean_sd.items()},
            "mean_value": {f"{f}/{m}": v for (f, m), v in self.mean_value.items()},
            "histograms": {
                f"{f}/{m}": {"edges": h.edges.tolist(), "counts": h.counts.tolist(),
                             "underflow": h.underflow, "overflow": h.overflow,
                             "invalid": h.invalid}
                for (f, m), h in self.histograms.items()
            },
        }

    def write_histogram_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["field", "mask", "bin_lo", "bin_hi", "count"])
            for (f, m), h in self.histograms.items():
                w.writerow([f, m, "-inf", h.edges[0], h.underflow])
                for lo, hi, n in zip(h.edges[:-1], h.edges[1:], h.counts):
                    w.writerow([f, m, lo, hi, int(n)])
                w.writerow([f, m, h.edges[-1], "inf", h.overflow])
                w.writerow([f, m, "nan", "nan", h.invalid])


def group_stats(repeats: Sequence, masks: dict, ranges: dict | None = None,
                bins: int = HIST_BINS) -> StatsBundle:
    """Voxelwise across-repeat S.D., per-mask summaries and histograms.

    ``repeats`` holds one ParameterMaps, QuantMaps or name->array mapping
    per repeat. Fields without a configured range are histogrammed over
    their in-mask finite extent.
    """
    if len(repeats) < 2:
        raise ValueError("group_stats needs at least 2 repeats")
    ranges = {**HIST_RANGES, **(ranges or {})}
    per = [_fields(r) for r in repeats]
    names = [k for k in per[0] if all(k in p for p in per)]
    sd_maps, mean_maps, mean_sd, mean_value, hists = {}, {}, {}, {}, {}
    for name in names:
        stack = np.stack([p[name] for p in per])
        # deviations from the first repeat keep identical repeats at exactly 0
        dev = stack - stack[0]
        sd_maps[name] = dev.std(axis=0)
        mean_maps[name] = stack[0] + dev.mean(axis=0)
        for mname, mask in masks.items():
            mask = np.asarray(mask, dtype=bool)
            sd_in = sd_maps[name][mask]
            mean_in = mean_maps[name][mask]
            mean_sd[(name, mname)] = float(np.nanmean(sd_in)) if sd_in.size else float("nan")
            mean_value[(name, mname)] = float(np.nanmean(mean_in)) if mean_in.size else float("nan")
            if name in ranges:
                lo, hi = ranges[name]
            else:
                fin = mean_in[np.isfinite(mean_in)]
                lo, hi = (float(fin.min()), float(fin.max())) if fin.size else (0.0, 1.0)
                if hi <= lo:
                    hi = lo + 1.0
            hists[(name, mname)] = histogram(mean_in, lo, hi, bins)
    return StatsBundle(sd_maps, mean_maps, mean_sd, mean_value, hists, len(repeats))


# -- synthetic benchmark -------------------------------------------------------

# Regularisation for the synthetic benchmark, chosen by leave-one-echo-out
# CV on a separate 48^3 tuning phantom (seed 99) with scripts/tune_lambda.py.
BENCHMARK_LAMBDA = {"tkh": (30.0, 0.01), "jtv": (300.0, 0.1)}
# Iteration budget for benchmark fits.
BENCHMARK_FIT = FitConfig(max_outer=30, solver=SolverConfig())


def benchmark_datasets(size: int = 48, repeats: int = 3, seed: int = 0,
                       snr: float = 10.0, estimate_sigma: bool = False,
                       motion: bool = False, n_classes: int = 4) -> tuple[list[Dataset], object]:
    """Repeated acquisitions of one phantom with independent noise.

    Series use the true noise level unless ``estimate_sigma`` is set, in
    which case a ``n_classes`` Rice mixture is fitted to each first echo.
    """
    from .phantom import make_phantom_maps, parenchyma_sigma, random_poses, simulate_dataset
    from .rice import fit_rice_mixture
    from .volume import Grid3

    truth = make_phantom_maps(Grid3((size,) * 3), seed=seed)
    sigma = parenchyma_sigma(truth, snr)
    out = []
    for k in range(repeats):
        poses = random_poses(3, seed=1000 * seed + k) if motion else None
        d = simulate_dataset(truth, sigma=sigma, poses=poses, seed=1000 * seed + k)
        if estimate_sigma:
            for c, s in enumerate(d.series):
                est = fit_rice_mixture(s.echoes[0].data, n_classes=n_classes,
                                       min_voxels=min(10_000, s.echoes[0].data.size))
                d = d.replace_series(c, s.with_sigma(est.sigma))
        out.append(d)
    return out, truth


def benchmark_methods(lam: dict | None = None, fit_cfg: FitConfig | None = None):
    lam = {**BENCHMARK_LAMBDA, **(lam or {})}
    cfg = fit_cfg or BENCHMARK_FIT
    return [("log", make_method("log")),
            ("tkh", make_method("tkh", *lam["tkh"], fit_cfg=cfg)),
            ("jtv", make_method("jtv", *lam["jtv"], fit_cfg=cfg))]


def select_lambda(d: Dataset, method: str, grid: Sequence[tuple[float, float]],
                  echoes: Sequence[tuple[int, int]] | None = None,
                  fit_cfg: FitConfig | None = None) -> tuple[tuple[float, float], dict]:
    """Pick (intercept, decay) regularisation by leave-one-echo-out likelihood.

    Returns the pair with the highest summed parenchyma log-likelihood over
    ``echoes`` (all echoes by default) and the score of every candidate.
    """
    if echoes is None:
        echoes = [(c, e) for c, s in enumerate(d.series) for e in range(len(s.echoes))]
    par = d.masks["GM"] | d.masks["WM"]
    scores = {}
    for lam in grid:
        fit = make_method(method, *lam, fit_cfg=fit_cfg)
        total = 0.0
        for c, e in echoes:
            s = d.series[c]
            maps = fit(d.without_echo(c, e))
            pred = predict_echo(maps, c, s.echoes[e].te, s.pose, s.native_grid, d.recon_grid)
            total += float(np.sum(rice_logpdf(s.echoes[e].data, pred, s.sigma)[par]))
        scores[tuple(lam)] = total
        log.info("%s lambda=%s: %.2f", method, lam, total)
    best = max(scores, key=scores.get)
    return best, scores
