"""Command-line interface: ``estatics <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .diffops import RegConfig
from .harness import GROUPINGS, group_stats, make_method, run_loo
from .io import ManifestError, NiftiError, fill_sigma, load_manifest, read_volume, save_manifest, write_volume
from .loglinear import fit_loglinear
from .mapfit import FitConfig, fit_map
from .phantom import make_phantom_maps, parenchyma_sigma, random_poses, simulate_dataset
from .rice import RiceMixtureError, fit_rice_mixture
from .signal import NumericalError, compute_quantitative_maps
from .solver import SolverConfig, SolverError
from .volume import DatasetError, Grid3, ParameterMaps, check_dataset

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3

log = logging.getLogger("estatics")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _load(path, n_classes: int = 2):
    d = load_manifest(path)
    d = fill_sigma(d, lambda data: fit_rice_mixture(data, n_classes=n_classes).sigma)
    check_dataset(d)
    return d


def _fit_config(args) -> FitConfig:
    return FitConfig(max_outer=args.max_outer,
                     solver=SolverConfig(cg_max_iter=args.cg_max_iter, cg_tol=args.cg_tol))


# -- commands ----------------------------------------------------------------


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = make_phantom_maps(Grid3((args.size,) * 3, (args.spacing,) * 3), seed=args.seed)
    sigma = args.sigma if args.sigma is not None else parenchyma_sigma(truth, args.snr)
    poses = random_poses(3, seed=args.seed) if args.motion else None
    d = simulate_dataset(truth, sigma=sigma, poses=poses, seed=args.seed)
    if args.omit_sigma:
        for c, s in enumerate(d.series):
            d = d.replace_series(c, s.with_sigma(float("nan")))
    save_manifest(out / "manifest.json", d)
    for name in ("m0", "r1", "r2s", "mtsat"):
        write_volume(out / f"truth_{name}.nii", getattr(truth, name), truth.grid)
    write_volume(out / "truth_vessels.nii", truth.vessels.astype(np.float32), truth.grid)
    print(f"wrote {out / 'manifest.json'} (sigma {sigma:.4g})")
    return 0


def cmd_fit(args) -> int:
    d = _load(args.manifest, args.sigma_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"method": args.method}
    if args.method == "log":
        maps = fit_loglinear(d, weighted=args.weighted)
    else:
        mode = {"tkh": "tikhonov", "jtv": "jtv", "none": "none"}[args.method]
        reg = RegConfig.make(mode, d.n_contrasts, args.lambda_intercept, args.lambda_decay)
        cfg = _fit_config(args)
        cfg = FitConfig(reg=reg, max_outer=cfg.max_outer, solver=cfg.solver)
        maps, rep = fit_map(d, cfg)
        report.update(rep.to_dict())
        report["lambda"] = reg.effective_lam().tolist()
    report["sigma"] = [s.sigma for s in d.series]
    for c, s in enumerate(d.series):
        write_volume(out / f"theta_{c}_{s.meta.kind}.nii", maps.theta[c], d.recon_grid)
    write_volume(out / "r2s.nii", maps.r, d.recon_grid)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(f"wrote fit to {out}")
    return 0


_THETA = re.compile(r"theta_(\d+)_\w+\.nii$")


def _read_fit(path: Path) -> ParameterMaps:
    files = sorted((int(m.group(1)), p) for p in path.glob("theta_*.nii")
                   if (m := _THETA.search(p.name)))
    if not files:
        raise DatasetError(f"no theta_*.nii volumes in {path}")
    if [c for c, _ in files] != list(range(len(files))):
        raise DatasetError(f"theta volumes in {path} are not numbered 0..{len(files) - 1}")
    theta = np.stack([read_volume(p).data.astype(np.float64) for _, p in files])
    r = read_volume(path / "r2s.nii").data.astype(np.float64)
    return ParameterMaps(theta, r)


def cmd_maps(args) -> int:
    d = _load(args.manifest)
    maps = _read_fit(Path(args.fit))
    if maps.n_contrasts != d.n_contrasts or maps.r.shape != d.recon_grid.dims:
        raise DatasetError("fit does not match the manifest's series or grid")
    q = compute_quantitative_maps(maps, d, small_angle=args.small_angle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "r1.nii", q.r1, d.recon_grid)
    write_volume(out / "pd.nii", q.a, d.recon_grid)
    if q.mtsat is not None:
        write_volume(out / "mtsat.nii", q.mtsat, d.recon_grid)
    n_bad = int(q.undefined.sum())
    if n_bad:
        log.warning("%d voxels have undefined quantitative values (NaN)", n_bad)
    print(f"wrote maps to {out}")
    return 0


def cmd_loo(args) -> int:
    datasets = [_load(p, args.sigma_classes) for p in _csv_list(args.manifests)]
    if not datasets:
        raise UsageError("--manifests is empty")
    names = _csv_list(args.methods)
    bad = set(names) - {"log", "tkh", "jtv"}
    if bad or not names:
        raise UsageError(f"unknown methods: {sorted(bad)}" if bad else "--methods is empty")
    cfg = _fit_config(args)
    methods = [(n, make_method(n, args.lambda_intercept, args.lambda_decay,
                               weighted=args.weighted, fit_cfg=cfg)) for n in names]
    table = run_loo(datasets, methods, grouping=args.grouping,
                    progress=(lambda m: print(m, flush=True)) if args.verbose else None)
    table.write_csv(args.out)
    for method, z in sorted(table.mean_z().items()):
        print(f"{method}: mean parenchyma Z {z:+.4f}")
    if table.missing:
        print(f"{len(table.missing)} cells missing (fit failures)")
    return 0


def _parse_masks(text: str) -> dict:
    masks = {}
    for item in _csv_list(text):
        if "=" not in item:
            raise UsageError(f"mask spec {item!r} must be NAME=PATH")
        name, path = item.split("=", 1)
        masks[name] = read_volume(path).data > 0.5
    return masks


_FIELD_FILES = ("r1", "pd", "mtsat", "r2s")


def cmd_stats(args) -> int:
    if args.masks:
        masks = _parse_masks(args.masks)
    elif args.manifest:
        masks = load_manifest(args.manifest).masks
    else:
        raise UsageError("give --masks NAME=PATH,... or --manifest")
    if not masks:
        raise DatasetError("no masks given")
    repeats = []
    for fit_dir in _csv_list(args.fits):
        fit_dir = Path(fit_dir)
        fields = {n: read_volume(fit_dir / f"{n}.nii").data.astype(np.float64)
                  for n in _FIELD_FILES if (fit_dir / f"{n}.nii").exists()}
        if not fields:
            raise DatasetError(f"no map volumes ({', '.join(_FIELD_FILES)}) in {fit_dir}")
        repeats.append(fields)
    if len(repeats) < 2:
        raise UsageError("stats needs at least 2 fit directories")
    bundle = group_stats(repeats, masks)
    Path(args.out).write_text(json.dumps(bundle.to_dict(), indent=2))
    if args.histograms:
        bundle.write_histogram_csv(args.histograms)
    for (f, m), v in sorted(bundle.mean_sd.items()):
        print(f"{f:6s} {m:12s} mean S.D. {v:.4g}  mean {bundle.mean_value[(f, m)]:.4g}")
    return 0


def cmd_estimate_sigma(args) -> int:
    d = load_manifest(args.manifest)
    for c, s in enumerate(d.series):
        fit = fit_rice_mixture(s.echoes[0].data, n_classes=args.classes)
        note = " (single class)" if fit.single_class else ""
        print(f"{c} {s.meta.kind} {fit.sigma:.6g}{note}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_fit_options(p):
    p.add_argument("--lambda-intercept", type=float, default=5e3)
    p.add_argument("--lambda-decay", type=float, default=10.0)
    p.add_argument("--weighted", action="store_true", help="weighted loglinear fit")
    p.add_argument("--max-outer", type=int, default=30)
    p.add_argument("--cg-max-iter", type=int, default=100)
    p.add_argument("--cg-tol", type=float, default=1e-4)
    p.add_argument("--sigma-classes", type=int, default=2,
                   help="Rice mixture classes when a series has no sigma")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="estatics", description="ESTATICS fits and validation harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="simulate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=None, help="noise level (default: SNR 10)")
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--spacing", type=float, default=1.0, help="voxel size in mm")
    p.add_argument("--motion", action="store_true", help="random rigid poses for series 2 and 3")
    p.add_argument("--omit-sigma", action="store_true", help="leave sigma out of the manifest")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="fit ESTATICS maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=["log", "tkh", "jtv", "none"], required=True)
    p.add_argument("--out", required=True)
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("maps", help="R1, PD and MTsat from a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--small-angle", action="store_true")
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("loo", help="leave-one-echo-out validation")
    p.add_argument("--manifests", required=True, help="comma-separated, one per repeat")
    p.add_argument("--methods", default="log,tkh,jtv")
    p.add_argument("--out", required=True)
    p.add_argument("--grouping", choices=GROUPINGS, default="cell")
    _add_fit_options(p)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("stats", help="across-repeat S.D. maps and histograms")
    p.add_argument("--fits", required=True, help="comma-separated fit/map directories")
    p.add_argument("--masks", default=None, help="NAME=PATH,...")
    p.add_argument("--manifest", default=None, help="take masks from a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--histograms", default=None, help="optional CSV histogram dump")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("estimate-sigma", help="Rice-mixture noise estimate per series")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_estimate_sigma)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"estatics: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, SolverError, FloatingPointError) as err:
        print(f"estatics: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetError, ManifestError, NiftiError, RiceMixtureError, FileNotFoundError,
            ValueError) as err:
        print(f"estatics: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
