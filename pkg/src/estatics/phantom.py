"""Synthetic head phantom and multi-echo SGE simulation with known truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import RigidTransform, pull
from .rice import rice_sample
from .signal import ernst_signal
from .volume import ContrastMeta, ContrastSeries, Dataset, EchoVolume, Grid3, ParameterMaps

TE_SPACING = 2.3e-3

# m0 (a.u.), r1 (1/s), r2s (1/s), mtsat (fraction)
TISSUES = {
    "WM": (800.0, 1.1, 21.0, 0.02),
    "GM": (900.0, 0.7, 16.0, 0.01),
    "CSF": (1000.0, 0.25, 2.0, 0.002),
    "BG": (30.0, 1.0, 30.0, 0.0),
}
VESSEL_R2S = 80.0
MODULATION = 0.1


@dataclass(frozen=True)
class ProtocolEntry:
    meta: ContrastMeta
    tes: tuple[float, ...]


def default_protocol() -> list[ProtocolEntry]:
    """Multi-parameter mapping protocol: PDw/T1w 8 echoes, MTw 6, TR 25 ms."""
    tes8 = tuple(TE_SPACING * k for k in range(1, 9))
    return [
        ProtocolEntry(ContrastMeta.from_degrees("PDw", 6.0, 25e-3), tes8),
        ProtocolEntry(ContrastMeta.from_degrees("T1w", 21.0, 25e-3), tes8),
        ProtocolEntry(ContrastMeta.from_degrees("MTw", 6.0, 25e-3), tes8[:6]),
    ]


@dataclass(frozen=True)
class PhantomTruth:
    grid: Grid3
    m0: np.ndarray
    r1: np.ndarray
    r2s: np.ndarray
    mtsat: np.ndarray
    vessels: np.ndarray
    masks: dict

    def intercepts(self, protocol=None, b1: np.ndarray | None = None) -> np.ndarray:
        """Noise-free TE=0 signals per protocol entry, (C, *dims)."""
        protocol = protocol or default_protocol()
        b1 = 1.0 if b1 is None else b1
        return np.stack([
            ernst_signal(self.m0, b1 * p.meta.flip_angle, p.meta.tr, self.r1,
                         mtsat=self.mtsat if p.meta.mt_prepulse else 0.0)
            for p in protocol
        ])

    def parameter_maps(self, protocol=None, b1: np.ndarray | None = None) -> ParameterMaps:
        return ParameterMaps(np.log(self.intercepts(protocol, b1)), self.r2s)


def _normalised_coords(grid: Grid3):
    axes = []
    for n in grid.dims:
        half = max((n - 1) / 2.0, 1.0)
        axes.append((np.arange(n) - (n - 1) / 2.0) / half)
    return np.meshgrid(*axes, indexing="ij")


def _modulation(rng, u, v, w) -> np.ndarray:
    f = rng.uniform(0.3, 0.8, size=3)
    ph = rng.uniform(0, 2 * np.pi, size=3)
    return (np.sin(np.pi * f[0] * u + ph[0]) * np.sin(np.pi * f[1] * v + ph[1])
            * np.sin(np.pi * f[2] * w + ph[2]))


def make_phantom_maps(grid: Grid3, seed: int = 0, n_vessels: int = 4) -> PhantomTruth:
    """Nested-ellipsoid head with CSF rim, cortical ribbon, white matter and ventricles."""
    if min(grid.dims) < 16:
        raise ValueError("phantom grid must be at least 16^3")
    rng = np.random.default_rng(seed)
    u, v, w = _normalised_coords(grid)
    rho = np.sqrt((u / 0.9) ** 2 + (v / 0.92) ** 2 + (w / 0.85) ** 2)
    angle = np.arctan2(v, u)
    folds = 1.0 + 0.08 * np.sin(5 * angle + rng.uniform(0, 2 * np.pi)) * np.cos(3 * w)

    head = rho <= 1.0
    brain = rho <= 0.86
    wm = rho <= 0.64 * folds
    ventricles = np.zeros(grid.dims, dtype=bool)
    for side in (-1, 1):
        ventricles |= (((u - side * 0.16) / 0.1) ** 2 + ((v - 0.05) / 0.3) ** 2
                       + ((w - 0.05) / 0.18) ** 2) <= 1.0
    labels = np.full(grid.dims, "BG", dtype=object)
    labels[head] = "CSF"
    labels[brain] = "GM"
    labels[wm & brain] = "WM"
    labels[ventricles & brain] = "CSF"
    masks = {k: labels == k for k in ("GM", "WM", "CSF", "BG")}

    fields = []
    for p in range(4):
        base = np.zeros(grid.dims)
        for name, values in TISSUES.items():
            base[masks[name]] = values[p]
        fields.append(base * (1.0 + MODULATION * _modulation(rng, u, v, w)))
    m0, r1, r2s, mtsat = fields

    # thin straight vessels through the parenchyma
    idx = np.stack(np.indices(grid.dims), axis=-1).astype(np.float64)
    centre = (np.asarray(grid.dims) - 1) / 2.0
    vessels = np.zeros(grid.dims, dtype=bool)
    for _ in range(n_vessels):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        point = centre + rng.uniform(-0.25, 0.25, size=3) * np.asarray(grid.dims)
        rel = idx - point
        dist = np.linalg.norm(rel - (rel @ direction)[..., None] * direction, axis=-1)
        vessels |= dist <= 0.75
    vessels &= masks["GM"] | masks["WM"]
    r2s = np.where(vessels, VESSEL_R2S, r2s)
    return PhantomTruth(grid, m0, r1, r2s, mtsat, vessels, masks)


def parenchyma_sigma(truth: PhantomTruth, snr: float = 10.0, protocol=None,
                     b1: np.ndarray | None = None) -> float:
    """Noise level giving the requested mean first-echo SNR in GM+WM."""
    protocol = protocol or default_protocol()
    par = truth.masks["GM"] | truth.masks["WM"]
    s0 = truth.intercepts(protocol, b1)
    first = [s0[c][par] * np.exp(-p.tes[0] * truth.r2s[par]) for c, p in enumerate(protocol)]
    return float(np.mean([f.mean() for f in first]) / snr)


def random_poses(n: int, seed: int, max_shift: float = 1.5,
                 max_rot_deg: float = 2.0) -> list[RigidTransform]:
    """Identity for the first series, small random rigid motion for the rest."""
    rng = np.random.default_rng(seed)
    poses = [RigidTransform.identity()]
    for _ in range(n - 1):
        p = np.concatenate([rng.uniform(-max_shift, max_shift, 3),
                            np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg, 3))])
        poses.append(RigidTransform.from_params(p))
    return poses


def simulate_dataset(truth: PhantomTruth, protocol=None, sigma=None, poses=None,
                     b1: np.ndarray | None = None, seed: int = 0,
                     noise: bool = True) -> Dataset:
    """Simulate native-space multi-echo magnitudes with Rician noise.

    Log-intercepts and decay are resampled to each series' native space and
    exponentiated, so noiseless echoes follow the fitted model exactly.
    ``sigma`` may be a scalar, one value per series, or None for SNR 10.
    """
    protocol = protocol or default_protocol()
    n_c = len(protocol)
    if sigma is None:
        sigma = parenchyma_sigma(truth, 10.0, protocol, b1)
    sigmas = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n_c,))
    poses = poses or [None] * n_c
    maps = truth.parameter_maps(protocol, b1)
    grid = truth.grid
    series = []
    for c, entry in enumerate(protocol):
        theta, r = pull(np.stack([maps.theta[c], maps.r]), poses[c], grid, grid)
        echoes = []
        for e, te in enumerate(entry.tes):
            clean = np.exp(theta - te * r)
            data = rice_sample(clean, float(sigmas[c]), [seed, c, e]) if noise else clean
            echoes.append(EchoVolume(te, data))
        series.append(ContrastSeries(entry.meta, tuple(echoes), float(sigmas[c]), grid, poses[c]))
    return Dataset(grid, tuple(series), b1, {k: v for k, v in truth.masks.items()})
