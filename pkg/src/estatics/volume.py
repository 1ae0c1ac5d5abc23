"""Grid, echo and dataset containers shared across the package.

Scalar fields are numpy arrays indexed ``[i, j, k]`` along ``x, y, z``.
On disk (NIfTI) ``x`` varies fastest. Multi-channel fields put the channel
axis first. All times are in seconds and angles in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .projection import RigidTransform

KINDS = ("PDw", "T1w", "MTw")


class DatasetError(ValueError):
    """Raised when a dataset fails validation before a fit."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid3:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("Grid3 needs exactly 3 dims and 3 spacings")
        if any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise ValueError(f"grid spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


@dataclass(frozen=True)
class EchoVolume:
    te: float
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "te", float(self.te))
        object.__setattr__(self, "data", _frozen(self.data))


@dataclass(frozen=True)
class ContrastMeta:
    kind: str
    flip_angle: float
    tr: float
    mt_prepulse: bool = False

    @classmethod
    def from_degrees(cls, kind: str, flip_angle_deg: float, tr: float,
                     mt_prepulse: bool | None = None) -> "ContrastMeta":
        if mt_prepulse is None:
            mt_prepulse = kind == "MTw"
        return cls(kind, math.radians(flip_angle_deg), tr, mt_prepulse)


@dataclass(frozen=True)
class ContrastSeries:
    meta: ContrastMeta
    echoes: tuple[EchoVolume, ...]
    sigma: float
    native_grid: Grid3
    pose: "RigidTransform | None" = None

    def __post_init__(self):
        object.__setattr__(self, "echoes", tuple(self.echoes))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def tes(self) -> np.ndarray:
        return np.array([e.te for e in self.echoes])

    def without_echo(self, index: int) -> "ContrastSeries":
        echoes = self.echoes[:index] + self.echoes[index + 1:]
        return ContrastSeries(self.meta, echoes, self.sigma, self.native_grid, self.pose)

    def with_sigma(self, sigma: float) -> "ContrastSeries":
        return ContrastSeries(self.meta, self.echoes, sigma, self.native_grid, self.pose)


@dataclass(frozen=True)
class Dataset:
    recon_grid: Grid3
    series: tuple[ContrastSeries, ...]
    b1_map: np.ndarray | None = None
    masks: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        if self.b1_map is not None:
            object.__setattr__(self, "b1_map", _frozen(self.b1_map))
        masks = {k: _frozen(v, dtype=bool) for k, v in dict(self.masks).items()}
        object.__setattr__(self, "masks", masks)

    @property
    def n_contrasts(self) -> int:
        return len(self.series)

    def replace_series(self, index: int, series: ContrastSeries) -> "Dataset":
        new = list(self.series)
        new[index] = series
        return Dataset(self.recon_grid, tuple(new), self.b1_map, self.masks)

    def without_echo(self, contrast: int, echo: int) -> "Dataset":
        return self.replace_series(contrast, self.series[contrast].without_echo(echo))

    def index_of(self, kind: str) -> int | None:
        hits = [i for i, s in enumerate(self.series) if s.meta.kind == kind]
        return hits[0] if len(hits) == 1 else None


@dataclass(frozen=True)
class ParameterMaps:
    """Log-intercepts ``theta`` (C, *dims) and the shared decay ``r`` (*dims) in 1/s."""

    theta: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        theta = _frozen(self.theta)
        r = _frozen(self.r)
        if theta.ndim != 4 or theta.shape[1:] != r.shape:
            raise ValueError(f"theta {theta.shape} and r {r.shape} are inconsistent")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(r))):
            raise ValueError("parameter maps must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "r", r)

    @property
    def n_contrasts(self) -> int:
        return self.theta.shape[0]

    def stack(self) -> np.ndarray:
        """All channels as one (C+1, *dims) array, decay last."""
        return np.concatenate([self.theta, self.r[None]], axis=0)

    @classmethod
    def from_stack(cls, x: np.ndarray) -> "ParameterMaps":
        return cls(x[:-1], x[-1])


def validate_dataset(d: Dataset) -> list[str]:
    """List every invariant violation in ``d``; an empty list means valid."""
    out: list[str] = []
    dims = d.recon_grid.dims
    if len(d.series) < 1:
        out.append("dataset needs at least one contrast series")
    for i, s in enumerate(d.series):
        where = f"@ series {i}"
        m = s.meta
        if m.kind not in KINDS:
            out.append(f"unknown contrast kind {m.kind!r} {where}")
        if not 0 < m.flip_angle < math.pi / 2:
            out.append(f"flip angle must be in (0, pi/2) {where}")
        if not m.tr > 0:
            out.append(f"tr must be > 0 {where}")
        if bool(m.mt_prepulse) != (m.kind == "MTw"):
            out.append(f"mt_prepulse must be set iff kind is MTw {where}")
        if not (s.sigma > 0 and math.isfinite(s.sigma)):
            out.append(f"sigma must be > 0 {where}")
        if len(s.echoes) < 1:
            out.append(f"series has no echoes {where}")
        tes = [e.te for e in s.echoes]
        if any(not (t > 0 and math.isfinite(t)) for t in tes):
            out.append(f"echo times must be > 0 {where}")
        if any(b <= a for a, b in zip(tes, tes[1:])):
            out.append(f"echo times not strictly increasing {where}")
        for j, e in enumerate(s.echoes):
            if e.data.shape != s.native_grid.dims:
                out.append(f"echo {j} dims {e.data.shape} != native grid {s.native_grid.dims} {where}")
            elif not np.all(np.isfinite(e.data)):
                out.append(f"echo {j} has non-finite values {where}")
            elif np.any(e.data < 0):
                out.append(f"echo {j} has negative magnitudes {where}")
        if s.pose is None and s.native_grid.dims != dims:
            out.append(f"native grid differs from recon grid without a pose {where}")
    if sum(len(s.echoes) for s in d.series) < 2:
        out.append("at least 2 echoes are needed in total")
    if d.b1_map is not None:
        if d.b1_map.shape != dims:
            out.append(f"b1 map dims {d.b1_map.shape} != recon grid {dims}")
        elif not np.all(d.b1_map > 0):
            out.append("b1 map values must be > 0")
    for name, mask in d.masks.items():
        if mask.shape != dims:
            out.append(f"mask {name!r} dims {mask.shape} != recon grid {dims}")
    return out


def check_dataset(d: Dataset) -> None:
    problems = validate_dataset(d)
    if problems:
        raise DatasetError("invalid dataset: " + "; ".join(problems))

