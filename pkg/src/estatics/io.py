"""Single-file NIfTI-1 subset and the JSON dataset manifest.

Only little-endian ``n+1`` files are read, with uint8, int16, float32 or
float64 voxels and at most four dimensions (the fourth holds channels).
Volumes are always written as float32 with a 352-byte header. Voxels are
stored with the first axis varying fastest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projection import RigidTransform
from .volume import KINDS, ContrastMeta, ContrastSeries, Dataset, EchoVolume, Grid3

HEADER_SIZE = 348
VOX_OFFSET = 352
DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4"), 64: np.dtype("<f8")}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    grid: Grid3
    affine: np.ndarray


def centred_affine(grid: Grid3) -> np.ndarray:
    """Voxel-to-world matrix with the grid centre at the origin."""
    aff = np.diag(list(grid.spacing) + [1.0])
    aff[:3, 3] = [-(n - 1) / 2.0 * h for n, h in zip(grid.dims, grid.spacing)]
    return aff


def write_volume(path, data: np.ndarray, grid: Grid3, affine: np.ndarray | None = None) -> None:
    data = np.asarray(data)
    if data.shape[:3] != grid.dims or data.ndim not in (3, 4):
        raise NiftiError(f"data shape {data.shape} does not match grid {grid.dims}")
    affine = centred_affine(grid) if affine is None else np.asarray(affine, dtype=np.float64)
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    pixdim = [1.0] + list(grid.spacing) + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # mm
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform off, sform scanner
    for row in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * row, *affine[row])
    hdr[344:348] = b"n+1\0"
    body = np.asarray(data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + body)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise NiftiError(f"{path}: unsupported: big-endian NIfTI")
        raise NiftiError(f"{path}: bad header size {size}, expected 348")
    magic = raw[344:348]
    if magic == b"ni1\0":
        raise NiftiError(f"{path}: unsupported: two-file NIfTI")
    if magic != b"n+1\0":
        raise NiftiError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise NiftiError(f"{path}: unsupported number of dimensions {ndim}")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    if any(d < 1 for d in shape):
        raise NiftiError(f"{path}: non-positive dimension in {shape}")
    shape = shape + (1,) * (3 - len(shape)) if ndim < 3 else shape
    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dtype = DTYPES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    (offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(offset)
    if offset < VOX_OFFSET:
        raise NiftiError(f"{path}: vox_offset {offset} inside the header")
    count = int(np.prod(shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiError(f"{path}: truncated data, expected {count} voxels")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    slope, inter = struct.unpack_from("<ff", raw, 112)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float64) * (slope if slope else 1.0) + inter
    # pixdim is float32; its shortest decimal form restores values like 0.8 exactly
    spacing = tuple(abs(float(str(np.float32(p)))) for p in pixdim[1:4])
    if any(not h > 0 for h in spacing):
        raise NiftiError(f"{path}: non-positive voxel size {spacing}")
    grid = Grid3(shape[:3], spacing)
    (sform,) = struct.unpack_from("<h", raw, 254)
    if sform > 0:
        affine = np.eye(4)
        for row in range(3):
            affine[row] = struct.unpack_from("<4f", raw, 280 + 16 * row)
    else:
        affine = centred_affine(grid)
    return Volume(data, grid, affine)


# -- manifest ----------------------------------------------------------------


class ManifestError(ValueError):
    """Base class for manifest problems."""


class ManifestSyntaxError(ManifestError):
    """The file is not valid JSON."""


class ManifestSchemaError(ManifestError):
    """A required key is missing, unknown, or has the wrong type."""


class ManifestValueError(ManifestError):
    """A value is outside its physical range."""


class ManifestPathError(ManifestError):
    """A referenced volume file does not exist."""


class ManifestShapeError(ManifestError):
    """Volumes that must share a grid do not."""


SERIES_KEYS = {"kind", "flip_angle_deg", "tr_ms", "mt_prepulse", "sigma", "pose", "echoes"}
TOP_KEYS = {"series", "b1_path", "masks", "recon_grid"}


def _require(obj, key, types, where):
    if key not in obj:
        raise ManifestSchemaError(f"missing key {key!r} in {where}")
    val = obj[key]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ManifestSchemaError(f"{where}.{key} must be {types}, got bool")
    if not isinstance(val, types):
        raise ManifestSchemaError(f"{where}.{key} has wrong type {type(val).__name__}")
    return val


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ManifestSchemaError(f"{where} must be an object")
    extra = set(obj) - allowed
    if extra:
        raise ManifestSchemaError(f"unknown keys {sorted(extra)} in {where}")


def _volume(base: Path, rel, where) -> Volume:
    if not isinstance(rel, str):
        raise ManifestSchemaError(f"{where} path must be a string")
    path = base / rel
    if not path.is_file():
        raise ManifestPathError(f"{where}: file not found: {path}")
    return read_volume(path)


def _pose(value, where) -> RigidTransform:
    try:
        m = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ManifestSchemaError(f"{where}.pose must be a 4x4 numeric matrix") from None
    if m.shape != (4, 4):
        raise ManifestSchemaError(f"{where}.pose must be 4x4, got shape {m.shape}")
    try:
        return RigidTransform(m)
    except ValueError as err:
        raise ManifestValueError(f"{where}.pose: {err}") from None


def _series(base: Path, s, i: int) -> ContrastSeries:
    where = f"series[{i}]"
    _check_keys(s, SERIES_KEYS, where)
    kind = _require(s, "kind", str, where)
    if kind not in KINDS:
        raise ManifestValueError(f"{where}.kind must be one of {KINDS}, got {kind!r}")
    angle = float(_require(s, "flip_angle_deg", (int, float), where))
    if not 0 < angle < 90:
        raise ManifestValueError(f"{where}.flip_angle_deg must be in (0, 90), got {angle}")
    tr = float(_require(s, "tr_ms", (int, float), where))
    if not tr > 0:
        raise ManifestValueError(f"{where}.tr_ms must be > 0, got {tr}")
    mt = s.get("mt_prepulse", kind == "MTw")
    if not isinstance(mt, bool):
        raise ManifestSchemaError(f"{where}.mt_prepulse must be a boolean")
    if mt != (kind == "MTw"):
        raise ManifestValueError(f"{where}: mt_prepulse must be true exactly for MTw series")
    sigma = s.get("sigma")
    if sigma is not None:
        if isinstance(sigma, bool) or not isinstance(sigma, (int, float)):
            raise ManifestSchemaError(f"{where}.sigma has wrong type")
        if not sigma > 0:
            raise ManifestValueError(f"{where}.sigma must be > 0, got {sigma}")
    pose = _pose(s["pose"], where) if s.get("pose") is not None else None
    echoes_in = _require(s, "echoes", list, where)
    if not echoes_in:
        raise ManifestSchemaError(f"{where}.echoes is empty")
    echoes, grid = [], None
    for e, entry in enumerate(echoes_in):
        ew = f"{where}.echoes[{e}]"
        _check_keys(entry, {"te_ms", "path"}, ew)
        te = float(_require(entry, "te_ms", (int, float), ew))
        if not te > 0:
            raise ManifestValueError(f"{ew}.te_ms must be > 0, got {te}")
        vol = _volume(base, _require(entry, "path", str, ew), ew)
        if vol.data.ndim != 3:
            raise ManifestShapeError(f"{ew}: echo volume must be 3D, got {vol.data.shape}")
        if grid is None:
            grid = vol.grid
        elif vol.grid != grid:
            raise ManifestShapeError(f"{ew}: grid {vol.grid.dims} differs from echo 0 {grid.dims}")
        if not np.all(np.isfinite(vol.data)):
            raise ManifestValueError(f"{ew}: non-finite voxel values")
        echoes.append(EchoVolume(te * 1e-3, vol.data.astype(np.float64)))
    tes = [e.te for e in echoes]
    if any(b <= a for a, b in zip(tes, tes[1:])):
        raise ManifestValueError(f"{where}: echo times not strictly increasing")
    meta = ContrastMeta(kind, math.radians(angle), tr * 1e-3, mt)
    # sigma = nan marks "estimate later"; validate_dataset rejects it until then
    return ContrastSeries(meta, tuple(echoes), math.nan if sigma is None else sigma, grid, pose)


def load_manifest(path) -> Dataset:
    """Load a dataset manifest; ms and degrees are converted to s and radians.

    Series without ``sigma`` get NaN, to be filled by :func:`fill_sigma`.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestPathError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ManifestSyntaxError(f"{path}: invalid JSON: {err}") from None
    _check_keys(doc, TOP_KEYS, "manifest")
    series_in = _require(doc, "series", list, "manifest")
    if not series_in:
        raise ManifestSchemaError("manifest has no series")
    base = path.parent
    series = tuple(_series(base, s, i) for i, s in enumerate(series_in))

    if "recon_grid" in doc:
        g = doc["recon_grid"]
        _check_keys(g, {"dims", "spacing"}, "recon_grid")
        try:
            recon = Grid3(tuple(int(n) for n in _require(g, "dims", list, "recon_grid")),
                          tuple(float(h) for h in g.get("spacing", (1.0, 1.0, 1.0))))
        except (TypeError, ValueError) as err:
            raise ManifestValueError(f"recon_grid: {err}") from None
    else:
        recon = series[0].native_grid

    b1 = None
    if doc.get("b1_path") is not None:
        vol = _volume(base, doc["b1_path"], "b1_path")
        if vol.data.shape != recon.dims:
            raise ManifestShapeError(f"b1 map shape {vol.data.shape} != recon grid {recon.dims}")
        b1 = vol.data.astype(np.float64)
        if not np.all(b1 > 0):
            raise ManifestValueError("b1 map must be > 0 everywhere")
    masks = {}
    if doc.get("masks") is not None:
        if not isinstance(doc["masks"], dict):
            raise ManifestSchemaError("masks must be an object of name: path")
        for name, rel in doc["masks"].items():
            vol = _volume(base, rel, f"masks.{name}")
            if vol.data.shape != recon.dims:
                raise ManifestShapeError(f"mask {name!r} shape {vol.data.shape} != {recon.dims}")
            masks[name] = vol.data > 0.5
    return Dataset(recon, series, b1, masks)


def fill_sigma(d: Dataset, estimator=None) -> Dataset:
    """Replace NaN noise levels by a Rice-mixture estimate on each first echo."""
    if estimator is None:
        from .rice import fit_rice_mixture

        def estimator(data):
            return fit_rice_mixture(data).sigma
    for c, s in enumerate(d.series):
        if math.isnan(s.sigma):
            d = d.replace_series(c, s.with_sigma(estimator(s.echoes[0].data)))
    return d


def save_manifest(path, d: Dataset, prefix: str = "") -> None:
    """Write all volumes of ``d`` next to ``path`` and a manifest referencing them."""
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    series = []
    for c, s in enumerate(d.series):
        echoes = []
        for e, echo in enumerate(s.echoes):
            name = f"{prefix}{s.meta.kind}_{c}_echo{e + 1}.nii"
            write_volume(base / name, echo.data, s.native_grid)
            echoes.append({"te_ms": echo.te * 1e3, "path": name})
        entry = {
            "kind": s.meta.kind,
            "flip_angle_deg": math.degrees(s.meta.flip_angle),
            "tr_ms": s.meta.tr * 1e3,
            "mt_prepulse": s.meta.mt_prepulse,
            "echoes": echoes,
        }
        if not math.isnan(s.sigma):
            entry["sigma"] = s.sigma
        if s.pose is not None:
            entry["pose"] = s.pose.matrix.tolist()
        series.append(entry)
    doc = {"recon_grid": {"dims": list(d.recon_grid.dims), "spacing": list(d.recon_grid.spacing)},
           "series": series}
    if d.b1_map is not None:
        write_volume(base / f"{prefix}b1.nii", d.b1_map, d.recon_grid)
        doc["b1_path"] = f"{prefix}b1.nii"
    if d.masks:
        doc["masks"] = {}
        for name, m in d.masks.items():
            write_volume(base / f"{prefix}mask_{name}.nii", m.astype(np.float32), d.recon_grid)
            doc["masks"][name] = f"{prefix}mask_{name}.nii"
    path.write_text(json.dumps(doc, indent=2))
