import json
import struct

import numpy as np
import pytest

from conftest import make_dataset, small_pose, smooth_maps
from estatics.io import (ManifestError, ManifestPathError, ManifestSchemaError,
                         ManifestShapeError, ManifestSyntaxError, ManifestValueError, NiftiError,
                         fill_sigma, load_manifest, read_volume, save_manifest, write_volume)
from estatics.volume import Grid3


def _patch(path, offset, fmt, *values):
    raw = bytearray(path.read_bytes())
    struct.pack_into(fmt, raw, offset, *values)
    path.write_bytes(bytes(raw))


def test_roundtrip_bit_identical(tmp_path, rng):
    grid = Grid3((7, 5, 3), (0.8, 1.0, 1.25))
    data = rng.normal(size=grid.dims).astype(np.float32)
    write_volume(tmp_path / "a.nii", data, grid)
    vol = read_volume(tmp_path / "a.nii")
    assert vol.data.dtype == np.float32
    np.testing.assert_array_equal(vol.data, data)
    assert vol.grid == grid


def test_roundtrip_at_default_resolution(tmp_path, rng):
    grid = Grid3((32, 32, 32), (0.8, 0.8, 0.8))
    data = rng.uniform(0, 100, grid.dims)
    write_volume(tmp_path / "a.nii", data, grid)
    vol = read_volume(tmp_path / "a.nii")
    assert vol.grid.dims == (32, 32, 32)
    assert vol.grid.spacing == (0.8, 0.8, 0.8)
    np.testing.assert_array_equal(vol.data, data.astype(np.float32))


def test_written_header_layout(tmp_path):
    grid = Grid3((4, 3, 2), (1.0, 2.0, 3.0))
    write_volume(tmp_path / "a.nii", np.arange(24.0).reshape(grid.dims), grid)
    raw = (tmp_path / "a.nii").read_bytes()
    assert len(raw) == 352 + 24 * 4
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert raw[344:348] == b"n+1\0"
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 4, 3, 2)
    assert struct.unpack_from("<hh", raw, 70) == (16, 32)
    # first axis varies fastest on disk
    first = np.frombuffer(raw, "<f4", count=4, offset=352)
    np.testing.assert_array_equal(first, [0.0, 6.0, 12.0, 18.0])


def test_four_dimensional_channels(tmp_path, rng):
    grid = Grid3((3, 4, 5))
    data = rng.normal(size=grid.dims + (2,)).astype(np.float32)
    write_volume(tmp_path / "a.nii", data, grid)
    np.testing.assert_array_equal(read_volume(tmp_path / "a.nii").data, data)


@pytest.mark.parametrize("code,dtype", [(2, "<u1"), (4, "<i2"), (64, "<f8")])
def test_reads_other_dtypes(tmp_path, code, dtype):
    grid = Grid3((2, 3, 4))
    values = np.arange(24).reshape(grid.dims)
    write_volume(tmp_path / "a.nii", values, grid)
    raw = bytearray((tmp_path / "a.nii").read_bytes()[:352])
    struct.pack_into("<hh", raw, 70, code, np.dtype(dtype).itemsize * 8)
    body = values.astype(dtype).tobytes(order="F")
    (tmp_path / "b.nii").write_bytes(bytes(raw) + body)
    vol = read_volume(tmp_path / "b.nii")
    assert vol.data.dtype == np.dtype(dtype).newbyteorder("=")
    np.testing.assert_array_equal(vol.data, values)


def test_scaling_applied(tmp_path):
    grid = Grid3((2, 2, 2))
    write_volume(tmp_path / "a.nii", np.ones(grid.dims), grid)
    _patch(tmp_path / "a.nii", 112, "<ff", 2.0, 0.5)
    np.testing.assert_array_equal(read_volume(tmp_path / "a.nii").data, 2.5)


def test_two_file_form_rejected(tmp_path):
    grid = Grid3((2, 2, 2))
    write_volume(tmp_path / "a.nii", np.ones(grid.dims), grid)
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    raw[344:348] = b"ni1\0"
    (tmp_path / "a.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiError, match="unsupported: two-file NIfTI"):
        read_volume(tmp_path / "a.nii")


@pytest.mark.parametrize("mutate,message", [
    (lambda r: struct.pack_into(">i", r, 0, 348), "big-endian"),
    (lambda r: struct.pack_into("<i", r, 0, 540), "bad header size"),
    (lambda r: r.__setitem__(slice(344, 348), b"abcd"), "bad magic"),
    (lambda r: struct.pack_into("<hh", r, 70, 512, 16), "unsupported datatype"),
    (lambda r: struct.pack_into("<h", r, 40, 5), "number of dimensions"),
    (lambda r: struct.pack_into("<f", r, 108, 100.0), "vox_offset"),
    (lambda r: struct.pack_into("<h", r, 42, 50), "truncated"),
    (lambda r: struct.pack_into("<f", r, 80, 0.0), "voxel size"),
])
def test_malformed_headers_rejected(tmp_path, mutate, message):
    grid = Grid3((2, 3, 4))
    write_volume(tmp_path / "a.nii", np.ones(grid.dims), grid)
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    mutate(raw)
    (tmp_path / "a.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiError, match=message):
        read_volume(tmp_path / "a.nii")


def test_short_file_rejected(tmp_path):
    (tmp_path / "a.nii").write_bytes(b"\0" * 100)
    with pytest.raises(NiftiError, match="shorter"):
        read_volume(tmp_path / "a.nii")


def test_write_checks_shape(tmp_path):
    with pytest.raises(NiftiError):
        write_volume(tmp_path / "a.nii", np.ones((2, 2, 3)), Grid3((2, 2, 2)))


# -- manifest -----------------------------------------------------------------


@pytest.fixture
def saved(tmp_path):
    grid = Grid3((6, 5, 4), (0.8, 0.8, 0.8))
    truth = smooth_maps(grid, seed=1)
    masks = {"GM": np.zeros(grid.dims, bool)}
    masks["GM"][2:4] = True
    d = make_dataset(truth, grid, sigma=2.0, poses=[None, small_pose(1), None], masks=masks)
    save_manifest(tmp_path / "manifest.json", d)
    return tmp_path / "manifest.json", d


def _edit(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_manifest_roundtrip(saved):
    path, d = saved
    back = load_manifest(path)
    assert back.recon_grid.dims == d.recon_grid.dims
    for a, b in zip(back.series, d.series):
        assert a.meta.kind == b.meta.kind
        assert a.meta.flip_angle == pytest.approx(b.meta.flip_angle, rel=1e-12)
        assert a.meta.tr == pytest.approx(b.meta.tr, rel=1e-12)
        np.testing.assert_allclose(a.tes, b.tes, rtol=1e-12)
        assert a.sigma == b.sigma
        np.testing.assert_allclose(a.echoes[0].data, b.echoes[0].data, rtol=1e-6)
        if b.pose is None:
            assert a.pose is None
        else:
            np.testing.assert_allclose(a.pose.matrix, b.pose.matrix, atol=1e-12)
    np.testing.assert_array_equal(back.masks["GM"], d.masks["GM"])


def test_units_converted(saved):
    path, _ = saved
    doc = json.loads(path.read_text())
    d = load_manifest(path)
    assert d.series[0].tes[0] == pytest.approx(doc["series"][0]["echoes"][0]["te_ms"] * 1e-3)
    assert d.series[1].meta.flip_angle == pytest.approx(np.deg2rad(doc["series"][1]["flip_angle_deg"]))


def test_missing_sigma_filled(saved):
    path, _ = saved
    _edit(path, lambda doc: [s.pop("sigma") for s in doc["series"]])
    d = load_manifest(path)
    assert all(np.isnan(s.sigma) for s in d.series)
    filled = fill_sigma(d, lambda data: 4.0)
    assert [s.sigma for s in filled.series] == [4.0, 4.0, 4.0]


@pytest.mark.parametrize("edit,error,message", [
    (lambda doc: doc["series"][0].pop("tr_ms"), ManifestSchemaError, "missing key 'tr_ms'"),
    (lambda doc: doc["series"][0].update(colour="red"), ManifestSchemaError, "unknown keys"),
    (lambda doc: doc["series"][0].update(tr_ms="25"), ManifestSchemaError, "wrong type"),
    (lambda doc: doc["series"][0].update(flip_angle_deg=120), ManifestValueError, "flip_angle"),
    (lambda doc: doc["series"][0].update(kind="T2w"), ManifestValueError, "kind"),
    (lambda doc: doc["series"][0].update(sigma=-1), ManifestValueError, "sigma"),
    (lambda doc: doc["series"][0].update(mt_prepulse=True), ManifestValueError, "mt_prepulse"),
    (lambda doc: doc["series"][0]["echoes"].reverse(), ManifestValueError, "increasing"),
    (lambda doc: doc["series"][0]["echoes"][0].update(path="nope.nii"), ManifestPathError,
     "not found"),
    (lambda doc: doc["series"][1].update(pose=[[1, 0], [0, 1]]), ManifestSchemaError, "4x4"),
    (lambda doc: doc["series"][1].update(pose=np.diag([2.0, 1, 1, 1]).tolist()),
     ManifestValueError, "pose"),
    (lambda doc: doc.update(series=[]), ManifestSchemaError, "no series"),
])
def test_manifest_errors_distinct(saved, edit, error, message):
    path, _ = saved
    _edit(path, edit)
    with pytest.raises(error, match=message):
        load_manifest(path)


def test_manifest_syntax_error(tmp_path):
    (tmp_path / "m.json").write_text("{series: [")
    with pytest.raises(ManifestSyntaxError):
        load_manifest(tmp_path / "m.json")


def test_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestPathError):
        load_manifest(tmp_path / "absent.json")


def test_manifest_shape_mismatch(saved, tmp_path):
    path, _ = saved
    write_volume(tmp_path / "small.nii", np.ones((2, 2, 2)), Grid3((2, 2, 2)))
    _edit(path, lambda doc: doc["series"][0]["echoes"][1].update(path="small.nii"))
    with pytest.raises(ManifestShapeError):
        load_manifest(path)


def test_manifest_errors_share_base(saved):
    path, _ = saved
    _edit(path, lambda doc: doc["series"][0].pop("kind"))
    with pytest.raises(ManifestError):
        load_manifest(path)
