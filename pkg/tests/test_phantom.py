import numpy as np
import pytest

from estatics.loglinear import fit_loglinear
from estatics.phantom import (MODULATION, TISSUES, default_protocol, make_phantom_maps,
                              parenchyma_sigma, random_poses, simulate_dataset)
from estatics.volume import Grid3, validate_dataset

GRID = Grid3((24, 24, 24))


@pytest.fixture(scope="module")
def truth():
    return make_phantom_maps(GRID, seed=2)


def test_same_seed_same_phantom(truth):
    again = make_phantom_maps(GRID, seed=2)
    for name in ("m0", "r1", "r2s", "mtsat"):
        np.testing.assert_array_equal(getattr(truth, name), getattr(again, name))
    assert not np.array_equal(make_phantom_maps(GRID, seed=3).r1, truth.r1)


def test_masks_partition_grid(truth):
    stack = np.stack([truth.masks[k] for k in ("GM", "WM", "CSF", "BG")]).astype(int)
    np.testing.assert_array_equal(stack.sum(axis=0), 1)
    assert all(truth.masks[k].any() for k in ("GM", "WM", "CSF", "BG"))


def test_class_values_within_modulation(truth):
    for p, name in enumerate(("m0", "r1", "r2s", "mtsat")):
        field = getattr(truth, name)
        for tissue in ("GM", "WM", "CSF"):
            mask = truth.masks[tissue] & ~truth.vessels
            base = TISSUES[tissue][p]
            vals = field[mask]
            assert np.all(np.abs(vals - base) <= MODULATION * base + 1e-12)
            assert vals.mean() == pytest.approx(base, rel=MODULATION)


def test_vessels_have_high_decay(truth):
    assert truth.vessels.any()
    np.testing.assert_array_equal(truth.r2s[truth.vessels], 80.0)
    assert not np.any(truth.vessels & truth.masks["CSF"])


def test_small_grid_rejected():
    with pytest.raises(ValueError):
        make_phantom_maps(Grid3((15, 24, 24)))


def test_default_protocol_echo_counts():
    p = default_protocol()
    assert [len(e.tes) for e in p] == [8, 8, 6]
    assert [e.meta.kind for e in p] == ["PDw", "T1w", "MTw"]
    np.testing.assert_allclose(p[2].tes, 2.3e-3 * np.arange(1, 7))
    assert [round(np.degrees(e.meta.flip_angle)) for e in p] == [6, 21, 6]


def test_noiseless_simulation_recovers_truth(truth):
    d = simulate_dataset(truth, sigma=1e-12)
    assert validate_dataset(d) == []
    fit = fit_loglinear(d)
    ref = truth.parameter_maps()
    np.testing.assert_allclose(fit.theta, ref.theta, atol=1e-6)
    np.testing.assert_allclose(fit.r, ref.r, atol=1e-6)


def test_decay_consistency(truth):
    d = simulate_dataset(truth, noise=False)
    s = d.series[1]
    ratio = s.echoes[2].data / s.echoes[5].data
    np.testing.assert_allclose(ratio, np.exp((s.tes[5] - s.tes[2]) * truth.r2s), rtol=1e-12)


def test_rice_mean_at_high_snr(truth):
    sigma = 2.0
    d = simulate_dataset(truth, sigma=sigma, seed=5)
    clean = simulate_dataset(truth, noise=False)
    for tissue in ("GM", "WM"):
        m = truth.masks[tissue]
        obs = d.series[0].echoes[0].data[m]
        nu = clean.series[0].echoes[0].data[m]
        assert np.all(nu / sigma > 5)
        expected = nu + sigma ** 2 / (2 * nu)
        err = abs(np.mean(obs - expected))
        assert err < 3 * sigma / np.sqrt(m.sum())


def test_default_sigma_gives_snr_ten(truth):
    sigma = parenchyma_sigma(truth, 10.0)
    d = simulate_dataset(truth)
    assert d.series[0].sigma == pytest.approx(sigma)
    par = truth.masks["GM"] | truth.masks["WM"]
    clean = simulate_dataset(truth, noise=False)
    snr = np.mean([s.echoes[0].data[par].mean() for s in clean.series]) / sigma
    assert snr == pytest.approx(10.0, rel=1e-10)


def test_posed_simulation_consistent_with_map_fit():
    from estatics.diffops import RegConfig
    from estatics.mapfit import FitConfig, fit_map
    from estatics.phantom import PhantomTruth
    from estatics.projection import RigidTransform

    grid = Grid3((20, 20, 20))
    u, v, w = np.meshgrid(*[np.linspace(-1, 1, 20)] * 3, indexing="ij")
    smooth = 0.5 + 0.5 * np.sin(1.3 * u + 0.4) * np.cos(0.9 * v) * np.cos(0.7 * w)
    full = np.ones(grid.dims, bool)
    t = PhantomTruth(grid, 700 + 300 * smooth, 0.6 + 0.6 * smooth, 15 + 10 * smooth,
                     0.01 + 0.01 * smooth, ~full, {"GM": full, "WM": ~full})
    poses = [None, RigidTransform.from_params([0.6, -0.4, 0.3, 0.02, -0.015, 0.01]), None]
    d = simulate_dataset(t, poses=poses, noise=False)
    log_fit = fit_loglinear(d)
    map_fit, _ = fit_map(d, FitConfig(reg=RegConfig.make("none", 3), max_outer=15))
    inner = (slice(3, -3),) * 3
    for a, b in ((log_fit.r, map_fit.r), (np.exp(log_fit.theta[1]), np.exp(map_fit.theta[1]))):
        rms = np.sqrt(np.mean(((a - b) / b)[inner] ** 2))
        assert rms < 0.02
    ref = t.parameter_maps()
    np.testing.assert_allclose(map_fit.r[inner], ref.r[inner], rtol=1e-4)
