import numpy as np
import pytest

from estatics.diffops import (EPS_W, RegConfig, grad_adjoint, grad_apply, jtv_energy_and_weights,
                              jtv_weights, membrane_apply, membrane_diagonal, membrane_energy)
from estatics.volume import Grid3

S = 1 / np.sqrt(2)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def test_constant_field_has_zero_gradient():
    grid = Grid3((4, 5, 6), (0.8, 1.0, 1.3))
    assert not np.any(grad_apply(np.full(grid.dims, 3.7), grid))


def test_impulse_stencil():
    grid = Grid3((5, 5, 5))
    f = np.zeros(grid.dims)
    f[2, 2, 2] = 1.0
    g = grad_apply(f, grid)
    # channels: forward x, backward x, forward y, ...; backward = f[i] - f[i-1]
    assert g.shape == (6, 5, 5, 5)
    np.testing.assert_allclose(g[:, 2, 2, 2], [-S, S] * 3)
    assert g[0, 1, 2, 2] == pytest.approx(S)
    assert g[1, 3, 2, 2] == pytest.approx(-S)
    assert np.count_nonzero(g) == 12
    assert np.abs(g).sum() == pytest.approx(12 * S)


def test_ramp_differences_and_boundaries():
    grid = Grid3((5, 4, 4))
    f = np.broadcast_to(np.arange(5.0)[:, None, None], grid.dims)
    g = grad_apply(f, grid)
    np.testing.assert_allclose(g[0, :-1], S)
    np.testing.assert_allclose(g[1, 1:], S)
    assert not np.any(g[0, -1]) and not np.any(g[1, 0])
    assert not np.any(g[2:])


def test_spacing_scales_differences():
    grid = Grid3((5, 4, 4), (0.5, 1, 1))
    f = np.broadcast_to(np.arange(5.0)[:, None, None], grid.dims)
    assert grad_apply(f, grid)[0, 0, 0, 0] == pytest.approx(2 * S)


def test_adjoint_identity(rng):
    grid = Grid3((7, 6, 5), (0.9, 1.1, 1.4))
    for _ in range(5):
        f = rng.normal(size=grid.dims)
        g = rng.normal(size=(6,) + grid.dims)
        lhs = np.vdot(grad_apply(f, grid), g)
        rhs = np.vdot(f, grad_adjoint(g, grid))
        assert _rel(lhs, rhs) < 1e-10
    assert not np.any(grad_adjoint(np.zeros((6,) + grid.dims), grid))


def test_adjoint_of_impulse_gradient_is_laplacian_column():
    grid = Grid3((5, 5, 5))
    f = np.zeros(grid.dims)
    f[2, 2, 2] = 1.0
    col = grad_adjoint(grad_apply(f, grid), grid)
    assert col[2, 2, 2] == pytest.approx(6.0)
    assert col[1, 2, 2] == pytest.approx(-1.0)
    assert col.sum() == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(col, membrane_apply(f, None, 1.0, grid), atol=1e-14)


def test_adjoint_of_constant_is_zero():
    grid = Grid3((4, 4, 3))
    assert not np.any(grad_adjoint(grad_apply(np.full(grid.dims, 2.5), grid), grid))


def test_flat_maps_hit_the_floor():
    grid = Grid3((4, 4, 4))
    e, w = jtv_energy_and_weights(np.ones((3,) + grid.dims), RegConfig("jtv", (1, 1, 1)), grid)
    np.testing.assert_array_equal(w, EPS_W)
    assert e == pytest.approx(EPS_W * grid.n_voxels)


def test_ramp_weight_is_one():
    grid = Grid3((5, 5, 5))
    f = np.broadcast_to(np.arange(5.0)[:, None, None], grid.dims)[None]
    _, w = jtv_energy_and_weights(f, RegConfig("jtv", (1.0,)), grid)
    assert w[2, 2, 2] == pytest.approx(1.0)


def test_weights_positively_homogeneous(rng):
    grid = Grid3((6, 6, 6))
    x = rng.normal(size=(3,) + grid.dims)
    lam = [2.0, 1.0, 0.5]
    w1, w2 = jtv_weights(x, lam, grid), jtv_weights(2 * x, lam, grid)
    off = w1 > 10 * EPS_W
    np.testing.assert_allclose(w2[off], 2 * w1[off], rtol=1e-12)


def test_jtv_requires_jtv_mode():
    with pytest.raises(ValueError):
        jtv_energy_and_weights(np.zeros((2, 3, 3, 3)), RegConfig("tikhonov", (1, 1)), Grid3((3, 3, 3)))


def test_constant_maps_in_kernel():
    grid = Grid3((4, 5, 3))
    x = np.full((3,) + grid.dims, 1.5)
    assert not np.any(membrane_apply(x, np.full(grid.dims, 0.3), [1, 2, 3], grid))


def test_zero_lambda_gives_zero(rng):
    grid = Grid3((4, 4, 4))
    x = rng.normal(size=(3,) + grid.dims)
    assert not np.any(membrane_apply(x, None, [0, 0, 0], grid))


def test_quadratic_form_matches_bound(rng):
    grid = Grid3((6, 6, 6), (1.0, 0.8, 1.2))
    x = rng.normal(size=(4,) + grid.dims)
    lam = np.array([3.0, 1.0, 2.0, 0.5])
    w = jtv_weights(x, lam, grid)
    q = np.vdot(x, membrane_apply(x, w, lam, grid))
    g2 = np.sum(grad_apply(x, grid) ** 2, axis=1)
    direct = float(np.sum(np.tensordot(lam, g2, axes=1) / w))
    assert _rel(q, direct) < 1e-10
    assert _rel(q, membrane_energy(x, w, lam, grid)) < 1e-10


def test_bound_tight_at_closed_form_weights(rng):
    grid = Grid3((6, 6, 6))
    x = rng.normal(size=(3,) + grid.dims)
    cfg = RegConfig("jtv", (1.0, 2.0, 0.5))
    energy, w = jtv_energy_and_weights(x, cfg, grid)
    assert np.all(w > EPS_W)
    bound = 0.5 * w.sum() + 0.5 * membrane_energy(x, w, cfg.lam, grid)
    assert _rel(bound, energy) < 1e-8
    for k in range(100):
        other = w * np.exp(np.random.default_rng(k).normal(0, 0.5, grid.dims))
        assert 0.5 * other.sum() + 0.5 * membrane_energy(x, other, cfg.lam, grid) >= energy


def test_membrane_symmetric_psd(rng):
    grid = Grid3((5, 6, 4), (1.0, 0.7, 1.5))
    lam = [1.0, 4.0]
    w = rng.uniform(0.1, 3, grid.dims)
    for weights in (None, w):
        a = rng.normal(size=(2,) + grid.dims)
        b = rng.normal(size=(2,) + grid.dims)
        ab = np.vdot(a, membrane_apply(b, weights, lam, grid))
        ba = np.vdot(b, membrane_apply(a, weights, lam, grid))
        assert _rel(ab, ba) < 1e-10
        assert np.vdot(a, membrane_apply(a, weights, lam, grid)) >= 0


def test_membrane_diagonal_matches_operator(rng):
    grid = Grid3((3, 4, 3), (1.0, 0.5, 2.0))
    w = rng.uniform(0.2, 2, grid.dims)
    diag = membrane_diagonal(w, grid)
    for idx in [(0, 0, 0), (1, 2, 1), (2, 3, 2)]:
        e = np.zeros(grid.dims)
        e[idx] = 1.0
        assert membrane_apply(e, w, 1.0, grid)[idx] == pytest.approx(diag[idx], rel=1e-14)


def test_regconfig_validation():
    with pytest.raises(ValueError):
        RegConfig("bogus", (1.0,))
    with pytest.raises(ValueError):
        RegConfig("jtv", (1.0, -1.0))
    with pytest.raises(ValueError):
        RegConfig("jtv", (1.0, np.inf))
    assert not np.any(RegConfig("none", (5.0, 1.0)).effective_lam())
    assert RegConfig.make("jtv", 3).lam == (5e3, 5e3, 5e3, 10.0)
