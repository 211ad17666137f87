import numpy as np
import pytest
from hypothesis import given, strategies as st

from martingale_pe import diffusion_env as de
from martingale_pe import value_models as vm

GRID = de.TimeGrid(0.0, 1.0, 20)


def all_families():
    return [
        vm.AffineTimeScaled(), vm.QuadTriple(), vm.Cubic(), vm.ExpPinned(), vm.ExpUnpinned(),
        vm.LQQuadratic(), vm.LinearBasis.lq_offset(1.5), vm.PayoffResidualMLP(1.0, 1.0, (8, 6)), vm.Sectional(GRID),
    ]


def _theta_for(fam, rng):
    if isinstance(fam, vm.PayoffResidualMLP):
        return fam.init_params(int(rng.integers(0, 1000)))
    if isinstance(fam, (vm.ExpPinned, vm.ExpUnpinned)):
        return rng.uniform(-2.5, 1.0, fam.n_params)
    return rng.normal(size=fam.n_params)


@pytest.mark.parametrize("fam", all_families(), ids=lambda f: f.name)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_finite_differences(fam, seed):
    rng = np.random.default_rng(seed)
    rep = vm.grad_check(vm.ValueModel(fam, _theta_for(fam, rng)), probes=8, seed=seed)
    assert rep.passed, rep


@pytest.mark.parametrize("fam", [f for f in all_families() if f.terminal_pinned], ids=lambda f: f.name)
@given(seed=st.integers(0, 10_000))
def test_terminal_pinned(fam, seed):
    rng = np.random.default_rng(seed)
    th = _theta_for(fam, rng)
    x = rng.uniform(0.2, 2.0, (16, 1))
    np.testing.assert_allclose(fam.value(th, fam.terminal_time, x), fam.terminal(x), atol=1e-12)


@pytest.mark.parametrize("fam", [vm.ExpPinned(), vm.ExpUnpinned()], ids=lambda f: f.name)
def test_hessian_matches_gradient_differences(fam):
    rng = np.random.default_rng(0)
    t, x = rng.uniform(0, 1, 10), rng.normal(size=(10, 1))
    th = np.array([-1.3])
    h = 1e-6
    fd = (fam.grad(th + h, t, x) - fam.grad(th - h, t, x))[..., 0] / (2 * h)
    np.testing.assert_allclose(fam.hess(th, t, x)[..., 0, 0], fd, rtol=1e-6, atol=1e-8)


def test_batched_theta_broadcasts():
    fam = vm.QuadTriple()
    th = np.random.default_rng(1).normal(size=(5, 3))
    t, x = GRID.points, np.random.default_rng(2).normal(size=(5, 21, 1))
    v = fam.value(th[:, None, :], t, x)
    for k in range(5):
        np.testing.assert_allclose(v[k], fam.value(th[k], t, x[k]))


@pytest.mark.parametrize("fam", [vm.QuadTriple(), vm.PayoffResidualMLP(1.0, 1.0, (8, 6))], ids=lambda f: f.name)
def test_vjp_matches_gradient_contraction(fam):
    rng = np.random.default_rng(3)
    th = _theta_for(fam, rng)
    t, x = GRID.points[:-1], rng.uniform(0.5, 1.5, (4, 20, 1))
    cot = rng.normal(size=(4, 20))
    ref = np.einsum("nk,nkl->l", cot, fam.grad(th, t, x))
    np.testing.assert_allclose(fam.vjp(th, t, x, cot), ref, rtol=1e-10, atol=1e-12)
    v, d = fam.value_and_vjp(th, t, x, lambda J: cot * J)
    np.testing.assert_allclose(d, np.einsum("nk,nkl->l", cot * v, fam.grad(th, t, x)), rtol=1e-10, atol=1e-12)


def test_mlp_dx_matches_differences():
    fam = vm.PayoffResidualMLP(1.0, 1.0, (8, 6))
    th = fam.init_params(4)
    t, x = np.array([0.2, 0.5]), np.array([[0.7], [1.3]])
    h = 1e-6
    fd = (fam.value(th, t, x + h) - fam.value(th, t, x - h)) / (2 * h)
    np.testing.assert_allclose(fam.dx(th, t, x), fd, rtol=1e-6)


def test_sectional_ones_equals_affine_zero():
    sec, aff = vm.Sectional(GRID), vm.AffineTimeScaled()
    x = np.random.default_rng(5).normal(size=(21, 1))
    np.testing.assert_allclose(sec.value(np.ones(GRID.K), GRID.points, x), aff.value(np.zeros(1), GRID.points, x))


def test_sectional_default_theta_is_time_points():
    np.testing.assert_allclose(vm.Sectional(GRID).default_theta(), GRID.points[:-1])


def test_exponential_guard():
    with pytest.raises(vm.ValueOverflowError) as e:
        vm.ExpPinned().value(np.array([40.0]), 0.0, np.array([[20.0]]))
    assert e.value.mask.any()


def test_value_model_validation():
    with pytest.raises(ValueError):
        vm.ValueModel(vm.QuadTriple(), np.zeros(2))
    with pytest.raises(ValueError):
        vm.ValueModel(vm.Cubic(), np.array([np.nan]))


def test_m_increment_matches_batch(bm_batch):
    fam = vm.QuadTriple()
    th = np.array([0.3, -0.2, 0.5])
    model = vm.ValueModel(fam, th)
    inc = vm.batch_increments(fam, th, bm_batch, rho=0.4)
    tr = bm_batch.trajectory(3)
    for i in (0, 17, 99):
        mi = vm.m_increment(model, tr, i, rho=0.4)
        assert mi.dm == pytest.approx(inc.dm[3, i], abs=1e-13)
        np.testing.assert_allclose(mi.grad_dm, inc.grad_dm[3, i], atol=1e-13)
    with pytest.raises(IndexError):
        vm.m_increment(model, tr, 100)


def test_family_from_config():
    assert isinstance(vm.family_from_config({"family": "cubic"}), vm.Cubic)
    assert vm.family_from_config({"family": "lq_offset", "rho": 1.5}).n_params == 1
    assert vm.family_from_config({"family": "sectional"}, GRID).n_params == GRID.K
    with pytest.raises(ValueError):
        vm.family_from_config({"family": "sectional"})
    with pytest.raises(ValueError):
        vm.family_from_config({"family": "spline"})
