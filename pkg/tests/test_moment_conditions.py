import numpy as np
import pytest
from hypothesis import given, strategies as st

from martingale_pe import diffusion_env as de
from martingale_pe import moment_conditions as mc
from martingale_pe import oracles
from martingale_pe import value_models as vm


def _zero_moment(model, batch, test, rho=0.0):
    est = mc.moment_estimate(model, batch, test, rho)
    assert np.all(np.abs(est.g) <= 3 * est.std_error), (est.g, est.std_error)


@pytest.fixture(scope="module")
def bm_big():
    return de.sample_batch(de.brownian(sigma=1.0, x0=0.0, horizon=1.0), de.TimeGrid(0, 1, 100), 10_000, 17)


@pytest.mark.parametrize("test", [mc.GradTheta(), mc.EligibilityTrace(1.0), mc.Constant(1.0), mc.TailoredReciprocal()],
                         ids=lambda t: t.kind)
def test_zero_moment_brownian_affine(bm_big, test):
    _zero_moment(vm.ValueModel(vm.AffineTimeScaled(), np.zeros(1)), bm_big, test)


def test_zero_moment_brownian_quadratic():
    m = de.brownian(sigma=1.0, horizon=1.0, running_reward=lambda t, x: -np.ones(np.shape(x)[:-1]),
                    terminal_reward=lambda x: x[..., 0] ** 2)
    b = de.sample_batch(m, de.TimeGrid(0, 1, 100), 10_000, 3)
    _zero_moment(vm.ValueModel(vm.QuadTriple(), np.zeros(3)), b, mc.GradTheta())


def test_zero_moment_ou_lq():
    s = oracles.lq_setting()
    m = de.ou(s["a"], s["b"], s["sigma"], x0=1.0, horizon=None,
              running_reward=lambda t, x: 0.5 * x[..., 0] ** 2 + s["q"] * x[..., 0], discount_rate=s["rho"])
    b = de.sample_batch(m, de.TimeGrid(0, 5, 500), 5000, 4)
    th = np.array(oracles.lq_coefficients(**s))
    _zero_moment(vm.ValueModel(vm.LQQuadratic(), th), b, mc.GradTheta(), rho=s["rho"])


def test_zero_moment_brownian_lq():
    s = oracles.bm_lq_setting()
    m = de.brownian(sigma=1.0, horizon=None, running_reward=lambda t, x: 0.5 * x[..., 0] ** 2, discount_rate=s["rho"])
    b = de.sample_batch(m, de.TimeGrid(0, 5, 500), 5000, 5)
    fam = vm.LinearBasis.lq_offset(s["rho"])
    th = np.array([oracles.lq_coefficients(**s)[2]])
    for test in (mc.Constant(1.0), mc.TailoredReciprocal()):
        _zero_moment(vm.ValueModel(fam, th), b, test, rho=s["rho"])


def test_zero_moment_gbm_call():
    o = oracles.option_setting()
    m = de.gbm(o["r"], o["sigma"], x0=o["x0"], horizon=o["T"],
               terminal_reward=lambda x: np.maximum(x[..., 0] - o["K"], 0.0), discount_rate=o["r"])
    price = lambda t, x: oracles.black_scholes(np.minimum(t, o["T"] - 1e-12), x[..., 0], o["K"], o["T"], o["r"], o["q"], o["sigma"])[0]
    fam = vm.LinearBasis(lambda t, x: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]) + (1,)), 1,
                         offset=lambda t, x: np.where(np.asarray(t) >= o["T"], np.maximum(x[..., 0] - o["K"], 0.0), price(t, x)))
    b = de.sample_batch(m, de.TimeGrid(0, 1, 100), 10_000, 6)
    for test in (mc.Constant(1.0), mc.TailoredReciprocal()):
        _zero_moment(vm.ValueModel(fam, np.zeros(1)), b, test, rho=o["r"])


def test_constant_zero_gives_zero(bm_batch):
    est = mc.moment_estimate(vm.ValueModel(vm.Cubic(), np.array([0.3])), bm_batch, mc.Constant(0.0))
    np.testing.assert_array_equal(est.g, 0.0)


def test_cubic_moment_root_is_zero(bm_batch):
    fam = vm.Cubic()
    for test in (mc.GradTheta(), mc.Constant(1.0), mc.TailoredReciprocal()):
        g = lambda th: mc.moment_estimate(vm.ValueModel(fam, [th]), bm_batch, test).g[0]
        assert g(0.0) == pytest.approx(0.0, abs=1e-3)
    # the grad-theta moment is affine in theta with a nonzero slope, so 0 is the only root
    g = lambda th: mc.moment_estimate(vm.ValueModel(fam, [th]), bm_batch, mc.GradTheta()).g[0]
    slope = g(1.0) - g(0.0)
    assert abs(slope) > 1.0
    assert -g(0.0) / slope == pytest.approx(0.0, abs=1e-3)


def _one_traj():
    g = de.TimeGrid(0.0, 1.0, 2)
    return de.Trajectory(g, np.array([[0.0], [0.0], [0.0]]), np.array([0.3 / 0.5, 0.0]), 0.0, 0)


def test_residual_step_examples():
    tr = _one_traj()
    model = vm.ValueModel(vm.Cubic(), np.array([0.0]))
    # J = 0 and x = 0, so dm_0 = r_0 dt = 0.3
    assert mc.moment_residual_step(model, tr, 0, mc.Constant(1.0))[0] == pytest.approx(0.3)
    assert mc.moment_residual_step(model, tr, 0, mc.TailoredReciprocal())[0] == pytest.approx(0.3)


def test_trace_recursion_by_hand():
    tr = mc.EligibilityTrace(1.0)
    s = tr.start((), 2)
    xi0, s = tr.step(s, np.ones(2), None, 0.5)
    xi1, s = tr.step(s, np.ones(2), None, 0.5)
    np.testing.assert_allclose(xi0, 0.5)
    np.testing.assert_allclose(xi1, 1.0)


def test_trace_path_matches_recursion():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(3, 50, 2))
    for lam, conv in [(0.3, "continuous"), (0.3, "discrete"), (1.0, "continuous"), (0.0, "continuous")]:
        tr = mc.EligibilityTrace(lam, conv)
        path = tr.path(grads, None, 0.1)
        s = tr.start((3,), 2)
        for i in range(50):
            xi, s = tr.step(s, grads[:, i], None, 0.1)
            np.testing.assert_allclose(path[:, i], xi, atol=1e-13)


def test_lambda_zero_is_scaled_ctd0(bm_batch):
    model = vm.ValueModel(vm.QuadTriple(), np.array([0.3, 0.1, -0.2]))
    a = mc.moment_estimate(model, bm_batch, mc.EligibilityTrace(0.0)).g
    b = mc.moment_estimate(model, bm_batch, mc.GradTheta()).g
    np.testing.assert_allclose(a, bm_batch.dt * b, rtol=1e-12)


def test_residual_steps_sum_to_contribution(bm_batch):
    model = vm.ValueModel(vm.ExpPinned(), np.array([-1.2]))
    test = mc.EligibilityTrace(0.5)
    c = mc.moment_contributions(model.family, model.params, bm_batch, test)
    tr = bm_batch.trajectory(11)
    total = sum(mc.moment_residual_step(model, tr, i, test) for i in range(tr.grid.K))
    np.testing.assert_allclose(total, c[11], rtol=1e-10)


def test_linear_moment_is_affine(bm_batch):
    fam = vm.QuadTriple()
    g = lambda th: mc.moment_estimate(vm.ValueModel(fam, th), bm_batch, mc.GradTheta()).g
    c = g(np.zeros(3))
    B = np.stack([g(np.eye(3)[j]) - c for j in range(3)], axis=1)
    th = np.array([0.7, -1.1, 0.4])
    np.testing.assert_allclose(g(th), B @ th + c, rtol=1e-9, atol=1e-12)


@given(st.integers(1, 30))
def test_moment_additive_over_sub_batches(split):
    b = de.sample_batch(de.brownian(), de.TimeGrid(0, 1, 10), 31, 2)
    model = vm.ValueModel(vm.AffineTimeScaled(), np.array([-0.5]))
    full = mc.moment_estimate(model, b, mc.GradTheta()).g
    a = mc.moment_estimate(model, b.take(np.arange(split)), mc.GradTheta()).g
    c = mc.moment_estimate(model, b.take(np.arange(split, 31)), mc.GradTheta()).g
    np.testing.assert_allclose((split * a + (31 - split) * c) / 31, full, rtol=1e-10, atol=1e-14)


def test_make_test_function():
    assert isinstance(mc.make_test_function("grad_theta"), mc.GradTheta)
    assert mc.make_test_function({"kind": "composite", "parts": ["constant", "tailored_reciprocal"]}).dim(3) == 2
    with pytest.raises(ValueError):
        mc.make_test_function("wavelet")
    with pytest.raises(ValueError):
        mc.EligibilityTrace(1.5)
