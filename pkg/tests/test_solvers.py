import numpy as np
import pytest
from hypothesis import given, strategies as st

from martingale_pe import diffusion_env as de
from martingale_pe import moment_conditions as mc
from martingale_pe import objectives as ob
from martingale_pe import oracles
from martingale_pe import solvers as sv
from martingale_pe import value_models as vm

GRID = de.TimeGrid(0.0, 1.0, 100)
EX2 = de.brownian(sigma=1.0, running_reward=lambda t, x: -np.ones(np.shape(x)[:-1]), terminal_reward=lambda x: x[..., 0] ** 2)
TRACE = {"kind": "eligibility_trace", "lam": 0.5}


def test_schedule():
    s = sv.LearningSchedule(0.1, 0.5)
    assert s.alpha(1) == 0.1 and s.alpha(4) == pytest.approx(0.05)
    assert s.alpha_u(1) == pytest.approx(1.0) and s.u_exponent == 0.5
    assert sv.LearningSchedule(0.1, 0.5, 0.3, 0.2).alpha_u(2) == pytest.approx(0.3 * 2**-0.2)
    with pytest.raises(sv.ConfigurationError):
        sv.LearningSchedule(0.0)


def test_config_validation():
    with pytest.raises(sv.ConfigurationError):
        sv.SolverConfig("ml", mode="online")
    with pytest.raises(sv.ConfigurationError):
        sv.SolverConfig("sectional_ctd0")
    with pytest.raises(sv.ConfigurationError):
        sv.SolverConfig("cgtd", variant="tdc", test="constant")
    with pytest.raises(sv.ConfigurationError):
        sv.SolverConfig("ctd", mode="online", batch_size=4)
    with pytest.raises(sv.ConfigurationError):
        sv.SolverConfig("ctd", test="constant").check_family(vm.QuadTriple())
    with pytest.raises(sv.ConfigurationError):
        sv.SolverConfig("sectional_ctd0", mode="online").check_family(vm.AffineTimeScaled())
    with pytest.raises(sv.ConfigurationError):
        sv.run(vm.LQQuadratic(), EX2, {"algorithm": "clstd"}, sv.LearningSchedule(0.1), 1, 0)


@pytest.mark.parametrize("cfg", [
    sv.SolverConfig("residual_gradient", mode="online"),
    sv.SolverConfig("ctd", mode="online"),
    sv.SolverConfig("ctd", mode="online", test=TRACE),
    sv.SolverConfig("cgtd", mode="online", variant="gtd2", rho=0.3),
    sv.SolverConfig("cgtd", mode="online", variant="tdc"),
    sv.SolverConfig("cgtd", mode="online", variant="gtd0"),
], ids=lambda c: f"{c.algorithm}-{c.variant}-{c.test.kind if c.test else ''}")
def test_compiled_kernel_matches_python(cfg):
    sch = sv.LearningSchedule(0.01, 0.5)
    a = sv.run(vm.QuadTriple(), EX2, cfg, sch, 8, 3, GRID, repetitions=3, theta0=[-1.0, -1.0, -1.0])
    b = sv.run(vm.QuadTriple(), EX2, cfg, sch, 8, 3, GRID, repetitions=3, theta0=[-1.0, -1.0, -1.0], compiled=False)
    np.testing.assert_allclose(a.iterates, b.iterates, rtol=0, atol=1e-12)


@pytest.mark.parametrize("fam,test,variant", [
    (vm.ExpUnpinned(), "constant", "gtd2"),
    (vm.ExpPinned(), "grad_theta", "gtd2"),
    (vm.ExpPinned(), "grad_theta", "tdc"),
    (vm.ExpPinned(), TRACE, "gtd0"),
])
def test_offline_cgtd_is_sum_of_frozen_online_steps(fam, test, variant):
    b = de.sample_batch(de.brownian(), de.TimeGrid(0, 1, 50), 3, 1)
    cfg = sv.SolverConfig("cgtd", test=test, variant=variant, rho=0.2)
    th, u = np.full((3, 1), -0.7), np.full((3, 1), 0.3)
    dth, du = sv._cgtd_episode_direction(cfg, fam, th, u, b)
    ocfg = sv.SolverConfig("cgtd", mode="online", test=test, variant=variant, rho=0.2)
    ts, js = ocfg.test.start((3,), 1), None
    sth, su = np.zeros((3, 1)), np.zeros((3, 1))
    for i in range(50):
        th2, u2, ts, js = sv._online_step(ocfg, fam, ocfg.test, th, u, ts, js, b.times[i], b.times[i + 1],
                                          b.states[:, i], b.states[:, i + 1], b.rewards[:, i], b.dt, 1.0, 1.0)
        sth += th2 - th
        su += u2 - u
    np.testing.assert_allclose(sth, dth, atol=1e-13)
    np.testing.assert_allclose(su, du, atol=1e-13)


def test_tdc_is_dt_times_gtd2_at_projected_u():
    """With u = Gram^-1 g the summed TDC step equals dt times the summed GTD2 step."""
    b = de.sample_batch(EX2, GRID, 400, 5)
    fam = vm.QuadTriple()
    th = np.array([0.3, -0.4, 0.2])
    model = vm.ValueModel(fam, th)
    g = mc.moment_estimate(model, b, mc.GradTheta()).g
    G = ob.gram_matrix(model, b, mc.GradTheta())
    u = np.linalg.solve(G, g)
    thb, ub = np.repeat(th[None], len(b), 0), np.repeat(u[None], len(b), 0)
    d2, _ = sv._cgtd_episode_direction(sv.SolverConfig("cgtd", variant="gtd2"), fam, thb, ub, b)
    dt_, _ = sv._cgtd_episode_direction(sv.SolverConfig("cgtd", variant="tdc"), fam, thb, ub, b)
    np.testing.assert_allclose(dt_.mean(0), b.dt * d2.mean(0), rtol=1e-8, atol=1e-12)


def test_ml_direction_is_minus_loss_gradient():
    b = de.sample_batch(EX2, GRID, 50, 2)
    fam = vm.QuadTriple()
    th = np.array([0.2, 0.1, -0.3])
    d = sv._episode_direction(sv.SolverConfig("ml", rho=0.4), fam, th, b) / len(b)
    h = 1e-6
    for j in range(3):
        e = np.eye(3)[j] * h
        fd = (ob.martingale_loss(vm.ValueModel(fam, th + e), b, 0.4).value
              - ob.martingale_loss(vm.ValueModel(fam, th - e), b, 0.4).value) / (2 * h)
        assert d[j] == pytest.approx(-fd, rel=1e-6, abs=1e-9)


def test_residual_gradient_direction_is_minus_mstde_gradient():
    b = de.sample_batch(EX2, GRID, 50, 2)
    fam = vm.QuadTriple()
    th = np.array([0.2, 0.1, -0.3])
    d = sv._episode_direction(sv.SolverConfig("residual_gradient"), fam, th, b) / len(b)
    h = 1e-6
    for j in range(3):
        e = np.eye(3)[j] * h
        fd = (ob.mstde(vm.ValueModel(fam, th + e), b).value - ob.mstde(vm.ValueModel(fam, th - e), b).value) / (2 * h)
        assert d[j] == pytest.approx(-fd, rel=1e-6)


def test_clstd_root_identity():
    b = de.sample_batch(EX2, GRID, 300, 7)
    fam = vm.LinearBasis(lambda t, x: vm.QuadTriple().grad(np.zeros(3), t, x), 3,
                         offset=lambda t, x: vm.QuadTriple().offset_values(t, x))
    th = sv.clstd_solve(fam, b, rho=0.3)
    g = mc.moment_estimate(vm.ValueModel(fam, th), b, mc.GradTheta(), rho=0.3).g
    assert np.max(np.abs(g)) <= 1e-10


def test_clstd_singular_system():
    fam = vm.LinearBasis(lambda t, x: np.stack([np.ones(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))] * 2, -1), 2)
    with pytest.raises(sv.SingularSystemError):
        sv.clstd_solve(fam, de.sample_batch(EX2, GRID, 5, 0))


def test_episodes_zero_returns_initial_point():
    r = sv.run(vm.AffineTimeScaled(), de.brownian(), {"algorithm": "ctd"}, sv.LearningSchedule(0.1), 0, 1, GRID, repetitions=2, theta0=[-0.3])
    assert r.iterates.shape == (1, 2, 1)
    np.testing.assert_array_equal(r.final, -0.3)


@pytest.mark.parametrize("alg", ["ml", "ctd", "residual_gradient"])
def test_run_is_deterministic(alg):
    kw = dict(grid=GRID, repetitions=3, theta0=[-1.0], record_every=5)
    a = sv.run(vm.AffineTimeScaled(), de.brownian(), {"algorithm": alg}, sv.LearningSchedule(0.05), 20, 11, **kw)
    b = sv.run(vm.AffineTimeScaled(), de.brownian(), {"algorithm": alg}, sv.LearningSchedule(0.05), 20, 11, **kw)
    np.testing.assert_array_equal(a.iterates, b.iterates)


def test_same_seed_same_paths_across_algorithms():
    """ML and CTD(1) share paths; on a terminal-pinned family their episode updates coincide
    (the trace carries the dt factor, so the step sizes match)."""
    kw = dict(grid=GRID, repetitions=2, theta0=[-1.0], record_every=10)
    ml = sv.run(vm.AffineTimeScaled(), de.brownian(), {"algorithm": "ml"}, sv.LearningSchedule(0.5), 30, 4, **kw)
    ctd1 = sv.run(vm.AffineTimeScaled(), de.brownian(), {"algorithm": "ctd", "test": {"kind": "eligibility_trace", "lam": 1.0}},
                  sv.LearningSchedule(0.5), 30, 4, **kw)
    np.testing.assert_allclose(ml.iterates, ctd1.iterates, rtol=1e-9)


def test_divergence_guard():
    r = sv.run(vm.ExpUnpinned(), de.brownian(), {"algorithm": "ctd", "test": "constant"}, sv.LearningSchedule(5.0), 300, 2,
               GRID, repetitions=4, theta0=[0.0])
    assert r.verdict == "diverged"
    assert np.all(r.diverged_at >= 1)


def test_converged_verdict():
    r = sv.run(vm.AffineTimeScaled(), de.brownian(), {"algorithm": "ctd", "converge_tol": 0.05}, sv.LearningSchedule(0.05),
               400, 2, GRID, repetitions=5, theta0=[-1.0], record_every=20)
    assert r.verdict == "converged"
    assert sv.episodes_to_threshold(r, [0.0], 0.2) > 0


def test_to_csv(tmp_path):
    r = sv.run(vm.QuadTriple(), EX2, {"algorithm": "ctd"}, sv.LearningSchedule(0.01), 4, 1, GRID, repetitions=2, label="x")
    r.to_csv(tmp_path / "it.csv")
    lines = (tmp_path / "it.csv").read_text().splitlines()
    assert lines[0] == "algorithm,episode,repetition,theta0,theta1,theta2"
    assert len(lines) == 1 + 5 * 2


def test_ctd_lambda_step_by_hand(bm_batch):
    model = vm.ValueModel(vm.QuadTriple(), np.array([0.2, -0.1, 0.3]))
    tr = bm_batch.trajectory(0)
    th, st = sv.ctd_lambda_step(model, tr, 5, mc.GradTheta(), 0.1)
    inc = vm.m_increment(model, tr, 5)
    np.testing.assert_allclose(th, model.params + 0.1 * model.grad_theta(tr.times[5], tr.states[5]) * inc.dm, atol=1e-15)
    with pytest.raises(IndexError):
        sv.ctd_lambda_step(model, tr, 100, mc.GradTheta(), 0.1)


def test_cgtd_step_by_hand(bm_batch):
    model = vm.ValueModel(vm.QuadTriple(), np.array([0.2, -0.1, 0.3]))
    tr = bm_batch.trajectory(1)
    u = np.array([0.5, -0.2, 0.1])
    th, u2, _ = sv.cgtd_step(model, tr, 3, "gtd2", 0.1, 0.2, u)
    inc = vm.m_increment(model, tr, 3)
    xi = model.grad_theta(tr.times[3], tr.states[3])
    dt = tr.grid.dt
    np.testing.assert_allclose(th, model.params - 0.1 * inc.grad_dm * (xi @ u), atol=1e-15)
    np.testing.assert_allclose(u2, u + 0.2 * (xi * inc.dm - xi * (xi @ u) * dt), atol=1e-15)


def test_sectional_step_two_slices():
    g = de.TimeGrid(0.0, 1.0, 2)
    fam = vm.Sectional(g)
    model = vm.ValueModel(fam, np.array([0.4, 0.7]))
    tr = de.Trajectory(g, np.array([[0.0], [0.5], [1.2]]), np.zeros(2), 1.2, 0)
    # step 0 -> 1: x_0 = 0, nothing moves
    np.testing.assert_allclose(sv.sectional_ctd0_step(model, tr, 1, 0.1), [0.4, 0.7])
    # step 1 -> 2: delta = 1 * 1.2 - 0.7 * 0.5 = 0.85; only theta_1 (k >= 1) moves, by 0.1 * 0.5 * 0.85
    np.testing.assert_allclose(sv.sectional_ctd0_step(model, tr, 2, 0.1), [0.4, 0.7 + 0.1 * 0.5 * 0.85])
    model = vm.ValueModel(fam, np.array([0.4, 0.7]))
    tr = de.Trajectory(g, np.array([[1.0], [0.5], [1.2]]), np.zeros(2), 1.2, 0)
    # step 0 -> 1: delta = 0.7 * 0.5 - 0.4 * 1 = -0.05; theta_0 and theta_1 both move by 0.1 * 1 * -0.05
    np.testing.assert_allclose(sv.sectional_ctd0_step(model, tr, 1, 0.1), [0.395, 0.695])
    with pytest.raises(IndexError):
        sv.sectional_ctd0_step(model, tr, 0, 0.1)


def test_single_trajectory_blocks():
    m = de.brownian(sigma=1.0, horizon=None, running_reward=lambda t, x: 0.5 * x[..., 0] ** 2, discount_rate=1.5)
    g = de.TimeGrid(0.0, 2.0, 200)
    r = sv.run_single_trajectory(vm.LinearBasis.lq_offset(1.5), m, g, {"algorithm": "ctd", "mode": "online", "rho": 1.5},
                                 sv.LearningSchedule(0.1), 3, repetitions=2, theta0=[1.0], block_steps=10)
    assert r.iterates.shape == (21, 2, 1)
    with pytest.raises(sv.ConfigurationError):
        sv.run_single_trajectory(vm.LinearBasis.lq_offset(1.5), m, g, {"algorithm": "ctd", "mode": "online"},
                                 sv.LearningSchedule(0.1), 3, block_steps=7)


def test_linear_stream_matches_single_trajectory():
    s = oracles.lq_setting()
    m = de.ou(s["a"], s["b"], s["sigma"], x0=0.0, horizon=None,
              running_reward=lambda t, x: 0.5 * x[..., 0] ** 2 + x[..., 0], discount_rate=s["rho"])
    g = de.TimeGrid(0.0, 20.0, 2000)
    cfg = sv.SolverConfig("ctd", mode="online", rho=s["rho"])
    sch = sv.LearningSchedule(0.3, 0.5)
    fast = sv.run_linear_stream(vm.LQQuadratic(), m, g, {"ctd": (cfg, sch)}, seed=5, repetitions=2, chunk_steps=500)["ctd"]
    slow = sv.run_single_trajectory(vm.LQQuadratic(), m, g, cfg, sch, 5, repetitions=2)
    np.testing.assert_allclose(fast.iterates, slow.iterates, atol=1e-11)


def test_linear_stream_clstd_matches_direct_solve():
    s = oracles.lq_setting()
    m = de.ou(s["a"], s["b"], s["sigma"], x0=0.0, horizon=None,
              running_reward=lambda t, x: 0.5 * x[..., 0] ** 2 + x[..., 0], discount_rate=s["rho"])
    g = de.TimeGrid(0.0, 20.0, 2000)
    cfg = sv.SolverConfig("clstd", mode="online", rho=s["rho"])
    run = sv.run_linear_stream(vm.LQQuadratic(), m, g, {"c": (cfg, sv.LearningSchedule(1.0))}, seed=5, chunk_steps=500)["c"]
    path = sv._sample_full(m, g, 5)
    np.testing.assert_allclose(run.final[0], sv.clstd_solve(vm.LQQuadratic(), path, s["rho"]), rtol=1e-8)


@given(st.floats(0.01, 2.0), st.floats(0.0, 1.0))
def test_schedule_monotone(a0, p):
    s = sv.LearningSchedule(a0, p)
    k = np.arange(1, 50)
    assert np.all(np.diff(s.alpha(k)) <= 0)
