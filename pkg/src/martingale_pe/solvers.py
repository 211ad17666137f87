"""Parameter-update algorithms, schedules and the episode loop.

All loops are vectorized over independent repetitions: theta has shape (R, L)
and each episode draws R trajectories, trajectory r feeding repetition r.
A repetition that diverges is frozen (its iterates become NaN) while the
others keep going.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import _kernels
from .diffusion_env import DiffusionModel, EpisodeBatch, TimeGrid, Trajectory, sample_batch, stream_trajectory
from .moment_conditions import EligibilityTrace, GradTheta, TestFunction, make_test_function, xi_path
from .value_models import LinearBasis, Sectional, ValueFamily, ValueModel, ValueOverflowError, batch_increments

log = logging.getLogger(__name__)

ALGORITHMS = ("residual_gradient", "ml", "ctd", "clstd", "cgtd", "sectional_ctd0")
VERDICTS = ("converged", "max_episodes", "diverged")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LearningSchedule:
    alpha0: float
    decay_exponent: float = 0.0
    alpha_u0: float | None = None
    decay_exponent_u: float | None = None

    def __post_init__(self):
        if not self.alpha0 > 0 or self.decay_exponent < 0:
            raise ConfigurationError("need alpha0 > 0 and a nonnegative decay exponent")
        if self.alpha_u0 is not None and not self.alpha_u0 > 0:
            raise ConfigurationError("alpha_u0 must be positive")

    def alpha(self, k):
        """Step size for (1-based) episode k."""
        return self.alpha0 * np.asarray(k, dtype=float) ** (-self.decay_exponent)

    @property
    def u_rate(self) -> float:
        return self.alpha_u0 if self.alpha_u0 is not None else 10.0 * self.alpha0

    @property
    def u_exponent(self) -> float:
        return self.decay_exponent_u if self.decay_exponent_u is not None else self.decay_exponent

    def alpha_u(self, k):
        return self.u_rate * np.asarray(k, dtype=float) ** (-self.u_exponent)


@dataclass
class SolverConfig:
    algorithm: str
    mode: str = "offline"
    test: Any = None
    variant: str = "gtd2"
    rho: float = 0.0
    theta_bound: float = 1e6
    batch_size: int = 1
    converge_tol: float | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.mode not in ("offline", "online"):
            raise ConfigurationError("mode is 'offline' or 'online'")
        if self.algorithm == "ml" and self.mode != "offline":
            raise ConfigurationError("the martingale-loss update needs whole episodes (offline only)")
        if self.algorithm == "sectional_ctd0" and self.mode != "online":
            raise ConfigurationError(f"{self.algorithm} is an online method")
        if self.variant not in ("gtd0", "gtd2", "tdc"):
            raise ConfigurationError(f"unknown cgtd variant {self.variant!r}")
        if isinstance(self.test, (str, dict)):
            self.test = make_test_function(self.test)
        if self.test is None and self.algorithm in ("ctd", "cgtd"):
            self.test = GradTheta()
        if self.algorithm == "cgtd" and self.variant == "tdc" and not isinstance(self.test, GradTheta):
            raise ConfigurationError("TDC rewrites the update through xi = dJ/dtheta; use the grad_theta test")
        if (self.mode == "online" or self.algorithm == "cgtd") and self.batch_size != 1:
            raise ConfigurationError("online and two-timescale updates consume one trajectory per repetition")

    def check_family(self, family: ValueFamily):
        if self.algorithm == "ctd" and self.test.dim(family.n_params) != family.n_params:
            raise ConfigurationError("CTD adds xi * dm to theta, so xi must have the dimension of theta")
        if self.algorithm == "clstd" and not isinstance(family, LinearBasis):
            raise ConfigurationError("CLSTD needs a linear-in-theta family")
        if self.algorithm == "sectional_ctd0" and not isinstance(family, Sectional):
            raise ConfigurationError("the sectional rule needs the sectional family")
        if isinstance(family, Sectional) and self.algorithm != "sectional_ctd0" and self.mode == "online":
            raise ConfigurationError("online training of the sectional family uses sectional_ctd0")
        if self.algorithm in ("cgtd",) and family.n_params and not getattr(family, "batched_theta", True):
            raise ConfigurationError("cgtd is not implemented for unbatched families")


@dataclass
class SolverRun:
    algorithm: str
    schedule: LearningSchedule
    mode: str
    iterates: np.ndarray  # (n_records, R, L)
    episodes: np.ndarray  # (n_records,) episode index of each record
    diverged_at: np.ndarray  # (R,) episode of divergence, -1 if none
    aux_state: np.ndarray | None = None
    wall_clock: float = 0.0
    converge_tol: float | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def repetitions(self) -> int:
        return self.iterates.shape[1]

    @property
    def verdicts(self) -> list[str]:
        base = "converged" if self._window_ok() else "max_episodes"
        return ["diverged" if d >= 0 else base for d in self.diverged_at]

    @property
    def verdict(self) -> str:
        if np.any(self.diverged_at >= 0):
            return "diverged"
        return "converged" if self._window_ok() else "max_episodes"

    def _window_ok(self) -> bool:
        if self.converge_tol is None or len(self.episodes) < 10:
            return False
        n = max(2, len(self.episodes) // 10)
        win = self.mean_band()[0][-n:]
        return bool(np.all(np.nanstd(win, axis=0) < self.converge_tol))

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def mean_band(self):
        """Per-record mean and standard deviation over repetitions that did not diverge."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.iterates, axis=1), np.nanstd(self.iterates, axis=1)

    def to_csv(self, path, every: int = 1, append: bool = False, label: str | None = None):
        L = self.iterates.shape[2]
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(["algorithm", "episode", "repetition"] + [f"theta{j}" for j in range(L)])
            name = label or self.label or self.algorithm
            for j in range(0, len(self.episodes), every):
                for r in range(self.repetitions):
                    w.writerow([name, int(self.episodes[j]), r] + [repr(float(v)) for v in self.iterates[j, r]])


def episodes_to_threshold(run: SolverRun, target, tol: float) -> int:
    """First recorded episode after which the repetition-mean stays within tol of target."""
    mean, _ = run.mean_band()
    err = np.max(np.abs(mean - np.asarray(target, dtype=float)), axis=1)
    bad = np.nonzero(~(err <= tol))[0]
    if len(bad) == 0:
        return int(run.episodes[0])
    if bad[-1] == len(err) - 1:
        return -1
    return int(run.episodes[bad[-1] + 1])


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Offline directions

def _episode_direction(cfg: SolverConfig, family: ValueFamily, th: np.ndarray, batch: EpisodeBatch) -> np.ndarray:
    """Update direction of each episode, (n, L); (L,) summed when th is one shared vector."""
    shared = th.ndim == 1
    t, dt, rho = batch.times, batch.dt, cfg.rho
    alg = cfg.algorithm
    if alg == "ml":
        G = batch.reward_to_go(rho)
        w = np.exp(-rho * t[:-1]) if rho else None

        def cot(J):
            if w is None:
                return (G - J) * dt
            return (G - w * J) * w * dt

        thb = th if shared else th[:, None, :]
        _, d = family.value_and_vjp(thb, t[:-1], batch.states[:, :-1], cot)
        return d if shared else d[:, 0, :]
    inc = batch_increments(family, th, batch, rho, with_grad=True)
    if alg == "residual_gradient":
        per = -np.einsum("nk,nkl->nl", inc.dm / dt, inc.grad_dm)
    elif alg == "ctd":
        xi = xi_path(family, th, batch, cfg.test, grads=inc.grads)
        per = np.einsum("nkl,nk->nl", xi, inc.dm)
    else:
        raise ConfigurationError(f"{alg} has no offline episode update")
    return per.sum(axis=0) if shared else per


def _cgtd_episode_direction(cfg: SolverConfig, family: ValueFamily, th: np.ndarray, u: np.ndarray, batch: EpisodeBatch):
    """Episode sums of the two-timescale increments at frozen (theta, u): (d_theta, d_u), each (n, .)."""
    t, x, dt, rho = batch.times, batch.states, batch.dt, cfg.rho
    inc = batch_increments(family, th, batch, rho, with_grad=True)
    xi = xi_path(family, th, batch, cfg.test, grads=inc.grads)
    dm = inc.dm
    xu = np.einsum("nkl,nl->nk", xi, u)
    ju = None
    if cfg.test.theta_dependent:
        H = family.hess(th[:, None, :], t[:-1], x[:, :-1])
        Jx = cfg.test.jac_path(np.broadcast_to(H, dm.shape + (family.n_params, family.n_params)), x[:, :-1], dt)
        ju = np.einsum("nkml,nm->nkl", Jx, u)
    if cfg.variant == "tdc":
        f = 1.0 + rho * dt if rho else 1.0
        step = inc.grads[:, 1:] * (xu * dt)[..., None] - f * xi * dm[..., None]
        if ju is not None:
            step = step + dt * (ju * dm[..., None] - (xu * dt)[..., None] * ju)
    else:
        step = inc.grad_dm * xu[..., None]
        if ju is not None:
            step = step + ju * dm[..., None]
            if cfg.variant == "gtd2":
                step = step - (xu * dt)[..., None] * ju
    if cfg.variant == "gtd0":
        du = np.einsum("nkl,nk->nl", xi, dm) - u * dt * dm.shape[1]
    else:
        du = np.einsum("nkl,nk->nl", xi, dm - xu * dt)
    return -step.sum(axis=1), du


def _offline_direction(cfg, family, theta, batch, B):
    R = theta.shape[0]
    if getattr(family, "batched_theta", True):
        th = np.repeat(theta, B, axis=0) if B > 1 else theta
        return _episode_direction(cfg, family, th, batch).reshape(R, B, -1).mean(axis=1)
    out = np.empty_like(theta)
    for r in range(R):
        out[r] = _episode_direction(cfg, family, theta[r], batch.take(np.arange(r * B, (r + 1) * B))) / B
    return out


# --------------------------------------------------------------------------
# Online steps

def _take(obj, keep):
    if obj is None:
        return None
    if isinstance(obj, list):
        return [_take(o, keep) for o in obj]
    return obj[keep]


def _bad_rows(mask, n):
    m = np.asarray(mask)
    if m.ndim == 0:
        return np.full(n, bool(m))
    m = np.broadcast_to(m, (n,) + m.shape[1:]) if m.shape[0] in (1, n) else m
    return m.reshape(n, -1).any(axis=1)


def _online_step(cfg, family, test, theta, u, tstate, jstate, t0, t1, x0, x1, r0, dt, a, au):
    """One online update for all active repetitions. Pure: returns new state."""
    rho = cfg.rho
    alg = cfg.algorithm
    J0 = family.value(theta, t0, x0)
    J1 = family.value(theta, t1, x1)
    dm = J1 - J0 + r0 * dt
    if rho:
        dm = dm - rho * J0 * dt
    if alg == "sectional_ctd0":
        i = family.grid.index_of(t0)
        new = theta.copy()
        new[:, int(i):] += (a * x0[:, 0] * dm)[:, None]
        return new, u, tstate, jstate
    G0 = family.grad(theta, t0, x0)
    if alg == "residual_gradient":
        G1 = family.grad(theta, t1, x1)
        gdm = G1 - G0
        if rho:
            gdm = gdm - rho * G0 * dt
        return theta - (a * dm / dt)[:, None] * gdm, u, tstate, jstate
    xi, tstate_new = test.step(tstate, G0, x0, dt)
    if alg == "ctd":
        return theta + a[..., None] * xi * dm[:, None] if np.ndim(a) else theta + a * xi * dm[:, None], u, tstate_new, jstate
    # two-timescale gradient methods
    xu = np.einsum("rl,rl->r", xi, u)
    ju = None
    if test.theta_dependent:
        H0 = family.hess(theta, t0, x0)
        Jx, jstate = test.jac_step(jstate, H0, x0, dt)
        ju = np.einsum("rkl,rk->rl", Jx, u)
    G1 = family.grad(theta, t1, x1)
    if cfg.variant == "tdc":
        f = 1.0 + rho * dt if rho else 1.0
        d = G1 * (xu * dt)[:, None] - f * xi * dm[:, None]
        if ju is not None:
            d = d + dt * (ju * dm[:, None] - (xu * dt)[:, None] * ju)
    else:
        gdm = G1 - G0
        if rho:
            gdm = gdm - rho * G0 * dt
        d = gdm * xu[:, None]
        if ju is not None:
            d = d + ju * dm[:, None]
            if cfg.variant == "gtd2":
                d = d - (xu * dt)[:, None] * ju
    if cfg.variant == "gtd0":
        u_new = u + au * (xi * dm[:, None] - u * dt)
    else:
        u_new = u + au * (xi * dm[:, None] - xi * (xu * dt)[:, None])
    return theta - a * d, u_new, tstate_new, jstate


def _run_online_path(cfg, family, theta, u, states, rewards, times, dt, alphas, alphas_u, rep_idx, diverged_at, episode_of_step, on_block=None, block_steps=None):
    """Online pass over one path per active repetition.

    ``alphas``/``alphas_u`` give the step size of every step. Repetitions hit by
    the overflow guard are dropped from the pass and flagged in diverged_at.
    Returns the surviving (theta, u, rep_idx).
    """
    test = cfg.test
    R = theta.shape[0]
    L = family.n_params
    tstate = test.start((R,), L) if test is not None else None
    jstate = None
    K = len(times) - 1
    i = 0
    while i < K and len(rep_idx):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                theta_n, u_n, tstate_n, jstate_n = _online_step(
                    cfg, family, test, theta, u, tstate, jstate,
                    times[i], times[i + 1], states[:, i], states[:, i + 1], rewards[:, i], dt, alphas[i], alphas_u[i],
                )
        except ValueOverflowError as exc:
            bad = _bad_rows(exc.mask, len(rep_idx))
            diverged_at[rep_idx[bad]] = episode_of_step(i)
            keep = ~bad
            theta, u, tstate, jstate = theta[keep], _take(u, keep), _take(tstate, keep), _take(jstate, keep)
            states, rewards, rep_idx = states[keep], rewards[keep], rep_idx[keep]
            continue
        theta, u, tstate, jstate = theta_n, u_n, tstate_n, jstate_n
        i += 1
        if on_block is not None and i % block_steps == 0:
            theta, u, states, rewards, rep_idx, keep = on_block(i // block_steps, theta, u, states, rewards, rep_idx)
            if keep is not None:
                tstate, jstate = _take(tstate, keep), _take(jstate, keep)
    return theta, u, rep_idx


def _episode_kernel(cfg: SolverConfig, family: ValueFamily, dt: float):
    """(alg code, xi mode, trace decay) for the compiled episodic path, or None."""
    if cfg.mode != "online" or not family.linear_in_theta or isinstance(family, Sectional):
        return None
    if cfg.algorithm == "residual_gradient":
        return (_kernels.RG, _kernels.XI_GRAD, 0.0)
    test = cfg.test
    if cfg.algorithm == "ctd":
        if isinstance(test, GradTheta):
            return (_kernels.CTD0, _kernels.XI_GRAD, 0.0)
        if isinstance(test, EligibilityTrace):
            return (_kernels.CTD0, _kernels.XI_TRACE, float(test.decay(dt)))
        return None
    if cfg.algorithm == "cgtd" and isinstance(test, GradTheta):
        return (_KERNEL_CODES[("cgtd", cfg.variant)], _kernels.XI_GRAD, 0.0)
    return None


def _guard(theta, bound):
    return ~(np.all(np.isfinite(theta), axis=1) & (np.max(np.abs(theta), axis=1) <= bound))


# --------------------------------------------------------------------------
# Episode loop

def run(
    family: ValueFamily,
    model: DiffusionModel,
    algorithm: SolverConfig | dict,
    schedule: LearningSchedule,
    episodes: int,
    seed: int,
    grid: TimeGrid | None = None,
    repetitions: int = 1,
    theta0=None,
    record_every: int = 1,
    per_trajectory_seeds: bool = False,
    label: str = "",
    compiled: bool = True,
) -> SolverRun:
    """Train ``repetitions`` independent copies of theta for ``episodes`` episodes.

    Episode e (1-based) samples its trajectories with seed episode_seed(seed, e),
    so different algorithms run with the same seed see the same paths. Online
    runs of linear-in-theta families go through a compiled kernel unless
    ``compiled`` is False; both paths give the same iterates up to rounding.
    """
    cfg = algorithm if isinstance(algorithm, SolverConfig) else SolverConfig(**algorithm)
    cfg.check_family(family)
    if cfg.algorithm == "clstd":
        raise ConfigurationError("CLSTD is a direct solve; use clstd_solve or run_single_trajectory")
    if grid is None:
        if model.horizon is None:
            raise ConfigurationError("infinite-horizon models need an explicit grid")
        grid = TimeGrid(0.0, model.horizon, 100)
    if episodes < 0 or repetitions < 1:
        raise ConfigurationError("need episodes >= 0 and repetitions >= 1")
    R, L, B = repetitions, family.n_params, cfg.batch_size
    th0 = family.default_theta() if theta0 is None else np.asarray(theta0, dtype=float)
    theta = np.array(np.broadcast_to(th0, (R, L)), dtype=float)
    needs_u = cfg.algorithm == "cgtd"
    u = np.zeros((R, cfg.test.dim(L))) if needs_u else None
    diverged_at = np.full(R, -1)
    active = np.ones(R, dtype=bool)
    kernel = _episode_kernel(cfg, family, grid.dt) if compiled else None

    records, rec_eps = [theta.copy()], [0]
    start = time.perf_counter()
    for e in range(1, episodes + 1):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        a, au = float(schedule.alpha(e)), float(schedule.alpha_u(e))
        batch = sample_batch(model, grid, R * B, episode_seed(seed, e), per_trajectory_seeds)
        if len(idx) < R:
            batch = batch.take((idx[:, None] * B + np.arange(B)).ravel())
        if cfg.mode == "offline":
            th = theta[idx]
            while True:
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        if needs_u:
                            d, du = _cgtd_episode_direction(cfg, family, th, u[idx], batch)
                        else:
                            d = _offline_direction(cfg, family, th, batch, B)
                    break
                except ValueOverflowError as exc:
                    bad = _bad_rows(exc.mask.reshape(len(batch), -1).any(axis=1).reshape(len(idx), B).any(axis=1), len(idx))
                    diverged_at[idx[bad]] = e
                    active[idx[bad]] = False
                    theta[idx[bad]] = np.nan
                    idx, th = idx[~bad], th[~bad]
                    if len(idx) == 0:
                        break
                    batch = batch.take((np.arange(len(bad))[~bad][:, None] * B + np.arange(B)).ravel())
            if len(idx):
                theta[idx] = th + a * d
                if needs_u:
                    u[idx] = u[idx] + au * du
        elif kernel is not None:
            th, uu = np.ascontiguousarray(theta[idx]), np.ascontiguousarray(u[idx] if needs_u else np.zeros((len(idx), L)))
            phi = np.ascontiguousarray(np.broadcast_to(family.features(batch.times, batch.states), batch.states.shape[:2] + (L,)))
            off = np.ascontiguousarray(np.broadcast_to(family.offset_values(batch.times, batch.states), batch.states.shape[:2]))
            with np.errstate(all="ignore"):
                _kernels.linear_episode(*kernel, th, uu, phi, off, np.ascontiguousarray(batch.rewards), batch.dt, cfg.rho, a, au)
            theta[idx] = th
            if needs_u:
                u[idx] = uu
        else:
            steps = grid.K
            th_new, u_new, kept = _run_online_path(
                cfg, family, theta[idx], u[idx] if needs_u else None,
                batch.states, batch.rewards, batch.times, batch.dt,
                np.full(steps, a), np.full(steps, au), idx.copy(), diverged_at, lambda i, e=e: e,
            )
            lost = np.setdiff1d(idx, kept)
            active[lost] = False
            theta[lost] = np.nan
            theta[kept] = th_new
            if needs_u:
                u[kept] = u_new
        bad = active & _guard(theta, cfg.theta_bound)
        if np.any(bad):
            diverged_at[bad] = e
            active[bad] = False
            theta[bad] = np.nan
        if e % record_every == 0 or e == episodes:
            records.append(theta.copy())
            rec_eps.append(e)
    wall = time.perf_counter() - start
    return SolverRun(cfg.algorithm, schedule, cfg.mode, np.array(records), np.array(rec_eps), diverged_at, u, wall, cfg.converge_tol, label)


# --------------------------------------------------------------------------
# Single long trajectory (infinite horizon)

def run_single_trajectory(
    family: ValueFamily,
    model: DiffusionModel,
    grid: TimeGrid,
    algorithm: SolverConfig | dict,
    schedule: LearningSchedule,
    seed: int,
    repetitions: int = 1,
    theta0=None,
    block_steps: int = 100,
    label: str = "",
) -> SolverRun:
    """Online pass along one path per repetition (path r seeded with seed + r).

    Step sizes are constant inside a pseudo-episode of ``block_steps`` steps and
    decay across them; iterates are recorded at every pseudo-episode end.
    """
    cfg = algorithm if isinstance(algorithm, SolverConfig) else SolverConfig(**algorithm)
    cfg.check_family(family)
    if cfg.mode != "online":
        raise ConfigurationError("single-trajectory runs are online")
    if grid.K % block_steps:
        raise ConfigurationError("the path length must be a whole number of pseudo-episodes")
    R, L = repetitions, family.n_params
    nb = grid.K // block_steps
    th0 = family.default_theta() if theta0 is None else np.asarray(theta0, dtype=float)
    theta = np.array(np.broadcast_to(th0, (R, L)), dtype=float)
    needs_u = cfg.algorithm == "cgtd"
    u = np.zeros((R, cfg.test.dim(L))) if needs_u else None
    out = np.full((nb + 1, R, L), np.nan)
    out[0] = theta
    diverged_at = np.full(R, -1)
    start = time.perf_counter()
    batch = EpisodeBatch.from_trajectories(
        [_sample_full(model, grid, seed + r) for r in range(R)]
    )
    blocks = np.arange(grid.K) // block_steps + 1
    alphas = schedule.alpha(blocks)
    alphas_u = schedule.alpha_u(blocks)

    def on_block(b, th, uu, st, rw, ridx):
        out[b, ridx] = th
        bad = _guard(th, cfg.theta_bound)
        if not np.any(bad):
            return th, uu, st, rw, ridx, None
        diverged_at[ridx[bad]] = b
        keep = ~bad
        return th[keep], _take(uu, keep), st[keep], rw[keep], ridx[keep], keep

    th_new, u_new, kept = _run_online_path(
        cfg, family, theta, u, batch.states, batch.rewards, batch.times, batch.dt,
        alphas, alphas_u, np.arange(R), diverged_at, lambda i: i // block_steps + 1, on_block, block_steps,
    )
    for r in range(R):
        if diverged_at[r] >= 0:
            out[diverged_at[r]:, r] = np.nan
    aux = None
    if needs_u:
        aux = np.full((R, u.shape[1]), np.nan)
        aux[kept] = u_new
    wall = time.perf_counter() - start
    return SolverRun(cfg.algorithm, schedule, "online", out, np.arange(nb + 1), diverged_at, aux, wall, cfg.converge_tol, label)


def _sample_full(model, grid, seed):
    pieces = list(stream_trajectory(model, grid, seed, chunk_steps=grid.K))
    return pieces[0]


_KERNEL_CODES = {("ctd", None): _kernels.CTD0, ("cgtd", "gtd2"): _kernels.GTD2, ("cgtd", "tdc"): _kernels.TDC, ("cgtd", "gtd0"): _kernels.GTD0}


def run_linear_stream(
    family: LinearBasis,
    model: DiffusionModel,
    grid: TimeGrid,
    specs: dict,
    seed: int,
    repetitions: int = 1,
    theta0=None,
    block_steps: int = 100,
    chunk_steps: int = 1_000_000,
) -> dict[str, SolverRun]:
    """Compiled online solvers for a linear family along very long paths.

    ``specs`` maps a label to (SolverConfig, LearningSchedule). Every solver
    sees the same path (seed + r for repetition r); the path is generated in
    chunks so memory stays bounded. Supported: ctd with the grad_theta test,
    cgtd (gtd0, gtd2, tdc) with the grad_theta test, and running clstd.
    """
    if not isinstance(family, LinearBasis):
        raise ConfigurationError("compiled path needs a linear family")
    if grid.K % block_steps:
        raise ConfigurationError("the path length must be a whole number of pseudo-episodes")
    L, R, nb = family.n_params, repetitions, grid.K // block_steps
    th0 = np.zeros(L) if theta0 is None else np.asarray(theta0, dtype=float)
    runs, codes = {}, {}
    for name, (cfg, sched) in specs.items():
        if cfg.algorithm == "clstd":
            codes[name] = None
        else:
            if not isinstance(cfg.test, GradTheta):
                raise ConfigurationError("compiled path supports the grad_theta test only")
            key = (cfg.algorithm, cfg.variant if cfg.algorithm == "cgtd" else None)
            if key not in _KERNEL_CODES:
                raise ConfigurationError(f"no compiled kernel for {key}")
            codes[name] = _KERNEL_CODES[key]
        out = np.full((nb + 1, R, L), np.nan)
        if cfg.algorithm != "clstd":
            out[0] = th0
        runs[name] = SolverRun(cfg.algorithm, sched, "online", out, np.arange(nb + 1), np.full(R, -1), None, 0.0, cfg.converge_tol, name)
    if chunk_steps % block_steps:
        raise ConfigurationError("chunk_steps must be a multiple of block_steps")
    rho = model.discount_rate
    for r in range(R):
        state = {name: (th0.copy(), np.zeros(L), np.zeros((L, L)), np.zeros(L)) for name in specs}
        alive = dict.fromkeys(specs, True)
        step0 = 0
        for piece in stream_trajectory(model, grid, seed + r, chunk_steps):
            phi = np.ascontiguousarray(np.broadcast_to(family.features(piece.times, piece.states), (len(piece.times), L)), dtype=float)
            off = np.ascontiguousarray(np.broadcast_to(family.offset_values(piece.times, piece.states), (len(piece.times),)), dtype=float)
            rew = np.ascontiguousarray(piece.rewards, dtype=float)
            n, b0 = len(rew), step0 // block_steps
            for name, (cfg, sched) in specs.items():
                if not alive[name]:
                    continue
                t0 = time.perf_counter()
                th, u, Bm, c = state[name]
                buf = np.full((n // block_steps, L), np.nan)
                if codes[name] is None:
                    _kernels.clstd_chunk(Bm, c, phi, off, rew, piece.grid.dt, rho, block_steps, buf)
                else:
                    hit = _kernels.linear_online_chunk(
                        codes[name], th, u, phi, off, rew, piece.grid.dt, rho,
                        sched.alpha0, sched.decay_exponent, sched.u_rate, sched.u_exponent,
                        block_steps, step0, buf, cfg.theta_bound,
                    )
                    if hit >= 0:
                        alive[name] = False
                        runs[name].diverged_at[r] = hit // block_steps + 1
                        buf[hit // block_steps - b0 :] = np.nan
                runs[name].iterates[b0 + 1 : b0 + 1 + len(buf), r] = buf
                runs[name].wall_clock += time.perf_counter() - t0
            step0 += n
    return runs


# --------------------------------------------------------------------------
# Direct solve

class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        super().__init__(f"CLSTD matrix is singular (condition estimate {condition:.3e})")
        self.condition = condition


def clstd_matrices(family: LinearBasis, data, rho: float = 0.0):
    """(B, c) with the moment E sum phi_i dm_i = B theta + c on the data."""
    batch = data if isinstance(data, EpisodeBatch) else EpisodeBatch.from_trajectories([data])
    t, x, dt = batch.times, batch.states, batch.dt
    phi = family.features(t, x)
    phi = np.broadcast_to(phi, x.shape[:2] + (family.n_params,))
    off = np.broadcast_to(family.offset_values(t, x), x.shape[:2])
    dphi = phi[:, 1:] - phi[:, :-1]
    e = batch.rewards * dt + off[:, 1:] - off[:, :-1]
    if rho:
        dphi = dphi - rho * phi[:, :-1] * dt
        e = e - rho * off[:, :-1] * dt
    n = len(batch)
    B = np.einsum("nki,nkj->ij", phi[:, :-1], dphi) / n
    c = np.einsum("nki,nk->i", phi[:, :-1], e) / n
    return B, c


def clstd_solve(family: LinearBasis, data, rho: float = 0.0, cond_limit: float = 1e12) -> np.ndarray:
    if not isinstance(family, LinearBasis):
        raise ConfigurationError("CLSTD needs a linear-in-theta family")
    B, c = clstd_matrices(family, data, rho)
    cond = np.linalg.cond(B) if np.all(np.isfinite(B)) else np.inf
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularSystemError(float(cond))
    return -np.linalg.solve(B, c)


# --------------------------------------------------------------------------
# Single-trajectory operations

def _one(model: ValueModel, traj: Trajectory):
    return model.params[None, :].copy(), EpisodeBatch.from_trajectories([traj])


def residual_gradient_episode(model: ValueModel, traj: Trajectory, alpha: float, rho: float = 0.0) -> np.ndarray:
    th, b = _one(model, traj)
    return model.params + alpha * _episode_direction(SolverConfig("residual_gradient", rho=rho), model.family, th, b)[0]


def ml_sgd_episode(model: ValueModel, traj: Trajectory, alpha: float, rho: float = 0.0) -> np.ndarray:
    b = EpisodeBatch.from_trajectories([traj])
    th = model.params if not getattr(model.family, "batched_theta", True) else model.params[None, :]
    d = _episode_direction(SolverConfig("ml", rho=rho), model.family, th, b)
    return model.params + alpha * (d if d.ndim == 1 else d[0])


def ctd_offline_episode(model: ValueModel, traj: Trajectory, test: TestFunction, alpha: float, rho: float = 0.0) -> np.ndarray:
    th, b = _one(model, traj)
    return model.params + alpha * _episode_direction(SolverConfig("ctd", test=test, rho=rho), model.family, th, b)[0]


def ctd_lambda_step(model: ValueModel, traj: Trajectory, i: int, test: TestFunction, alpha: float, rho: float = 0.0, trace=None):
    """theta + alpha xi_i dm_i for one step; returns (params, trace state)."""
    if not 0 <= i < traj.grid.K:
        raise IndexError(f"step {i} outside [0, {traj.grid.K})")
    cfg = SolverConfig("ctd", mode="online", test=test, rho=rho)
    L = model.family.n_params
    state = test.start((1,), L) if trace is None else trace
    t, x, dt = traj.times, traj.states, traj.grid.dt
    th, _, st, _ = _online_step(cfg, model.family, test, model.params[None, :], None, state, None, t[i], t[i + 1], x[i : i + 1], x[i + 1 : i + 2], traj.rewards[i : i + 1], dt, alpha, 0.0)
    return th[0], st


def cgtd_step(model: ValueModel, traj: Trajectory, i: int, variant: str, alpha_theta: float, alpha_u: float, u=None, rho: float = 0.0, test: TestFunction | None = None, state=None):
    """One two-timescale update; returns (params, u, test state)."""
    if not 0 <= i < traj.grid.K:
        raise IndexError(f"step {i} outside [0, {traj.grid.K})")
    cfg = SolverConfig("cgtd", mode="online", test=test, variant=variant, rho=rho)
    L = model.family.n_params
    test = cfg.test
    uu = np.zeros((1, test.dim(L))) if u is None else np.asarray(u, dtype=float)[None, :]
    st = (test.start((1,), L), None) if state is None else state
    t, x, dt = traj.times, traj.states, traj.grid.dt
    th, u2, ts, js = _online_step(cfg, model.family, test, model.params[None, :], uu, st[0], st[1], t[i], t[i + 1], x[i : i + 1], x[i + 1 : i + 2], traj.rewards[i : i + 1], dt, alpha_theta, alpha_u)
    return th[0], u2[0], (ts, js)


def sectional_ctd0_step(model: ValueModel, traj: Trajectory, i: int, alpha: float) -> np.ndarray:
    """Update after moving from t_{i-1} to t_i (1 <= i <= K): theta_{i-1}, ..., theta_{K-1} += alpha x_{i-1} delta."""
    if not isinstance(model.family, Sectional):
        raise ConfigurationError("sectional update needs the sectional family")
    if not 1 <= i <= traj.grid.K:
        raise IndexError(f"step {i} outside [1, {traj.grid.K}]")
    cfg = SolverConfig("sectional_ctd0", mode="online")
    t, x, dt = traj.times, traj.states, traj.grid.dt
    th, *_ = _online_step(cfg, model.family, None, model.params[None, :], None, None, None, t[i - 1], t[i], x[i - 1 : i], x[i : i + 1], traj.rewards[i - 1 : i], dt, alpha, 0.0)
    return th[0]
