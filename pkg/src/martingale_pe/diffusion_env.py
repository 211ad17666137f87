"""Diffusion problem instances and exact discrete observation of their paths.

Conventions used throughout the package:

* states carry a trailing state axis, ``x.shape == (..., d)``;
* ``drift(t, x) -> (..., d)``, ``diffusion(t, x) -> (..., d, m)``,
  ``running_reward(t, x) -> (...)`` and ``terminal_reward(x) -> (...)``,
  with ``t`` broadcasting against ``x.shape[:-1]``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.signal import lfilter

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("exact-brownian", "exact-gbm", "exact-ou", "euler")


class SimulationError(FloatingPointError):
    """A sampled state became non-finite."""


class ModelError(ValueError):
    """Inconsistent model definition or sampler request."""


# --------------------------------------------------------------------------
# Grids

@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ModelError("K must be a positive integer")
        if not self.T > self.t0:
            raise ModelError("T must exceed t0")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.K

    @property
    def points(self) -> np.ndarray:
        pts = self.t0 + (self.T - self.t0) * np.arange(self.K + 1) / self.K
        pts[-1] = self.T
        return pts

    @classmethod
    def from_points(cls, points, rtol: float = 1e-12) -> "TimeGrid":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 1 or len(pts) < 2:
            raise ModelError("need at least two grid points")
        steps = np.diff(pts)
        h = (pts[-1] - pts[0]) / (len(pts) - 1)
        if np.any(np.abs(steps - h) > rtol * max(abs(h), abs(pts[-1]), 1.0)):
            raise ModelError("only uniform time grids are supported")
        return cls(float(pts[0]), float(pts[-1]), len(pts) - 1)

    def index_of(self, t) -> np.ndarray:
        """Grid index of time(s) t; raises if t is not on the grid."""
        t = np.asarray(t, dtype=float)
        k = np.rint((t - self.t0) / self.dt)
        if np.any(np.abs(self.t0 + k * self.dt - t) > 1e-9 * max(1.0, abs(self.T))) or np.any((k < 0) | (k > self.K)):
            raise ModelError("time is not a grid point")
        return k.astype(int)


# --------------------------------------------------------------------------
# Model

@dataclass
class DiffusionModel:
    drift: Callable
    diffusion: Callable
    running_reward: Callable
    terminal_reward: Callable
    initial_state: np.ndarray
    horizon: float | None = 1.0
    discount_rate: float = 0.0
    sampler_kind: str = "euler"
    params: dict = field(default_factory=dict)
    noise_dim: int = 1
    name: str = "custom"
    approximate_sampler: bool = field(init=False, default=False)

    def __post_init__(self):
        self.initial_state = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if self.horizon is not None and not self.horizon > 0:
            raise ModelError("horizon must be positive")
        if self.discount_rate < 0:
            raise ModelError("discount rate must be nonnegative")
        if self.sampler_kind not in SAMPLER_KINDS:
            raise ModelError(f"unknown sampler kind {self.sampler_kind!r}")
        if self.sampler_kind == "euler":
            self.approximate_sampler = True
            log.info("model %s uses the Euler-Maruyama fallback sampler", self.name)
        else:
            self._validate_exact()

    @property
    def state_dim(self) -> int:
        return self.initial_state.shape[0]

    @property
    def infinite_horizon(self) -> bool:
        return self.horizon is None

    def _validate_exact(self):
        kind, p = self.sampler_kind, self.params
        need = {"exact-brownian": ("mu", "sigma"), "exact-gbm": ("mu", "sigma"), "exact-ou": ("a", "mean", "sigma")}[kind]
        missing = [k for k in need if k not in p]
        if missing:
            raise ModelError(f"{kind} sampler needs coefficients {missing}")
        if self.state_dim != 1 or self.noise_dim != 1:
            raise ModelError(f"{kind} sampler is one-dimensional; use euler for d > 1")
        probes_t = np.array([0.0, 0.37, 0.81])
        probes_x = np.array([[-1.3], [0.4], [2.2]]) if kind != "exact-gbm" else np.array([[0.3], [1.0], [2.2]])
        for t in probes_t:
            b = np.asarray(self.drift(t, probes_x), dtype=float).reshape(len(probes_x))
            s = np.asarray(self.diffusion(t, probes_x), dtype=float).reshape(len(probes_x))
            x = probes_x[:, 0]
            if kind == "exact-brownian":
                b_ref, s_ref = np.full_like(x, p["mu"]), np.full_like(x, p["sigma"])
            elif kind == "exact-gbm":
                b_ref, s_ref = p["mu"] * x, p["sigma"] * x
            else:
                b_ref, s_ref = p["a"] * (p["mean"] - x), np.full_like(x, p["sigma"])
            if not (np.allclose(b, b_ref, rtol=1e-12, atol=1e-12) and np.allclose(s, s_ref, rtol=1e-12, atol=1e-12)):
                raise ModelError(f"drift/diffusion do not have the structure required by the {kind} sampler")


def _zero_reward(t, x):
    return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))


def brownian(sigma=1.0, mu=0.0, x0=0.0, horizon=1.0, running_reward=None, terminal_reward=None, discount_rate=0.0, name="brownian"):
    return DiffusionModel(
        drift=lambda t, x: np.full(np.shape(x), float(mu)) + 0.0 * np.asarray(t)[..., None],
        diffusion=lambda t, x: np.full(np.shape(x) + (1,), float(sigma)) + 0.0 * np.asarray(t)[..., None, None],
        running_reward=running_reward or _zero_reward,
        terminal_reward=terminal_reward or (lambda x: x[..., 0]),
        initial_state=np.array([x0]),
        horizon=horizon,
        discount_rate=discount_rate,
        sampler_kind="exact-brownian",
        params={"mu": float(mu), "sigma": float(sigma)},
        name=name,
    )


def gbm(mu, sigma, x0=1.0, horizon=1.0, running_reward=None, terminal_reward=None, discount_rate=0.0, name="gbm"):
    """Geometric Brownian motion with drift mu = r - q."""
    return DiffusionModel(
        drift=lambda t, x: float(mu) * np.asarray(x, dtype=float) + 0.0 * np.asarray(t)[..., None],
        diffusion=lambda t, x: float(sigma) * np.asarray(x, dtype=float)[..., None] + 0.0 * np.asarray(t)[..., None, None],
        running_reward=running_reward or _zero_reward,
        terminal_reward=terminal_reward or (lambda x: x[..., 0]),
        initial_state=np.array([x0]),
        horizon=horizon,
        discount_rate=discount_rate,
        sampler_kind="exact-gbm",
        params={"mu": float(mu), "sigma": float(sigma)},
        name=name,
    )


def ou(a, mean, sigma, x0=0.0, horizon=None, running_reward=None, terminal_reward=None, discount_rate=0.0, name="ou"):
    """Ornstein-Uhlenbeck dX = a(mean - X)dt + sigma dW; a = 0 is a Brownian motion."""
    return DiffusionModel(
        drift=lambda t, x: float(a) * (float(mean) - np.asarray(x, dtype=float)) + 0.0 * np.asarray(t)[..., None],
        diffusion=lambda t, x: np.full(np.shape(x) + (1,), float(sigma)) + 0.0 * np.asarray(t)[..., None, None],
        running_reward=running_reward or _zero_reward,
        terminal_reward=terminal_reward or _zero_terminal,
        initial_state=np.array([x0]),
        horizon=horizon,
        discount_rate=discount_rate,
        sampler_kind="exact-ou",
        params={"a": float(a), "mean": float(mean), "sigma": float(sigma)},
        name=name,
    )


def _zero_terminal(x):
    return np.zeros(np.shape(x)[:-1])


# --------------------------------------------------------------------------
# Observed paths

@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (K+1, d)
    rewards: np.ndarray  # (K,)
    terminal_value: float
    seed: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.states.shape[0] != self.grid.K + 1 or self.rewards.shape != (self.grid.K,):
            raise ModelError("trajectory arrays do not match the grid")

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    def check_rewards(self, model: DiffusionModel, rtol: float = 1e-12):
        expected = np.asarray(model.running_reward(self.times[:-1], self.states[:-1]), dtype=float)
        if not np.allclose(self.rewards, expected, rtol=rtol, atol=rtol):
            raise ModelError("stored rewards disagree with the model's running reward")

    def to_csv(self, path):
        d = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j}" for j in range(d)] + ["r"])
            for i, t in enumerate(self.times):
                r = repr(float(self.rewards[i])) if i < self.grid.K else ""
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[i]] + [r])


def cumulative_reward(traj: Trajectory, from_index: int) -> float:
    """h(X_T) + sum_{j >= from_index} r_j dt."""
    K = traj.grid.K
    if not 0 <= from_index <= K:
        raise IndexError(f"from_index {from_index} outside [0, {K}]")
    return float(traj.terminal_value + np.sum(traj.rewards[from_index:]) * traj.grid.dt)


def discounted_cumulative_reward(traj: Trajectory, rho: float, from_index: int) -> float:
    """e^{-rho T} h(X_T) + sum_{j >= from_index} e^{-rho t_j} r_j dt."""
    if rho < 0:
        raise ModelError("rho must be nonnegative")
    if rho == 0:
        return cumulative_reward(traj, from_index)
    K = traj.grid.K
    if not 0 <= from_index <= K:
        raise IndexError(f"from_index {from_index} outside [0, {K}]")
    t = traj.times
    run = np.sum(np.exp(-rho * t[from_index:K]) * traj.rewards[from_index:]) * traj.grid.dt
    return float(math.exp(-rho * traj.grid.T) * traj.terminal_value + run)


@dataclass
class EpisodeBatch:
    """Episodes sharing one grid, stored as stacked arrays."""

    grid: TimeGrid
    states: np.ndarray  # (n, K+1, d)
    rewards: np.ndarray  # (n, K)
    terminal: np.ndarray  # (n,)
    seeds: np.ndarray  # (n,)

    def __post_init__(self):
        n = self.states.shape[0]
        if n == 0:
            raise ModelError("empty batch")
        if self.states.shape[1] != self.grid.K + 1 or self.rewards.shape != (n, self.grid.K) or self.terminal.shape != (n,):
            raise ModelError("batch arrays do not match the grid")

    def __len__(self):
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    @property
    def dt(self) -> float:
        return self.grid.dt

    def trajectory(self, k: int) -> Trajectory:
        return Trajectory(self.grid, self.states[k], self.rewards[k], float(self.terminal[k]), int(self.seeds[k]))

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(k) for k in range(len(self))]

    @classmethod
    def from_trajectories(cls, trajs) -> "EpisodeBatch":
        trajs = list(trajs)
        if not trajs:
            raise ModelError("empty batch")
        grid = trajs[0].grid
        if any(tr.grid != grid for tr in trajs):
            raise ModelError("all trajectories in a batch must share one grid")
        return cls(
            grid,
            np.stack([tr.states for tr in trajs]),
            np.stack([tr.rewards for tr in trajs]),
            np.array([tr.terminal_value for tr in trajs], dtype=float),
            np.array([tr.seed for tr in trajs]),
        )

    def take(self, idx) -> "EpisodeBatch":
        idx = np.asarray(idx)
        return EpisodeBatch(self.grid, self.states[idx], self.rewards[idx], self.terminal[idx], self.seeds[idx])

    def reward_to_go(self, rho: float = 0.0) -> np.ndarray:
        """(n, K) array of (discounted) cumulative rewards from each grid index."""
        dt = self.grid.dt
        if rho == 0:
            tail = np.cumsum(self.rewards[:, ::-1], axis=1)[:, ::-1] * dt
            return self.terminal[:, None] + tail
        t = self.times
        w = np.exp(-rho * t[:-1])
        tail = np.cumsum((self.rewards * w)[:, ::-1], axis=1)[:, ::-1] * dt
        return math.exp(-rho * self.grid.T) * self.terminal[:, None] + tail


# --------------------------------------------------------------------------
# Samplers

def _ou_coeffs(p, dt):
    a = p["a"]
    if a == 0:
        return 1.0, p["sigma"] * math.sqrt(dt)
    e = math.exp(-a * dt)
    return e, p["sigma"] * math.sqrt((1 - e * e) / (2 * a))


class _PathState:
    """Carry-over state so that chunked sampling reproduces one-shot sampling."""

    def __init__(self, model: DiffusionModel, x0: np.ndarray):
        self.model = model
        kind = model.sampler_kind
        if kind == "exact-gbm":
            if np.any(x0 <= 0):
                raise ModelError("GBM needs a positive initial state")
            self.carry = np.log(x0[:, 0])
        elif kind == "exact-brownian":
            self.carry = x0[:, 0].copy()
        elif kind == "exact-ou":
            self.carry = x0[:, 0] - model.params["mean"]
        else:
            self.carry = x0.copy()

    def advance(self, z: np.ndarray, t_start: float, dt: float) -> np.ndarray:
        """Return (n, k, d) states after the k steps driven by normals z (n, k, m)."""
        m, kind, p = self.model, self.model.sampler_kind, self.model.params
        n, k = z.shape[:2]
        if kind == "exact-brownian":
            inc = p["mu"] * dt + p["sigma"] * math.sqrt(dt) * z[..., 0]
            path = np.cumsum(np.concatenate([self.carry[:, None], inc], axis=1), axis=1)[:, 1:]
            self.carry = path[:, -1].copy()
            out = path
        elif kind == "exact-gbm":
            s = p["sigma"]
            inc = (p["mu"] - 0.5 * s * s) * dt + s * math.sqrt(dt) * z[..., 0]
            logp = np.cumsum(np.concatenate([self.carry[:, None], inc], axis=1), axis=1)[:, 1:]
            self.carry = logp[:, -1].copy()
            out = np.exp(logp)
        elif kind == "exact-ou":
            e, sd = _ou_coeffs(p, dt)
            y, _ = lfilter([1.0], [1.0, -e], sd * z[..., 0], axis=1, zi=(e * self.carry)[:, None])
            self.carry = y[:, -1].copy()
            out = y + p["mean"]
        else:
            sq = math.sqrt(dt)
            out = np.empty((n, k, m.state_dim))
            x = self.carry
            for i in range(k):
                t = t_start + i * dt
                sig = np.asarray(m.diffusion(t, x), dtype=float).reshape(n, m.state_dim, m.noise_dim)
                x = x + np.asarray(m.drift(t, x), dtype=float).reshape(n, m.state_dim) * dt + np.einsum("ndm,nm->nd", sig, z[:, i]) * sq
                out[:, i] = x
            self.carry = x
            return out
        return out[..., None]


def _check_grid(model: DiffusionModel, grid: TimeGrid):
    if grid.t0 < 0:
        raise ModelError("grid starts before time 0")
    if model.horizon is not None and grid.T > model.horizon * (1 + 1e-12):
        raise ModelError("grid extends past the model horizon")


def _finish(model, grid, states, seeds) -> EpisodeBatch:
    if not np.all(np.isfinite(states)):
        raise SimulationError("non-finite state encountered while sampling")
    t = grid.points
    rewards = np.asarray(model.running_reward(t[:-1], states[:, :-1]), dtype=float)
    rewards = np.broadcast_to(rewards, states.shape[:2][:1] + (grid.K,)).copy()
    if model.horizon is not None and abs(grid.T - model.horizon) <= 1e-12 * model.horizon:
        terminal = np.asarray(model.terminal_reward(states[:, -1]), dtype=float).reshape(-1)
    else:
        terminal = np.full(states.shape[0], np.nan)
    return EpisodeBatch(grid, states, rewards, terminal, np.asarray(seeds))


def sample_batch(model: DiffusionModel, grid: TimeGrid, n: int, seed: int, per_trajectory_seeds: bool = False) -> EpisodeBatch:
    """n episodes on ``grid``.

    By default all normals come from one generator seeded with ``seed`` and are
    drawn in (episode, step, noise) order; ``per_trajectory_seeds`` instead
    gives episode k its own generator seeded with ``seed + k`` so that it equals
    ``sample_trajectory(model, grid, seed + k)``.
    """
    _check_grid(model, grid)
    if n < 1:
        raise ModelError("need at least one episode")
    if per_trajectory_seeds:
        z = np.stack([np.random.default_rng(seed + k).standard_normal((grid.K, model.noise_dim)) for k in range(n)])
        seeds = seed + np.arange(n)
    else:
        z = np.random.default_rng(seed).standard_normal((n, grid.K, model.noise_dim))
        seeds = np.full(n, seed)
    x0 = np.broadcast_to(model.initial_state, (n, model.state_dim)).copy()
    st = _PathState(model, x0)
    with np.errstate(over="ignore", invalid="ignore"):
        path = st.advance(z, grid.t0, grid.dt)
    states = np.concatenate([x0[:, None, :], path], axis=1)
    return _finish(model, grid, states, seeds)


def sample_trajectory(model: DiffusionModel, grid: TimeGrid, seed: int) -> Trajectory:
    return sample_batch(model, grid, 1, seed).trajectory(0)


def stream_trajectory(model: DiffusionModel, grid: TimeGrid, seed: int, chunk_steps: int = 1_000_000) -> Iterator[Trajectory]:
    """One long path delivered as consecutive pieces sharing their end points.

    Concatenating the pieces reproduces ``sample_trajectory(model, grid, seed)``.
    """
    _check_grid(model, grid)
    rng = np.random.default_rng(seed)
    x = model.initial_state[None, :].copy()
    st = _PathState(model, x)
    dt = grid.dt
    done = 0
    while done < grid.K:
        k = min(chunk_steps, grid.K - done)
        z = rng.standard_normal((1, k, model.noise_dim))
        t_start = grid.t0 + done * dt
        with np.errstate(over="ignore", invalid="ignore"):
            path = st.advance(z, t_start, dt)
        states = np.concatenate([x[:, None, :], path], axis=1)
        t_end = grid.t0 + (done + k) * dt if done + k < grid.K else grid.T
        sub = TimeGrid(t_start, t_end, k)
        yield _finish(model, sub, states, [seed]).trajectory(0)
        x = states[:, -1]
        done += k


# --------------------------------------------------------------------------
# Config

def _reward_from_spec(spec) -> Callable:
    if spec is None or spec == "zero":
        return _zero_reward
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda t, x: np.full(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]), c)
    kind = spec["kind"]
    if kind == "constant":
        c = float(spec["value"])
        return lambda t, x: np.full(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]), c)
    if kind == "quadratic":  # c2 x^2 + c1 x
        c2, c1 = float(spec.get("c2", 0.5)), float(spec.get("c1", 0.0))
        return lambda t, x: (c2 * x[..., 0] ** 2 + c1 * x[..., 0]) + 0.0 * np.asarray(t)
    raise ModelError(f"unknown running reward kind {kind!r}")


def _terminal_from_spec(spec) -> Callable:
    if spec is None or spec == "zero":
        return _zero_terminal
    kind = spec if isinstance(spec, str) else spec["kind"]
    if kind == "identity":
        return lambda x: np.asarray(x)[..., 0]
    if kind == "square":
        return lambda x: np.asarray(x)[..., 0] ** 2
    if kind == "call":
        strike = float(spec["strike"])
        return lambda x: np.maximum(np.asarray(x)[..., 0] - strike, 0.0)
    raise ModelError(f"unknown terminal reward kind {kind!r}")


def model_from_config(cfg: dict) -> tuple[DiffusionModel, TimeGrid, int]:
    """Build (model, grid, seed) from a nested mapping.

    Keys: kind (brownian | gbm | ou), coefficients, x0, T (or T_max with
    infinite: true), K or dt, rho, seed, running_reward, terminal_reward.
    """
    kind = cfg["kind"]
    coef = dict(cfg.get("coefficients", {}))
    rho = float(cfg.get("rho", 0.0))
    x0 = float(cfg.get("x0", 0.0))
    infinite = bool(cfg.get("infinite", False))
    T = float(cfg["T"])
    horizon = None if infinite else T
    K = int(cfg["K"]) if "K" in cfg else int(round(T / float(cfg["dt"])))
    run = _reward_from_spec(cfg.get("running_reward"))
    term = _terminal_from_spec(cfg.get("terminal_reward"))
    if kind == "brownian":
        m = brownian(coef.get("sigma", 1.0), coef.get("mu", 0.0), x0, horizon, run, term, rho)
    elif kind == "gbm":
        m = gbm(coef["mu"], coef["sigma"], x0, horizon, run, term, rho)
    elif kind == "ou":
        m = ou(coef["a"], coef["mean"], coef["sigma"], x0, horizon, run, term, rho)
    else:
        raise ModelError(f"unknown model kind {kind!r}")
    return m, TimeGrid(0.0, T, K), int(cfg.get("seed", 0))
