"""Parametric value functions J^theta(t, x) with analytic theta-gradients.

Families are stateless: every method takes ``theta`` explicitly, with shape
``(..., L)`` whose leading axes broadcast against ``x.shape[:-1]``. That lets
one call evaluate many independent repetitions at once. ``ValueModel`` bundles
a family with a concrete parameter vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .diffusion_env import EpisodeBatch, TimeGrid, Trajectory

EXP_GUARD = 500.0


class ValueOverflowError(FloatingPointError):
    """An exponential family was evaluated with an exponent beyond the guard.

    ``mask`` marks the offending entries (broadcast shape of the inputs), so a
    vectorized solver can tell which repetitions diverged.
    """

    def __init__(self, msg, mask=None):
        super().__init__(msg)
        self.mask = mask


def _th(theta, j):
    return np.asarray(theta)[..., j]


def _x(x):
    return np.asarray(x, dtype=float)[..., 0]


class ValueFamily:
    name = "base"
    batched_theta = True
    linear_in_theta = False  # True when J = theta . features + offset
    n_params = 0
    terminal_pinned = False
    terminal_time = 1.0

    def value(self, theta, t, x):
        raise NotImplementedError

    def grad(self, theta, t, x):
        raise NotImplementedError

    def hess(self, theta, t, x):
        """(..., L, L) second derivative in theta; zero for linear families."""
        shape = np.broadcast_shapes(np.shape(theta)[:-1], np.shape(t), np.shape(x)[:-1])
        return np.zeros(shape + (self.n_params, self.n_params))

    def vjp(self, theta, t, x, cot):
        """sum over points of cot * dJ/dtheta, reduced to theta's own shape."""
        g = self.grad(theta, t, x)
        out = np.asarray(cot)[..., None] * g
        theta = np.asarray(theta)
        extra = out.ndim - theta.ndim
        out = out.sum(axis=tuple(range(extra))) if extra > 0 else out
        axes = tuple(i for i, (a, b) in enumerate(zip(out.shape[:-1], theta.shape[:-1])) if b == 1 and a != 1)
        return out.sum(axis=axes, keepdims=True) if axes else out

    def value_and_vjp(self, theta, t, x, cot_fn):
        """(J, vjp(J, cot_fn(J))): lets the martingale-loss update reuse one forward pass."""
        v = self.value(theta, t, x)
        return v, self.vjp(theta, t, x, cot_fn(v))

    def dx(self, theta, t, x, h=1e-6):
        """dJ/dx by central differences (families override when they can)."""
        x = np.asarray(x, dtype=float)
        return (self.value(theta, t, x + h) - self.value(theta, t, x - h)) / (2 * h)

    def terminal(self, x):
        raise NotImplementedError(f"{self.name} is not terminal-pinned")

    def probe(self, rng, n):
        t = rng.uniform(0.0, self.terminal_time, n)
        x = rng.standard_normal((n, 1))
        return t, x

    def default_theta(self):
        return np.zeros(self.n_params)


class AffineTimeScaled(ValueFamily):
    """J = [theta (1 - t) + 1] x."""

    name = "affine_time_scaled"
    n_params = 1
    terminal_pinned = True

    def value(self, theta, t, x):
        return (_th(theta, 0) * (1 - np.asarray(t)) + 1) * _x(x)

    def grad(self, theta, t, x):
        g = (1 - np.asarray(t)) * _x(x)
        g = np.broadcast_to(g, np.broadcast_shapes(g.shape, np.shape(theta)[:-1]))
        return g[..., None]

    def terminal(self, x):
        return _x(x)

    linear_in_theta = True

    def features(self, t, x):
        return self.grad(np.zeros(1), t, x)

    def offset_values(self, t, x):
        return np.broadcast_to(_x(x), np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))


class QuadTriple(ValueFamily):
    """J = [theta0 (1 - t) + 1] x^2 + theta1 (1 - t) x + theta2 (1 - t)."""

    name = "quad_triple"
    n_params = 3
    terminal_pinned = True

    def value(self, theta, t, x):
        s = 1 - np.asarray(t)
        xx = _x(x)
        return (_th(theta, 0) * s + 1) * xx**2 + _th(theta, 1) * s * xx + _th(theta, 2) * s

    def grad(self, theta, t, x):
        s = 1 - np.asarray(t)
        xx = _x(x)
        shape = np.broadcast_shapes(np.shape(theta)[:-1], np.shape(t), xx.shape)
        out = np.empty(shape + (3,))
        out[..., 0] = s * xx**2
        out[..., 1] = s * xx
        out[..., 2] = s
        return out

    def terminal(self, x):
        return _x(x) ** 2

    linear_in_theta = True

    def features(self, t, x):
        return self.grad(np.zeros(3), t, x)

    def offset_values(self, t, x):
        return np.broadcast_to(_x(x) ** 2, np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))


class Cubic(ValueFamily):
    """J = theta x^3 (no terminal pinning)."""

    name = "cubic"
    n_params = 1

    def value(self, theta, t, x):
        return _th(theta, 0) * _x(x) ** 3 + 0.0 * np.asarray(t)

    def grad(self, theta, t, x):
        g = _x(x) ** 3 + 0.0 * np.asarray(t)
        g = np.broadcast_to(g, np.broadcast_shapes(g.shape, np.shape(theta)[:-1]))
        return g[..., None]

    linear_in_theta = True

    def features(self, t, x):
        return self.grad(np.zeros(1), t, x)

    def offset_values(self, t, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))


def _guarded_exp(expo):
    bad = np.abs(expo) > EXP_GUARD
    if np.any(bad):
        raise ValueOverflowError("exponent beyond guard: theta is diverging", mask=bad)
    return np.exp(expo)


class ExpPinned(ValueFamily):
    """J = x + (1 - t) exp(theta x - theta^2 t / 2 + theta)."""

    name = "exp_pinned"
    n_params = 1
    terminal_pinned = True

    def _parts(self, theta, t, x):
        th, t, xx = _th(theta, 0), np.asarray(t), _x(x)
        e = _guarded_exp(th * xx - 0.5 * th * th * t + th)
        return th, t, xx, e

    def value(self, theta, t, x):
        th, t, xx, e = self._parts(theta, t, x)
        return xx + (1 - t) * e

    def grad(self, theta, t, x):
        th, t, xx, e = self._parts(theta, t, x)
        return ((1 - t) * e * (xx - th * t + 1))[..., None]

    def hess(self, theta, t, x):
        th, t, xx, e = self._parts(theta, t, x)
        a = xx - th * t + 1
        return ((1 - t) * e * (a * a - t))[..., None, None]

    def terminal(self, x):
        return _x(x)

    def default_theta(self):
        return np.array([-1.0])


class ExpUnpinned(ValueFamily):
    """J = x + (1 - t) exp(theta x - theta^2 t / 2) [(theta + 1)^2 + 1]."""

    name = "exp_unpinned"
    n_params = 1
    terminal_pinned = True  # the (1 - t) factor still forces J(1, x) = x

    def _parts(self, theta, t, x):
        th, t, xx = _th(theta, 0), np.asarray(t), _x(x)
        e = _guarded_exp(th * xx - 0.5 * th * th * t)
        return th, t, xx, e

    def value(self, theta, t, x):
        th, t, xx, e = self._parts(theta, t, x)
        return xx + (1 - t) * e * ((th + 1) ** 2 + 1)

    def grad(self, theta, t, x):
        th, t, xx, e = self._parts(theta, t, x)
        c, c1 = (th + 1) ** 2 + 1, 2 * (th + 1)
        return ((1 - t) * e * ((xx - th * t) * c + c1))[..., None]

    def hess(self, theta, t, x):
        th, t, xx, e = self._parts(theta, t, x)
        c, c1 = (th + 1) ** 2 + 1, 2 * (th + 1)
        a = xx - th * t
        return ((1 - t) * e * (a * a * c - t * c + 2 * a * c1 + 2.0))[..., None, None]

    def terminal(self, x):
        return _x(x)

    def default_theta(self):
        return np.array([-1.0])


class LinearBasis(ValueFamily):
    """J = sum_j theta_j phi_j(t, x) + offset(t, x)."""

    name = "linear_basis"
    linear_in_theta = True

    def __init__(self, basis: Callable, n_params: int, offset: Callable | None = None, names=None):
        self.basis = basis
        self.n_params = int(n_params)
        self.offset = offset
        self.names = list(names) if names is not None else [f"phi{j}" for j in range(self.n_params)]

    def features(self, t, x):
        return np.asarray(self.basis(t, x), dtype=float)

    def value(self, theta, t, x):
        v = np.sum(np.asarray(theta) * self.features(t, x), axis=-1)
        if self.offset is not None:
            v = v + self.offset(t, x)
        return v

    def grad(self, theta, t, x):
        phi = self.features(t, x)
        shape = np.broadcast_shapes(np.shape(theta)[:-1], phi.shape[:-1])
        return np.broadcast_to(phi, shape + (self.n_params,))

    def offset_values(self, t, x):
        if self.offset is None:
            return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))
        return np.asarray(self.offset(t, x), dtype=float)

    @classmethod
    def lq_offset(cls, rho: float) -> "LinearBasis":
        """x^2 / (2 rho) + theta: the one-parameter family of the Brownian LQ study."""
        fam = cls(
            lambda t, x: np.ones(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]) + (1,)),
            1,
            offset=lambda t, x: _x(x) ** 2 / (2 * rho) + 0.0 * np.asarray(t),
            names=["const"],
        )
        fam.name = "lq_offset"
        return fam

    def probe(self, rng, n):
        return rng.uniform(0.0, 2.0, n), rng.standard_normal((n, 1))


def _quad_basis(t, x):
    xx = _x(x)
    xx = np.broadcast_to(xx, np.broadcast_shapes(xx.shape, np.shape(t)))
    return np.stack([0.5 * xx**2, xx, np.ones_like(xx)], axis=-1)


class LQQuadratic(LinearBasis):
    """J = theta0 x^2 / 2 + theta1 x + theta2."""

    name = "lq_quadratic"

    def __init__(self):
        super().__init__(_quad_basis, 3, names=["A", "B", "C"])


class PayoffResidualMLP(ValueFamily):
    """J = (x - K)^+ + (T - t) NN(t, x), NN a softplus network 2 -> h1 -> h2 -> 1.

    Gradients are accumulated in reverse mode by hand. Only unbatched theta of
    shape (L,) is supported; t and x may carry any batch shape.
    """

    name = "payoff_residual_mlp"
    terminal_pinned = True
    batched_theta = False

    def __init__(self, strike=1.0, maturity=1.0, hidden=(128, 64)):
        self.strike = float(strike)
        self.maturity = float(maturity)
        self.terminal_time = self.maturity
        self.h1, self.h2 = map(int, hidden)
        h1, h2 = self.h1, self.h2
        self._shapes = [("W1", (h1, 2)), ("b1", (h1,)), ("W2", (h2, h1)), ("b2", (h2,)), ("w3", (h2,)), ("b3", (1,))]
        self._offsets = np.cumsum([0] + [int(np.prod(s)) for _, s in self._shapes])
        self.n_params = int(self._offsets[-1])

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"MLP expects a flat parameter vector of length {self.n_params}")
        return {n: theta[a:b].reshape(s) for (n, s), a, b in zip(self._shapes, self._offsets[:-1], self._offsets[1:])}

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        p = []
        for name, shape in self._shapes:
            if name.startswith("b"):
                p.append(np.zeros(shape))
            else:
                fan_in = shape[-1] if len(shape) == 2 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                p.append(rng.uniform(-bound, bound, shape))
        return np.concatenate([a.ravel() for a in p])

    def default_theta(self):
        return self.init_params(0)

    def _forward(self, theta, t, x):
        P = self.unpack(theta)
        xx = _x(x)
        shape = np.broadcast_shapes(np.shape(t), xx.shape)
        tt = np.broadcast_to(np.asarray(t, dtype=float), shape).ravel()
        xf = np.broadcast_to(xx, shape).ravel()
        z0 = np.stack([tt, xf], axis=1)
        h1 = z0 @ P["W1"].T + P["b1"]
        a1 = np.logaddexp(0.0, h1)
        h2 = a1 @ P["W2"].T + P["b2"]
        a2 = np.logaddexp(0.0, h2)
        out = a2 @ P["w3"] + P["b3"][0]
        return P, shape, tt, xf, z0, h1, a1, h2, a2, out

    def network(self, theta, t, x):
        _, shape, *_, out = self._forward(theta, t, x)
        return out.reshape(shape)

    def value(self, theta, t, x):
        _, shape, tt, xf, *_, out = self._forward(theta, t, x)
        return (np.maximum(xf - self.strike, 0.0) + (self.maturity - tt) * out).reshape(shape)

    def vjp(self, theta, t, x, cot):
        return self._backward(self._forward(theta, t, x), cot)

    def value_and_vjp(self, theta, t, x, cot_fn):
        fw = self._forward(theta, t, x)
        _, shape, tt, xf, *_, out = fw
        v = (np.maximum(xf - self.strike, 0.0) + (self.maturity - tt) * out).reshape(shape)
        return v, self._backward(fw, cot_fn(v))

    def _backward(self, fw, cot):
        P, shape, tt, xf, z0, h1, a1, h2, a2, out = fw
        c = np.broadcast_to(np.asarray(cot, dtype=float), shape).ravel() * (self.maturity - tt)
        g_b3 = np.array([c.sum()])
        g_w3 = a2.T @ c
        d2 = c[:, None] * P["w3"] * expit(h2)
        g_W2 = d2.T @ a1
        g_b2 = d2.sum(0)
        d1 = (d2 @ P["W2"]) * expit(h1)
        g_W1 = d1.T @ z0
        g_b1 = d1.sum(0)
        return np.concatenate([g_W1.ravel(), g_b1, g_W2.ravel(), g_b2, g_w3, g_b3])

    def grad(self, theta, t, x):
        P, shape, tt, xf, z0, h1, a1, h2, a2, out = self._forward(theta, t, x)
        s = (self.maturity - tt)[:, None]
        n = len(tt)
        d2 = s * P["w3"] * expit(h2)  # (n, h2)
        d1 = (d2 @ P["W2"]) * expit(h1)  # (n, h1)
        g = np.concatenate(
            [
                (d1[:, :, None] * z0[:, None, :]).reshape(n, -1),
                d1,
                (d2[:, :, None] * a1[:, None, :]).reshape(n, -1),
                d2,
                s * a2,
                s,
            ],
            axis=1,
        )
        return g.reshape(shape + (self.n_params,))

    def dx(self, theta, t, x, h=None):
        P, shape, tt, xf, z0, h1, a1, h2, a2, out = self._forward(theta, t, x)
        g2 = P["w3"] * expit(h2)
        g1 = (g2 @ P["W2"]) * expit(h1)
        dnet_dx = g1 @ P["W1"][:, 1]
        return ((xf > self.strike).astype(float) + (self.maturity - tt) * dnet_dx).reshape(shape)

    def terminal(self, x):
        return np.maximum(_x(x) - self.strike, 0.0)

    def probe(self, rng, n):
        return rng.uniform(0.0, self.maturity, n), rng.uniform(0.5, 1.6, (n, 1))


class Sectional(ValueFamily):
    """J_i(x) = theta_i x on grid slice i, with theta_K pinned to 1. L = K."""

    name = "sectional"
    terminal_pinned = True

    def __init__(self, grid: TimeGrid):
        self.grid = grid
        self.n_params = grid.K
        self.terminal_time = grid.T

    def _full(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.concatenate([theta, np.ones(theta.shape[:-1] + (1,))], axis=-1)

    def value(self, theta, t, x):
        idx = self.grid.index_of(t)
        th = self._full(theta)
        xx = _x(x)
        shape = np.broadcast_shapes(th.shape[:-1], idx.shape, xx.shape)
        th_b = np.broadcast_to(th, shape + th.shape[-1:])
        coef = np.take_along_axis(th_b, np.broadcast_to(idx, shape)[..., None], axis=-1)[..., 0]
        return coef * xx

    def grad(self, theta, t, x):
        idx = self.grid.index_of(t)
        xx = _x(x)
        shape = np.broadcast_shapes(np.shape(theta)[:-1], idx.shape, xx.shape)
        onehot = np.zeros(shape + (self.n_params + 1,))
        np.put_along_axis(onehot, np.broadcast_to(idx, shape)[..., None], 1.0, axis=-1)
        return onehot[..., :-1] * np.broadcast_to(xx, shape)[..., None]

    def terminal(self, x):
        return _x(x)

    def probe(self, rng, n):
        return self.grid.points[rng.integers(0, self.grid.K + 1, n)], rng.standard_normal((n, 1))

    def default_theta(self):
        return self.grid.points[:-1].copy()


# --------------------------------------------------------------------------
# Bundled model and martingale increments

@dataclass
class ValueModel:
    family: ValueFamily
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape[-1] != self.family.n_params:
            raise ValueError(f"{self.family.name} needs {self.family.n_params} parameters")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("parameters must be finite")

    @property
    def family_id(self) -> str:
        return self.family.name

    def eval(self, t, x):
        return self.family.value(self.params, t, x)

    def grad_theta(self, t, x):
        return self.family.grad(self.params, t, x)

    def with_params(self, params) -> "ValueModel":
        return ValueModel(self.family, params)


@dataclass(frozen=True)
class MIncrement:
    dm: float
    grad_dm: np.ndarray


def m_increment(model: ValueModel, traj: Trajectory, i: int, rho: float = 0.0) -> MIncrement:
    K = traj.grid.K
    if not 0 <= i < K:
        raise IndexError(f"step {i} outside [0, {K})")
    t, x, dt = traj.times, traj.states, traj.grid.dt
    j0 = float(model.eval(t[i], x[i]))
    j1 = float(model.eval(t[i + 1], x[i + 1]))
    g0 = np.asarray(model.grad_theta(t[i], x[i]), dtype=float)
    g1 = np.asarray(model.grad_theta(t[i + 1], x[i + 1]), dtype=float)
    dm = j1 - j0 + traj.rewards[i] * dt
    gdm = g1 - g0
    if rho:
        dm = dm - rho * j0 * dt
        gdm = gdm - rho * g0 * dt
    return MIncrement(float(dm), gdm)


def _theta_for_batch(theta, n):
    """Per-episode parameters (n, L) get a time axis; a shared (L,) vector passes through."""
    theta = np.asarray(theta, dtype=float)
    return theta[:, None, :] if theta.ndim == 2 else theta


@dataclass
class PathIncrements:
    values: np.ndarray  # (n, K+1)
    dm: np.ndarray  # (n, K)
    grads: np.ndarray | None = None  # (n, K+1, L)
    grad_dm: np.ndarray | None = None  # (n, K, L)


def batch_increments(family: ValueFamily, theta, batch: EpisodeBatch, rho: float = 0.0, with_grad: bool = True) -> PathIncrements:
    """Values, increments dm and their gradients along every episode of ``batch``.

    ``theta`` is either one vector (L,) shared by all episodes or (n, L) with
    episode k evaluated at theta[k].
    """
    th = _theta_for_batch(theta, len(batch))
    t, x, dt = batch.times, batch.states, batch.dt
    J = np.broadcast_to(family.value(th, t, x), batch.states.shape[:2])
    dm = J[:, 1:] - J[:, :-1] + batch.rewards * dt
    if rho:
        dm = dm - rho * J[:, :-1] * dt
    if not with_grad:
        return PathIncrements(J, dm)
    G = np.broadcast_to(family.grad(th, t, x), batch.states.shape[:2] + (family.n_params,))
    gdm = G[:, 1:] - G[:, :-1]
    if rho:
        gdm = gdm - rho * G[:, :-1] * dt
    return PathIncrements(J, dm, G, gdm)


# --------------------------------------------------------------------------
# Gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_probe: dict
    passed: bool
    probes: int = 0
    details: dict = field(default_factory=dict)


def grad_check(model: ValueModel, probes: int = 16, seed: int = 0, step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare grad_theta with central differences of eval at random (t, x).

    Relative error is |g - fd| / max(|fd|, floor).
    """
    if probes < 1:
        raise ValueError("probes must be positive")
    fam, theta = model.family, model.params
    rng = np.random.default_rng(seed)
    t, x = fam.probe(rng, probes)
    g = np.asarray(fam.grad(theta, t, x), dtype=float).reshape(probes, fam.n_params)
    fd = np.empty_like(g)
    for j in range(fam.n_params):
        e = np.zeros_like(theta)
        e[j] = step
        fd[:, j] = (fam.value(theta + e, t, x) - fam.value(theta - e, t, x)) / (2 * step)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), floor)
    k, j = np.unravel_index(int(np.argmax(rel)), rel.shape)
    worst = {"t": float(t[k]), "x": float(x[k, 0]), "component": int(j), "grad": float(g[k, j]), "fd": float(fd[k, j])}
    err = float(rel.max())
    return GradCheckReport(err, worst, err <= tol, probes)


FAMILIES = {
    "affine_time_scaled": AffineTimeScaled,
    "quad_triple": QuadTriple,
    "cubic": Cubic,
    "exp_pinned": ExpPinned,
    "exp_unpinned": ExpUnpinned,
    "lq_quadratic": LQQuadratic,
}


def family_from_config(cfg: dict, grid: TimeGrid | None = None) -> ValueFamily:
    kind = cfg["family"]
    if kind in FAMILIES:
        return FAMILIES[kind]()
    if kind == "lq_offset":
        return LinearBasis.lq_offset(float(cfg["rho"]))
    if kind == "payoff_residual_mlp":
        return PayoffResidualMLP(cfg.get("strike", 1.0), cfg.get("maturity", 1.0), tuple(cfg.get("hidden", (128, 64))))
    if kind == "sectional":
        if grid is None:
            raise ValueError("sectional family needs the time grid")
        return Sectional(grid)
    raise ValueError(f"unknown value family {kind!r}")
