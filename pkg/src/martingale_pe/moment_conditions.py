"""Test functions xi and the discrete orthogonality moments E sum xi dm.

Every test function works on arrays: ``path`` maps per-step gradients and
states along an episode to the xi process, and ``step`` does the same one
step at a time for online solvers (carrying trace state when needed).
Gradients and states have shapes (..., K, L) and (..., K, d).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .diffusion_env import EpisodeBatch, Trajectory
from .value_models import ValueFamily, ValueModel, batch_increments, m_increment


class TestFunction:
    kind = "base"
    needs_grad = False
    theta_dependent = False

    def dim(self, n_params: int) -> int:
        raise NotImplementedError

    def path(self, grads, x, dt):
        raise NotImplementedError

    def start(self, lead_shape, n_params):
        return None

    def step(self, state, grad_i, x_i, dt):
        """Return (xi_i, new_state) for one step."""
        raise NotImplementedError

    def jac_path(self, hess, x, dt):
        """d xi / d theta along the path, (..., K, L', L)."""
        L = hess.shape[-1]
        return np.zeros(hess.shape[:-2] + (self.dim(L), L))

    def jac_step(self, jstate, hess_i, x_i, dt):
        L = hess_i.shape[-1]
        return np.zeros(hess_i.shape[:-2] + (self.dim(L), L)), jstate

    def emit(self, traj: Trajectory, i: int, model: ValueModel) -> np.ndarray:
        """xi at step i of one trajectory (recomputes the path up to i)."""
        if not 0 <= i < traj.grid.K:
            raise IndexError(f"step {i} outside [0, {traj.grid.K})")
        t, x = traj.times[: i + 1], traj.states[: i + 1]
        g = model.grad_theta(t, x) if self.needs_grad else np.zeros((i + 1, model.family.n_params))
        return self.path(np.asarray(g), x, traj.grid.dt)[i]

    __test__ = False  # keep pytest from collecting the class


class GradTheta(TestFunction):
    """xi_i = dJ/dtheta(t_i, X_i): the CTD(0) test function."""

    kind = "grad_theta"
    needs_grad = True
    theta_dependent = True

    def dim(self, n_params):
        return n_params

    def path(self, grads, x, dt):
        return np.asarray(grads)

    def step(self, state, grad_i, x_i, dt):
        return grad_i, state

    def jac_path(self, hess, x, dt):
        return np.asarray(hess)

    def jac_step(self, jstate, hess_i, x_i, dt):
        return hess_i, jstate


class EligibilityTrace(TestFunction):
    """trace <- lam^dt trace + dt grad  (or lam^1 under the discrete convention).

    lam = 0 is its own branch: trace = dt * grad, i.e. dt times the CTD(0) test.
    """

    kind = "eligibility_trace"
    needs_grad = True
    theta_dependent = True

    def __init__(self, lam: float, convention: str = "continuous"):
        if not 0 <= lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if convention not in ("continuous", "discrete"):
            raise ValueError("convention is 'continuous' or 'discrete'")
        self.lam = float(lam)
        self.convention = convention

    def decay(self, dt):
        if self.lam == 0:
            return 0.0
        return self.lam**dt if self.convention == "continuous" else self.lam

    def dim(self, n_params):
        return n_params

    def _filter(self, arr, dt, axis):
        if self.lam == 0:
            return dt * np.asarray(arr)
        return lfilter([dt], [1.0, -self.decay(dt)], arr, axis=axis)

    def path(self, grads, x, dt):
        return self._filter(grads, dt, axis=-2)

    def start(self, lead_shape, n_params):
        return np.zeros(tuple(lead_shape) + (n_params,))

    def step(self, state, grad_i, x_i, dt):
        if self.lam == 0:
            new = dt * grad_i
        else:
            new = self.decay(dt) * state + dt * grad_i
        return new, new

    def jac_path(self, hess, x, dt):
        return self._filter(hess, dt, axis=-3)

    def jac_step(self, jstate, hess_i, x_i, dt):
        if jstate is None or self.lam == 0:
            new = dt * hess_i
        else:
            new = self.decay(dt) * jstate + dt * hess_i
        return new, new


class Constant(TestFunction):
    kind = "constant"

    def __init__(self, c=1.0):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def dim(self, n_params):
        return self.c.shape[0]

    def path(self, grads, x, dt):
        x = np.asarray(x)
        return np.broadcast_to(self.c, x.shape[:-1] + self.c.shape)

    def step(self, state, grad_i, x_i, dt):
        return np.broadcast_to(self.c, np.shape(x_i)[:-1] + self.c.shape), state


class TailoredReciprocal(TestFunction):
    """xi = 1 / (|x| + 1): bounded weight that damps the state-proportional noise."""

    kind = "tailored_reciprocal"

    def dim(self, n_params):
        return 1

    def path(self, grads, x, dt):
        return 1.0 / (np.abs(np.asarray(x)[..., :1]) + 1.0)

    def step(self, state, grad_i, x_i, dt):
        return 1.0 / (np.abs(np.asarray(x_i)[..., :1]) + 1.0), state


class Composite(TestFunction):
    kind = "composite"

    def __init__(self, parts):
        self.parts = list(parts)
        if not self.parts:
            raise ValueError("composite test needs at least one part")
        self.needs_grad = any(p.needs_grad for p in self.parts)
        self.theta_dependent = any(p.theta_dependent for p in self.parts)

    def dim(self, n_params):
        return sum(p.dim(n_params) for p in self.parts)

    def path(self, grads, x, dt):
        outs = [np.asarray(p.path(grads, x, dt)) for p in self.parts]
        lead = np.broadcast_shapes(*(o.shape[:-1] for o in outs))
        return np.concatenate([np.broadcast_to(o, lead + o.shape[-1:]) for o in outs], axis=-1)

    def start(self, lead_shape, n_params):
        return [p.start(lead_shape, n_params) for p in self.parts]

    def step(self, state, grad_i, x_i, dt):
        xs, new = [], []
        for p, s in zip(self.parts, state):
            xi, s2 = p.step(s, grad_i, x_i, dt)
            xs.append(np.asarray(xi))
            new.append(s2)
        lead = np.broadcast_shapes(*(o.shape[:-1] for o in xs))
        return np.concatenate([np.broadcast_to(o, lead + o.shape[-1:]) for o in xs], axis=-1), new

    def jac_path(self, hess, x, dt):
        outs = [p.jac_path(hess, x, dt) for p in self.parts]
        lead = np.broadcast_shapes(*(o.shape[:-2] for o in outs))
        return np.concatenate([np.broadcast_to(o, lead + o.shape[-2:]) for o in outs], axis=-2)

    def jac_step(self, jstate, hess_i, x_i, dt):
        jstate = jstate if jstate is not None else [None] * len(self.parts)
        outs, new = [], []
        for p, s in zip(self.parts, jstate):
            j, s2 = p.jac_step(s, hess_i, x_i, dt)
            outs.append(np.asarray(j))
            new.append(s2)
        lead = np.broadcast_shapes(*(o.shape[:-2] for o in outs))
        return np.concatenate([np.broadcast_to(o, lead + o.shape[-2:]) for o in outs], axis=-2), new


def make_test_function(cfg) -> TestFunction:
    if isinstance(cfg, str):
        cfg = {"kind": cfg}
    kind = cfg["kind"]
    if kind == "grad_theta":
        return GradTheta()
    if kind == "eligibility_trace":
        return EligibilityTrace(cfg.get("lam", 1.0), cfg.get("convention", "continuous"))
    if kind == "constant":
        return Constant(cfg.get("c", 1.0))
    if kind == "tailored_reciprocal":
        return TailoredReciprocal()
    if kind == "composite":
        return Composite([make_test_function(p) for p in cfg["parts"]])
    raise ValueError(f"unknown test function kind {kind!r}")


# --------------------------------------------------------------------------
# Moments

@dataclass(frozen=True)
class MomentEstimate:
    g: np.ndarray
    n_episodes: int
    covariance_diag: np.ndarray  # variance of each component of the batch mean

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.covariance_diag)


def xi_path(family: ValueFamily, theta, batch: EpisodeBatch, test: TestFunction, grads=None) -> np.ndarray:
    """xi at steps 0..K-1 for every episode, (n, K, L')."""
    if test.needs_grad and grads is None:
        th = np.asarray(theta, dtype=float)
        th = th[:, None, :] if th.ndim == 2 else th
        grads = family.grad(th, batch.times, batch.states)
    if grads is None:
        grads = np.zeros(batch.states.shape[:2] + (family.n_params,))
    grads = np.broadcast_to(grads, batch.states.shape[:2] + (family.n_params,))
    xi = test.path(grads[:, :-1], batch.states[:, :-1], batch.dt)
    return np.broadcast_to(xi, (len(batch), batch.grid.K, test.dim(family.n_params)))


def moment_contributions(family: ValueFamily, theta, batch: EpisodeBatch, test: TestFunction, rho: float = 0.0) -> np.ndarray:
    """Per-episode sums sum_i xi_i dm_i, shape (n, L')."""
    inc = batch_increments(family, theta, batch, rho, with_grad=test.needs_grad)
    xi = xi_path(family, theta, batch, test, grads=inc.grads)
    if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(inc.dm))):
        raise FloatingPointError("non-finite test function or increment")
    return np.einsum("nkl,nk->nl", xi, inc.dm)


def moment_estimate(model: ValueModel, batch: EpisodeBatch, test: TestFunction, rho: float = 0.0) -> MomentEstimate:
    c = moment_contributions(model.family, model.params, batch, test, rho)
    n = c.shape[0]
    g = c.mean(axis=0)
    var = c.var(axis=0, ddof=1) / n if n > 1 else np.full(g.shape, np.nan)
    return MomentEstimate(g, n, var)


def moment_residual_step(model: ValueModel, traj: Trajectory, i: int, test: TestFunction, rho: float = 0.0) -> np.ndarray:
    """xi_i dm_i for one step of one trajectory."""
    inc = m_increment(model, traj, i, rho)
    return test.emit(traj, i, model) * inc.dm
