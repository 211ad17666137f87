"""Scalar objectives estimated on an episode batch.

Each estimate is a plain batch mean of per-episode contributions; the
reported standard error comes from the episode-level sample variance.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .diffusion_env import EpisodeBatch
from .moment_conditions import Composite, TestFunction, moment_contributions, xi_path
from .value_models import ValueModel, batch_increments

GRAM_COND_LIMIT = 1e12


class GramSingularError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        super().__init__(f"Gram matrix is singular or ill-conditioned (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    n_episodes: int
    std_error: float


def _summarize(per_episode: np.ndarray) -> ObjectiveValue:
    n = per_episode.shape[0]
    se = float(per_episode.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return ObjectiveValue(float(per_episode.mean()), n, se)


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite {what}")


def mstde(model: ValueModel, batch: EpisodeBatch) -> ObjectiveValue:
    """1/2 sum (dm/dt)^2 dt per episode, undiscounted."""
    inc = batch_increments(model.family, model.params, batch, 0.0, with_grad=False)
    _check_finite(inc.dm, "increment")
    dt = batch.dt
    return _summarize(0.5 * np.sum((inc.dm / dt) ** 2, axis=1) * dt)


def martingale_loss(model: ValueModel, batch: EpisodeBatch, rho: float = 0.0) -> ObjectiveValue:
    """1/2 sum (G_i - e^{-rho t_i} J_i)^2 dt with G the (discounted) reward-to-go."""
    if not np.all(np.isfinite(batch.terminal)):
        raise ValueError("martingale loss needs a finite horizon with stored terminal values")
    G = batch.reward_to_go(rho)
    t = batch.times[:-1]
    J = model.family.value(model.params, t, batch.states[:, :-1])
    if rho:
        J = J * np.exp(-rho * t)
    return _summarize(0.5 * np.sum((G - J) ** 2, axis=1) * batch.dt)


def msve(model: ValueModel, batch: EpisodeBatch, oracle: Callable, time_average: bool = False) -> ObjectiveValue:
    """sum (J_true - J^theta)^2 dt over the grid; optionally divided by the window length."""
    t, x = batch.times[:-1], batch.states[:, :-1]
    err = np.asarray(oracle(t, x), dtype=float) - model.family.value(model.params, t, x)
    per = np.sum(err**2, axis=1) * batch.dt
    if time_average:
        per = per / (batch.grid.T - batch.grid.t0)
    return _summarize(per)


def realized_qv(model: ValueModel, batch: EpisodeBatch) -> ObjectiveValue:
    inc = batch_increments(model.family, model.params, batch, 0.0, with_grad=False)
    _check_finite(inc.dm, "increment")
    return _summarize(np.sum(inc.dm**2, axis=1))


def gram_matrix(model: ValueModel, batch: EpisodeBatch, test: TestFunction, ridge: float = 0.0) -> np.ndarray:
    xi = xi_path(model.family, model.params, batch, test)
    G = np.einsum("nki,nkj->ij", xi, xi) * batch.dt / len(batch)
    if ridge:
        G = G + ridge * np.eye(G.shape[0])
    cond = np.linalg.cond(G) if np.all(np.isfinite(G)) else np.inf
    if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
        raise GramSingularError(float(cond))
    return G


def _quadratic_form(c: np.ndarray, Ag: np.ndarray, value: float) -> ObjectiveValue:
    n = c.shape[0]
    if n > 1:
        cov = np.cov(c, rowvar=False, ddof=1).reshape(c.shape[1], c.shape[1]) / n
        se = float(math.sqrt(max(Ag @ cov @ Ag, 0.0)))
    else:
        se = 0.0
    return ObjectiveValue(float(value), n, se)


def gmm_objective(
    model: ValueModel,
    batch: EpisodeBatch,
    test: TestFunction,
    weighting: str = "identity",
    rho: float = 0.0,
    ridge: float = 0.0,
) -> ObjectiveValue:
    """1/2 g^T A g with g the moment estimate and A = I or the inverse Gram matrix.

    The standard error is a delta-method figure that treats A as fixed.
    """
    c = moment_contributions(model.family, model.params, batch, test, rho)
    g = c.mean(axis=0)
    if weighting == "identity":
        A = np.eye(g.shape[0])
    elif weighting == "inverse_gram":
        A = np.linalg.inv(gram_matrix(model, batch, test, ridge))
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    Ag = A @ g
    return _quadratic_form(c, Ag, 0.5 * g @ Ag)


def mspbe(model: ValueModel, batch: EpisodeBatch, tests: Sequence[TestFunction], rho: float = 0.0, ridge: float = 0.0) -> ObjectiveValue:
    """Half squared norm of the projected moment: 1/2 |L^{-1} g|^2 with Gram = L L^T.

    Computed through a Cholesky factor rather than an explicit inverse, so it
    is an independent route to gmm_objective(..., "inverse_gram").
    """
    test = tests[0] if len(tests) == 1 else Composite(tests)
    c = moment_contributions(model.family, model.params, batch, test, rho)
    g = c.mean(axis=0)
    G = gram_matrix(model, batch, test, ridge)
    Lc = linalg.cholesky(G, lower=True)
    z = linalg.solve_triangular(Lc, g, lower=True)
    Ag = linalg.solve_triangular(Lc.T, z, lower=False)
    return _quadratic_form(c, Ag, 0.5 * z @ z)


def objective_sweep(fn: Callable[[np.ndarray], ObjectiveValue], thetas) -> list[tuple]:
    rows = []
    for th in thetas:
        th = np.atleast_1d(np.asarray(th, dtype=float))
        ov = fn(th)
        rows.append(tuple(th.tolist()) + (ov.value, ov.std_error))
    return rows


def write_sweep_csv(rows, path, n_params: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta{j}" for j in range(n_params)] + ["value", "std_error"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
