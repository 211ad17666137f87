"""Ground truths: closed forms, brute-force minimizers and root finders, rate fits.

Nothing in here touches a sampler or a solver. Every target the experiments
compare against is produced by a function in this module and cached in the
fixtures file.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize, special

_SQRT2 = math.sqrt(2.0)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class OracleError(ValueError):
    """Raised for domain violations and for minima found on the search boundary."""


@dataclass(frozen=True)
class OracleValue:
    value: float | tuple
    provenance: str  # "closed_form" or "numeric_bruteforce"
    tolerance: float
    reference: str = ""
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in ("closed_form", "numeric_bruteforce"):
            raise OracleError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "numeric_bruteforce" and not self.record:
            raise OracleError("brute-force oracle values must carry their search record")

    def as_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.value, dtype=float))


@dataclass(frozen=True)
class RateFit:
    mesh_sizes: tuple
    errors: tuple
    slope: float
    intercept: float
    r_squared: float


# --------------------------------------------------------------------------
# Black-Scholes

def norm_cdf(z):
    """Standard normal CDF through erfc, accurate in both tails."""
    return 0.5 * special.erfc(-np.asarray(z, dtype=float) / _SQRT2)


def black_scholes(t, x, K, T, r, q, sigma):
    """European call price and Delta. Vectorized over t and x.

    At or after maturity the payoff (x - K)^+ and the indicator 1{x > K} are
    returned.
    """
    if sigma <= 0:
        raise OracleError("sigma must be positive")
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise OracleError("spot must be positive")
    tau = T - t
    live = tau > 0
    tau_s = np.where(live, tau, 1.0)
    vol = sigma * np.sqrt(tau_s)
    d_plus = (np.log(x / K) + (r - q + 0.5 * sigma**2) * tau_s) / vol
    d_minus = d_plus - vol
    disc_q = np.exp(-q * tau_s)
    price = x * disc_q * norm_cdf(d_plus) - K * np.exp(-r * tau_s) * norm_cdf(d_minus)
    delta = disc_q * norm_cdf(d_plus)
    price = np.where(live, price, np.maximum(x - K, 0.0))
    delta = np.where(live, delta, (x > K).astype(float))
    if price.ndim == 0:
        return float(price), float(delta)
    return price, delta


def black_scholes_by_integration(t, x, K, T, r, q, sigma) -> float:
    """Discounted payoff integrated against the exact log-normal law (independent check)."""
    tau = T - t
    s = sigma * math.sqrt(tau)
    m = math.log(x) + (r - q - 0.5 * sigma**2) * tau

    def integrand(z):
        return max(math.exp(m + s * z) - K, 0.0) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    z_k = (math.log(K) - m) / s
    lo, hi = max(z_k, -40.0), max(z_k, 0.0) + 40.0
    # deep in the money the window is long; pin the Gaussian bulk with a breakpoint
    val, _ = integrate.quad(integrand, lo, hi, points=[0.0] if lo < 0.0 else None,
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return math.exp(-r * tau) * val


# --------------------------------------------------------------------------
# Linear-quadratic problem

def lq_coefficients(a, b, sigma, rho, q):
    """(A, B, C) of J(x) = A x^2/2 + B x + C for OU dynamics and reward x^2/2 + q x."""
    if rho <= 0 or rho + 2 * a <= 0 or rho + a <= 0:
        raise OracleError("need rho > 0, rho + 2a > 0 and rho + a > 0")
    A = 1.0 / (rho + 2 * a)
    B = (a * b * A + q) / (rho + a)
    C = (a * b * B + 0.5 * sigma**2 * A) / rho
    return A, B, C


def lq_bellman_residual(a, b, sigma, rho, q, A, B, C, reward_scale=1.0):
    """Coefficients of x^2, x, 1 in  L J + r - rho J  for J = A x^2/2 + B x + C."""
    c2 = -a * A + 0.5 * reward_scale - 0.5 * rho * A
    c1 = a * b * A - a * B + q * reward_scale - rho * B
    c0 = a * b * B + 0.5 * sigma**2 * A - rho * C
    return np.array([c2, c1, c0])


def ctd0_theta_moments_bm_lq(theta0, rho, t, x0=0.0, learning_rate=1.0):
    """Mean and variance of the conventional CTD(0) iterate on the Brownian LQ problem.

    Continuous-time limit of theta <- theta + lr * dm with test function 1 and
    J = x^2/(2 rho) + theta. With lr = 1 this is the classical statement; a
    learning rate lr rescales the clock to lr * t.
    """
    if rho <= 0:
        raise OracleError("rho must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or learning_rate <= 0:
        raise OracleError("need t >= 0 and a positive learning rate")
    s = learning_rate * rho * t
    decay = np.exp(-s)
    mean = (2 * theta0 * rho**2 * decay + 1 - decay) / (2 * rho**2)
    var = (np.exp(-2 * s) - 1 + 2 * s + 2 * learning_rate * rho * x0**2 * (1 - np.exp(-2 * s))) / (4 * rho**4)
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


# --------------------------------------------------------------------------
# Closed forms of the one-parameter toy examples (all on W over [0, 1])

def ex1_quadratic_variation(theta):
    theta = np.asarray(theta, dtype=float)
    return theta**2 / 3 + theta + 1


def ex1_msve(theta):
    return np.asarray(theta, dtype=float) ** 2 / 12


def ex1_mstde_discrete_minimizer(dt):
    """Exact minimizer of the discretized MSTDE on the affine example.

    With c_i = theta (1 - t_i) + 1 the increment is c_{i+1} dW_i - theta dt W_{t_i},
    whose second moment sums to a quadratic in theta with minimizer -1.5/(1+dt).
    """
    return -1.5 / (1.0 + dt)


def ex2_quadratic_variation(theta0, theta1):
    """E<M>_1 for the quadratic triple family; independent of the constant term."""
    # 4 int (theta0 (1-t) + 1)^2 t dt + theta1^2 int (1-t)^2 dt
    return 4 * (theta0**2 / 12 + theta0 / 3 + 0.5) + theta1**2 / 3


def ex3_msve(theta):
    theta = np.asarray(theta, dtype=float)
    return 0.5 - 2 * theta + 3.75 * theta**2


def ex3_ml_discrete_minimizer(dt):
    """Exact minimizer of the discretized martingale loss for J = theta x^3.

    E[W_1 W_t^3] = 3 t^2 and E[W_t^6] = 15 t^3 give a ratio of left Riemann sums.
    """
    K = int(round(1.0 / dt))
    t = np.arange(K) * dt
    return float(np.sum(3 * t**2) / np.sum(15 * t**3))


def _exp_weight_integral(theta, power):
    """int_0^1 (1-t)^power e^{theta^2 t} dt by quadrature."""
    th2 = float(theta) ** 2
    val, _ = integrate.quad(lambda t: (1 - t) ** power * math.exp(th2 * t), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    return val


def ex4_msve(theta):
    """MSVE of the pinned exponential family, printed closed form."""
    theta = float(theta)
    if abs(theta) < 0.05:
        return math.exp(2 * theta) * _exp_weight_integral(theta, 2)
    t2 = theta * theta
    return -math.exp(2 * theta) * (2 - 2 * math.exp(t2) + 2 * t2 + t2 * t2) / theta**6


def ex4_msve_integral(theta):
    return math.exp(2 * float(theta)) * _exp_weight_integral(theta, 2)


def ex4_ctd0_moment(theta):
    """Continuous CTD(0) moment E int dJ/dtheta dM for the pinned exponential family (printed form)."""
    th = float(theta)
    t2 = th * th
    return math.exp(2 * th) * (2 - th + t2 - t2 * th + math.exp(t2) * (-2 + th + t2)) / th**5


def ex4_ctd0_moment_integral(theta):
    """Same moment from  -int (1-t)(1 + theta t) e^{2 theta + theta^2 t} dt."""
    th = float(theta)
    val, _ = integrate.quad(lambda t: (1 - t) * (1 + th * t) * math.exp(th * th * t), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    return -math.exp(2 * th) * val


def ex4_ctd0_discrete_moment(theta, dt):
    """Exact expectation of the discretized CTD(0) moment (left Riemann sum of the integrand)."""
    K = int(round(1.0 / dt))
    t = np.arange(K) * dt
    th = float(theta)
    return float(-np.sum((1 - t) * (1 + th * t) * np.exp((2 + t * th) * th)) * dt)


def ex4_ctd1_moment(theta):
    """Continuous CTD(1) moment with the time-integrated gradient trace (printed form)."""
    th = float(theta)
    t2 = th * th
    return math.exp(2 * th) * (6 + 2 * math.exp(t2) * (-3 + th + t2) - (-1 + th) * th * (-2 + 2 * th + t2 * th)) / th**7


def ex4_ctd1_moment_integral(theta):
    """Same moment from  -int (1-s)^2 (1 + theta s) e^{2 theta + theta^2 s} ds."""
    th = float(theta)
    val, _ = integrate.quad(lambda s: (1 - s) ** 2 * (1 + th * s) * math.exp(th * th * s), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    return -math.exp(2 * th) * val


def ex5_scale(theta):
    theta = np.asarray(theta, dtype=float)
    return (theta + 1) ** 2 + 1


def ex5_msve(theta):
    """MSVE of the unpinned exponential family, printed closed form."""
    theta = float(theta)
    c = float(ex5_scale(theta))
    if abs(theta) < 0.05:
        return c * c * _exp_weight_integral(theta, 2)
    t2 = theta * theta
    return -(2 - 2 * math.exp(t2) + 2 * t2 + t2 * t2) / theta**6 * c * c


def ex5_mspbe(theta):
    """Inverse-Gram GMM objective with the constant test function: half the squared projection."""
    return 0.5 * ex5_scale(theta) ** 2


# --------------------------------------------------------------------------
# Brute force

def _golden_section(f, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    steps = 0
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
        steps += 1
    return 0.5 * (a + b), b - a, steps


def bruteforce_minimize(
    f: Callable,
    bounds: Sequence[tuple[float, float]],
    grid_n: int = 101,
    refinements: int = 3,
    tol: float = 1e-9,
    reference: str = "",
) -> OracleValue:
    """Grid scan followed by refinements.

    One dimension: golden-section search inside the bracket around the best
    grid node, repeated ``refinements`` times on successively tighter brackets.
    Two or three dimensions: the grid is re-laid around the best node and
    shrunk by a factor grid_n / 4 per refinement.
    """
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    dim = len(bounds)
    if not 1 <= dim <= 3:
        raise OracleError("brute force supports 1 to 3 dimensions")
    if refinements < 2:
        raise OracleError("at least two refinements are required")

    axes = [np.linspace(lo, hi, grid_n) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.array([f(*p) if dim > 1 else f(p[0]) for p in pts])
    if not np.all(np.isfinite(vals)):
        raise OracleError("objective not finite on the search grid")
    best_idx = np.unravel_index(int(np.argmin(vals)), mesh[0].shape)
    for k, (lo, hi) in zip(best_idx, bounds):
        if k == 0 or k == grid_n - 1:
            raise OracleError(f"minimum on the boundary of {bounds}; widen the bounds")
    best = np.array([axes[j][best_idx[j]] for j in range(dim)])
    width = np.array([(hi - lo) / (grid_n - 1) for lo, hi in bounds])
    history = [best.tolist()]

    if dim == 1:
        g = lambda z: f(z)
        lo, hi = best[0] - width[0], best[0] + width[0]
        for _ in range(refinements):
            x, bracket, _ = _golden_section(g, lo, hi, tol)
            history.append(x)
            lo, hi = x - bracket, x + bracket
        value = float(x)
        tolerance = float(bracket)
    else:
        n_ref = 9
        for _ in range(refinements):
            axes = [np.linspace(c - w, c + w, n_ref) for c, w in zip(best, width)]
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=1)
            vals = np.array([f(*p) for p in pts])
            best = pts[int(np.argmin(vals))]
            width = width * 2.0 / (n_ref - 1)
            history.append(best.tolist())
        value = tuple(float(v) for v in best)
        tolerance = float(width.max())
    record = {"bounds": bounds, "grid_n": grid_n, "refinements": refinements, "path": history}
    return OracleValue(value, "numeric_bruteforce", tolerance, reference, record)


def bruteforce_root(f: Callable, bounds: tuple[float, float], grid_n: int = 401, xtol: float = 1e-13, reference: str = "") -> OracleValue:
    """Unique sign change on a grid, then bisection (via brentq) to ``xtol``."""
    lo, hi = map(float, bounds)
    xs = np.linspace(lo, hi, grid_n)
    ys = np.array([f(x) for x in xs])
    if not np.all(np.isfinite(ys)):
        raise OracleError("function not finite on the search grid")
    flips = np.nonzero(np.sign(ys[:-1]) * np.sign(ys[1:]) < 0)[0]
    if len(flips) != 1:
        raise OracleError(f"expected one sign change in {bounds}, found {len(flips)}")
    j = int(flips[0])
    root = optimize.brentq(f, xs[j], xs[j + 1], xtol=xtol, rtol=4 * np.finfo(float).eps)
    record = {"bounds": [lo, hi], "grid_n": grid_n, "bracket": [float(xs[j]), float(xs[j + 1])]}
    return OracleValue(float(root), "numeric_bruteforce", xtol, reference, record)


# --------------------------------------------------------------------------
# Rates

def rate_fit(mesh_errors: Sequence[tuple[float, float]]) -> RateFit:
    """Least-squares slope of log(error) against log(dt)."""
    pairs = sorted(((float(h), float(e)) for h, e in mesh_errors), key=lambda p: -p[0])
    if len(pairs) < 3:
        raise OracleError("need at least three mesh sizes")
    h = np.array([p[0] for p in pairs])
    e = np.array([p[1] for p in pairs])
    if np.any(e <= 0) or np.any(h <= 0):
        raise OracleError("mesh sizes and errors must be positive")
    lx, ly = np.log(h), np.log(e)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(tuple(h), tuple(e), float(slope), float(intercept), r2)


# --------------------------------------------------------------------------
# Target table

_OPTION = dict(K=1.0, T=1.0, r=0.01, q=0.0, sigma=0.3, x0=1.0)
_LQ = dict(a=1.0, b=1.0, sigma=0.5, rho=1.5, q=1.0)
_BM_LQ = dict(a=0.0, b=0.0, sigma=1.0, rho=1.5, q=0.0)


def _ex2_mstde():
    res = bruteforce_minimize(lambda a, b: ex2_quadratic_variation(a, b), [(-5, 5), (-5, 5)], grid_n=101, refinements=4)
    # the constant term is invisible to the quadratic variation; SGD leaves it at 0
    return OracleValue(res.value + (0.0,), "numeric_bruteforce", res.tolerance, "residual_gradient", res.record)


def _bs_price():
    p, d = black_scholes(0.0, _OPTION["x0"], _OPTION["K"], _OPTION["T"], _OPTION["r"], _OPTION["q"], _OPTION["sigma"])
    return OracleValue(p, "closed_form", 1e-12, "option pricing error baseline")


def _bs_price_integrated():
    o = _OPTION
    p = black_scholes_by_integration(0.0, o["x0"], o["K"], o["T"], o["r"], o["q"], o["sigma"])
    return OracleValue(p, "numeric_bruteforce", 1e-9, "independent check of bs_price_t0", {"method": "quad over log-normal law"})


_TABLE: dict[str, Callable[[], OracleValue]] = {
    "ex1_mstde": lambda: bruteforce_minimize(ex1_quadratic_variation, [(-5, 5)], reference="residual_gradient"),
    "ex1_true": lambda: OracleValue(0.0, "closed_form", 0.0, "ml, ctd0, ctd1"),
    "ex2_mstde": _ex2_mstde,
    "ex2_true": lambda: OracleValue((0.0, 0.0, 0.0), "closed_form", 0.0, "ml, ctd0, ctd1"),
    "ex3_msve": lambda: bruteforce_minimize(ex3_msve, [(-2, 2)], reference="ml"),
    "ex3_moment": lambda: OracleValue(0.0, "closed_form", 0.0, "ctd0, ctd1"),
    "ex4_msve": lambda: bruteforce_minimize(ex4_msve, [(-4, -0.5)], reference="ml, ctd1"),
    "ex4_ctd0": lambda: bruteforce_root(ex4_ctd0_moment, (-4.0, -0.5), reference="ctd0"),
    "ex4_ctd1": lambda: bruteforce_root(ex4_ctd1_moment, (-4.0, -0.5), reference="ctd1"),
    "ex5_msve": lambda: bruteforce_minimize(ex5_msve, [(-3, 1.0)], reference="ml"),
    "ex5_mspbe": lambda: bruteforce_minimize(ex5_mspbe, [(-3, 1.0)], reference="cgtd2"),
    "lq_theta": lambda: OracleValue(lq_coefficients(**_LQ), "closed_form", 1e-15, "clstd, cgtd2, ctd0"),
    "bm_lq_theta": lambda: OracleValue(lq_coefficients(**_BM_LQ)[2], "closed_form", 1e-15, "ctd0 with either test function"),
    "bs_price_t0": _bs_price,
    "bs_price_t0_integrated": _bs_price_integrated,
}

EXAMPLE_IDS = tuple(_TABLE)


def analytic_minimizer(example_id: str) -> OracleValue:
    try:
        return _TABLE[example_id]()
    except KeyError:
        raise OracleError(f"unknown example id {example_id!r}; known: {', '.join(EXAMPLE_IDS)}") from None


def option_setting() -> dict:
    return dict(_OPTION)


def lq_setting() -> dict:
    return dict(_LQ)


def bm_lq_setting() -> dict:
    return dict(_BM_LQ)
