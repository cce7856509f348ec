"""Exponential-utility indifference pricing and delta hedging.

A risk process ``R`` (the forward state) is priced through the utility BSDE
with the market generator; traded assets follow
``dS / S = beta dM + alpha dC`` with ``k <= d`` assets. The price is
``p = Y^F - Y^0`` on common noise and the hedge is the projection of
``Z^F - Z^0 = d_r p sigma + d_m p`` onto the traded directions.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .bsde import BsdeSolution, Driver, SolverOptions, TerminalCondition, constant_terminal
from .errors import ConfigurationError, MarketDegenerateError, ShapeError
from .forward import ForwardSolution, SdeCoefficients, simulate_forward
from .markov import FbsdeProblem, _BundleCache, _parse_node
from .paths import MartingaleModel, PathBundle, TimeGrid

logger = logging.getLogger(__name__)

# reciprocal condition number below which beta q q* beta* counts as singular
MIN_RCOND = 1e-12


@dataclass(frozen=True)
class MarketSpec:
    """Risk process, traded assets, risk aversion and payoff.

    ``beta(t, r, m) -> (P, k, d)`` and ``alpha(t, r, m) -> (P, k)`` are the
    asset volatility and drift per unit of ``dC``. ``theta_bound`` bounds
    ``|q* theta|`` and sets the size of the generator at ``z = 0``; when NaN
    it is measured on the simulated paths.
    """

    risk: SdeCoefficients
    beta: Callable
    alpha: Callable
    k: int
    kappa: float
    payoff: TerminalCondition
    theta_bound: float = math.nan
    name: str = "market"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("at least one traded asset is required")
        if self.k > self.risk.d:
            raise ConfigurationError(f"k={self.k} assets exceed d={self.risk.d} (arbitrage)")
        if not self.kappa > 0:
            raise ConfigurationError("risk aversion must be positive")

    @property
    def d(self) -> int:
        return self.risk.d

    def complete(self, model: MartingaleModel) -> bool:
        return self.k == self.d and not model.orthogonal


def _shared_rows(a: np.ndarray) -> bool:
    return a.shape[0] <= 1 or bool(np.all(a == a[:1]))


def _market_geometry(beta: np.ndarray, alpha: np.ndarray, q: np.ndarray):
    """``B = beta q``, ``theta_rot = B* (B B*)^-1 alpha`` and the projector
    ``B* (B B*)^-1 B`` onto the traded directions (rotated coordinates).

    When all paths share the same data it is computed once and broadcast.
    """
    P = beta.shape[0]
    if P > 1 and _shared_rows(beta) and _shared_rows(alpha) and _shared_rows(q):
        th, pr = _market_geometry(beta[:1], alpha[:1], q[:1])
        return np.broadcast_to(th, (P,) + th.shape[1:]), np.broadcast_to(pr, (P,) + pr.shape[1:])
    B = beta @ q
    A = B @ np.swapaxes(B, -1, -2)
    _check_invertible(A, "beta q q* beta*")
    Ainv = np.linalg.inv(A)
    Bt = np.swapaxes(B, -1, -2)
    theta = np.einsum("pdk,pkl,pl->pd", Bt, Ainv, alpha)
    proj = Bt @ Ainv @ B
    return theta, proj


def _check_invertible(A: np.ndarray, what: str) -> None:
    s = np.linalg.svd(A, compute_uv=False)
    rc = s[..., -1] / np.maximum(s[..., 0], np.finfo(float).tiny)
    if np.any(~np.isfinite(rc)) or np.any(rc < MIN_RCOND):
        raise MarketDegenerateError(f"{what} is singular at sampled states (min rcond {float(np.min(rc)):.2e})")


def build_utility_driver(market: MarketSpec, a: Optional[float] = None) -> Driver:
    """Exponential-utility generator for unconstrained strategies.

    In rotated coordinates (``z = Z q*``, ``B = beta q``)

        f = -z . theta - |theta|^2 / (2 kappa) + (kappa / 2) |z (I - Pi)|^2,

    with ``theta = B* (B B*)^-1 alpha`` the minimal market price of risk and
    ``Pi = B* (B B*)^-1 B``. The last term charges the unhedgeable part of
    ``Z`` and vanishes when the assets span every direction of ``M``.
    """
    kappa = market.kappa
    d = market.d

    def geometry(t, x, m, q):
        beta = np.asarray(market.beta(t, x, m), dtype=float)
        alpha = np.asarray(market.alpha(t, x, m), dtype=float)
        if beta.shape[-2:] != (market.k, d) or alpha.shape[-1] != market.k:
            raise ShapeError("beta must be (P, k, d) and alpha (P, k)")
        qf = np.broadcast_to(q, (x.shape[0], d, d))
        return _market_geometry(beta, alpha, qf)

    def f(t, x, m, y, z, q):
        theta, proj = geometry(t, x, m, q)
        out = -np.sum(z * theta, axis=1) - np.sum(theta * theta, axis=1) / (2 * kappa)
        if market.k < d:
            perp = z - np.einsum("pd,pde->pe", z, proj)
            out = out + 0.5 * kappa * np.sum(perp * perp, axis=1)
        return out

    def fz(t, x, m, y, z, q):
        theta, proj = geometry(t, x, m, q)
        out = -theta
        if market.k < d:
            out = out + kappa * (z - np.einsum("pd,pde->pe", z, proj))
        return out

    def fy(t, x, m, y, z, q):
        return np.zeros(np.shape(y))

    aval = a if a is not None else (market.theta_bound**2 / (2 * kappa) if np.isfinite(market.theta_bound) else 0.0)
    return Driver(
        f,
        df_dy=fy,
        df_dz=fz,
        gamma=kappa,
        kappa=kappa,
        a=float(aval),
        lipschitz=market.k == d,
        m_free=market.risk.m_free,
        name="utility-market",
    )


def theta_sup(market: MarketSpec, forward: ForwardSolution, bundle: PathBundle) -> float:
    """``max |q* theta|`` over the simulated states."""
    worst = 0.0
    t = bundle.grid.points
    for i in range(forward.start, bundle.grid.N):
        beta = np.asarray(market.beta(t[i], forward.X[:, i], forward.M[:, i]), dtype=float)
        alpha = np.asarray(market.alpha(t[i], forward.X[:, i], forward.M[:, i]), dtype=float)
        q = np.broadcast_to(bundle.q[:, i], (bundle.P, market.d, market.d))
        theta, _ = _market_geometry(beta, alpha, q)
        worst = max(worst, float(np.max(np.sqrt(np.sum(theta * theta, axis=1)))))
    return worst


# ---------------------------------------------------------------------------
# pricing


@dataclass
class PriceEstimate:
    price: float
    stderr: float
    solution_F: BsdeSolution
    solution_0: BsdeSolution
    bundle: PathBundle
    forward: ForwardSolution
    influence: np.ndarray = field(repr=False, default=None)


def pricing_problem(market: MarketSpec, model: MartingaleModel, grid: TimeGrid, P: int, seed: int,
                    opts: Optional[SolverOptions] = None, discontinuities=(), threads: int = 1) -> FbsdeProblem:
    """The utility BSDE as an :class:`FbsdeProblem`.

    The default mode is ``direct`` in complete markets (the generator is
    affine in ``z``) and ``transform`` otherwise.
    """
    if opts is None:
        opts = SolverOptions(mode="direct" if market.complete(model) else "transform")
    solver = "orthogonal" if model.orthogonal else "quadratic"
    return FbsdeProblem(model, market.risk, build_utility_driver(market), market.payoff, grid, P, seed,
                        opts=opts, solver=solver, kappa=market.kappa, discontinuities=tuple(discontinuities), threads=threads)


def _solve_pair(problem: FbsdeProblem, market: MarketSpec, bundle: PathBundle, fw: ForwardSolution):
    a = theta_sup(market, fw, bundle) ** 2 / (2 * market.kappa) if not np.isfinite(market.theta_bound) else None
    driver = build_utility_driver(market, a)
    sF = problem.solve(fw, bundle, driver=driver, terminal=market.payoff)
    s0 = problem.solve(fw, bundle, driver=driver, terminal=constant_terminal(0.0))
    return sF, s0


def indifference_price(market: MarketSpec, problem: FbsdeProblem, node, cache: Optional[_BundleCache] = None) -> PriceEstimate:
    """``p(t, r, m) = Y^F - Y^0`` with both solves on the same paths.

    The standard error is that of the paired per-path influence values.
    """
    i, r, m = _parse_node(problem, node)
    bundle = cache.get(i, m) if cache is not None else problem.bundle(i, m)
    fw = simulate_forward(problem.coeffs, bundle, (i, r, None))
    sF, s0 = _solve_pair(problem, market, bundle, fw)
    infl = sF.influence - s0.influence
    se = float(np.std(infl) / math.sqrt(problem.P))
    return PriceEstimate(sF.Y0 - s0.Y0, se, sF, s0, bundle, fw, infl)


@dataclass(frozen=True)
class PricePartials:
    price: float
    price_stderr: float
    dp_dr: np.ndarray
    dp_dm: np.ndarray
    dp_dr_stderr: np.ndarray
    dp_dm_stderr: np.ndarray


def price_partials(market: MarketSpec, problem: FbsdeProblem, node, h: float, coords: str = "rm") -> PricePartials:
    """Central differences of the price on common noise across the ``F``
    and ``0`` solves and across bumps."""
    if not h > 0:
        raise ConfigurationError("bump size must be positive")
    cache = _BundleCache(problem, size=3)
    i, r, m = _parse_node(problem, node)
    t = problem.grid.points[i]
    base = indifference_price(market, problem, (t, r, m), cache)
    n, d, P = problem.n, problem.d, problem.P
    dr, dm = np.full(n, np.nan), np.full(d, np.nan)
    sr, sm = np.full(n, np.nan), np.full(d, np.nan)

    def central(up_node, dn_node):
        up = indifference_price(market, problem, up_node, cache)
        dn = indifference_price(market, problem, dn_node, cache)
        return (up.price - dn.price) / (2 * h), float(np.std(up.influence - dn.influence) / math.sqrt(P) / (2 * h))

    if "r" in coords:
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            dr[k], sr[k] = central((t, r + e, m), (t, r - e, m))
    if "m" in coords:
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            dm[k], sm[k] = central((t, r, m + e), (t, r, m - e))
    return PricePartials(base.price, base.stderr, dr, dm, sr, sm)


# ---------------------------------------------------------------------------
# hedging


def hedge_ratio(beta: np.ndarray, q: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Amounts ``lambda`` with ``lambda beta`` the ``<M>``-projection of ``Z``:

        lambda = Z q q* beta* (beta q q* beta*)^-1.

    Works per path: ``beta`` (P, k, d), ``q`` (P, d, d), ``Z`` (P, d).
    """
    P = Z.shape[0]
    if P > 1 and _shared_rows(beta) and _shared_rows(q):
        beta, q = beta[:1], q[:1]
        qq = q @ np.swapaxes(q, -1, -2)
        bt = np.swapaxes(beta, -1, -2)
        A = beta @ qq @ bt
        _check_invertible(A, "beta q q* beta*")
        W = (qq @ bt) @ np.linalg.inv(A)
        return Z @ W[0]
    qq = q @ np.swapaxes(q, -1, -2)
    bt = np.swapaxes(beta, -1, -2)
    A = beta @ qq @ bt
    _check_invertible(A, "beta q q* beta*")
    rhs = np.einsum("pd,pde,pek->pk", Z, qq, bt)
    return np.linalg.solve(np.swapaxes(A, -1, -2), rhs[..., None])[..., 0]


def delta_hedge(market: MarketSpec, t: float, r, m, dp_dr, dp_dm, q, reduced: bool = False) -> np.ndarray:
    """Hedge amounts ``[d_r p sigma + d_m p]`` projected on the assets.

    ``reduced=True`` drops ``d_m p`` (independent-increment ``M`` with
    ``m``-free coefficients, where it vanishes).
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    m = np.atleast_2d(np.asarray(m, dtype=float))
    sig = np.asarray(market.risk.sigma(t, r, m), dtype=float)[0]
    Z = np.asarray(dp_dr, dtype=float) @ sig
    if not reduced:
        Z = Z + np.asarray(dp_dm, dtype=float)
    beta = np.asarray(market.beta(t, r, m), dtype=float)
    q = np.asarray(q, dtype=float).reshape(1, market.d, market.d)
    return hedge_ratio(beta, q, Z[None, :])[0]


def regression_policy(market: MarketSpec, estimate: PriceEstimate) -> Callable:
    """Hedge amounts from ``Z^F - Z^0`` along the solved paths.

    The returned policy is evaluated on the paths of ``estimate.bundle``.
    """
    bundle, fw = estimate.bundle, estimate.forward
    dZ = estimate.solution_F.Z - estimate.solution_0.Z
    t = bundle.grid.points

    def policy(i, r, m):
        beta = np.asarray(market.beta(t[i], r, m), dtype=float)
        q = np.broadcast_to(bundle.q[:, i], (bundle.P, market.d, market.d))
        return hedge_ratio(beta, q, dZ[:, i])

    return policy


@dataclass
class HedgeReport:
    t: float
    r: np.ndarray
    m: np.ndarray
    price: float
    price_stderr: float
    delta: np.ndarray
    pnl: np.ndarray = field(repr=False, default=None)
    pnl_mean: float = math.nan
    var_hedged: float = math.nan
    var_unhedged: float = math.nan
    certainty_equivalent: float = math.nan


def hedge_backtest(market: MarketSpec, policy: Callable, bundle: PathBundle, forward: ForwardSolution,
                   x0: float = 0.0, price: float = math.nan, delta=None) -> HedgeReport:
    """Terminal wealth ``x0 + sum lambda_i dS_i / S_i - F(R_T)`` per path.

    Asset returns are ``beta dM + alpha dC`` on the bundle increments;
    ``policy(i, r_i, m_i) -> (P, k)`` gives the amounts held over step ``i``.
    The unhedged baseline uses ``lambda = 0``.
    """
    P, N = bundle.P, bundle.grid.N
    s = forward.start
    t = bundle.grid.points
    gains = np.zeros(P)
    for i in range(s, N):
        r, m = forward.X[:, i], forward.M[:, i]
        beta = np.asarray(market.beta(t[i], r, m), dtype=float)
        alpha = np.asarray(market.alpha(t[i], r, m), dtype=float)
        dM = forward.M[:, i + 1] - m
        dC = bundle.C[:, i + 1] - bundle.C[:, i]
        ret = np.einsum("pkd,pd->pk", beta, dM) + alpha * dC[:, None]
        lam = np.asarray(policy(i, r, m), dtype=float).reshape(P, market.k)
        gains += np.sum(lam * ret, axis=1)
    FT = market.payoff(forward.X[:, -1], forward.M[:, -1])
    hedged = x0 + gains - FT
    unhedged = x0 - FT
    k = market.kappa
    ce = -float(np.log(np.mean(np.exp(-k * (hedged - hedged.max())))) / k) + float(hedged.max())
    return HedgeReport(
        t=float(t[s]),
        r=np.asarray(forward.x0[0], dtype=float),
        m=np.asarray(forward.m0[0] if np.ndim(forward.m0) > 1 else forward.m0, dtype=float),
        price=price,
        price_stderr=math.nan,
        delta=np.full(market.k, np.nan) if delta is None else np.asarray(delta, dtype=float),
        pnl=hedged,
        pnl_mean=float(np.mean(hedged)),
        var_hedged=float(np.var(hedged)),
        var_unhedged=float(np.var(unhedged)),
        certainty_equivalent=ce,
    )


def write_hedge_csv(reports: Sequence[HedgeReport], path, k: int) -> None:
    """``t,r,m,price,delta_1..delta_k,pnl_mean,pnl_var_hedged,pnl_var_unhedged``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "r", "m", "price"] + [f"delta_{j + 1}" for j in range(k)] + ["pnl_mean", "pnl_var_hedged", "pnl_var_unhedged"])
        for rep in reports:
            row = [rep.t, float(np.ravel(rep.r)[0]), float(np.ravel(rep.m)[0]), rep.price] + list(np.ravel(rep.delta)) + [rep.pnl_mean, rep.var_hedged, rep.var_unhedged]
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# market presets and oracles


def gbm_market(vol: float = 0.2, mu: float = 0.05, kappa: float = 1.0, strike: float = 1.0, cap: float = 0.5) -> MarketSpec:
    """Complete one-asset market: the risk process is the traded asset,
    ``dS = S (mu dt + vol dW)``, with a call-spread payoff."""
    from .paths import brownian_clock_rate
    from .presets import clipped_call, forward_gbm

    def beta(t, r, m):
        return np.full((r.shape[0], 1, 1), vol)

    def alpha(t, r, m):
        return np.full((r.shape[0], 1), mu / float(brownian_clock_rate(t, 1)))

    return MarketSpec(forward_gbm(1, vol, mu), beta, alpha, 1, kappa, clipped_call(strike, cap), name="gbm")


def correlated_market(vol_s: float = 0.2, mu: float = 0.05, vol_r: float = 0.25, rho: float = 0.8,
                      kappa: float = 1.0, strike: float = 1.0, cap: float = 0.5) -> MarketSpec:
    """Incomplete market on a 2-D Brownian basis: one asset driven by
    ``W_1``, a non-traded risk ``dR = R vol_r (rho dW_1 + sqrt(1 - rho^2) dW_2)``."""
    from .paths import brownian_clock_rate
    from .presets import clipped_call, forward_gbm

    risk = forward_gbm(2, [vol_r * rho, vol_r * math.sqrt(1 - rho * rho)], 0.0)

    def beta(t, r, m):
        out = np.zeros((r.shape[0], 1, 2))
        out[:, 0, 0] = vol_s
        return out

    def alpha(t, r, m):
        return np.full((r.shape[0], 1), mu / float(brownian_clock_rate(t, 2)))

    return MarketSpec(risk, beta, alpha, 1, kappa, clipped_call(strike, cap), name="correlated")


def bs_call(s, strike, vol, tau):
    """Black-Scholes call price and delta with zero rates."""
    s = np.asarray(s, dtype=float)
    if tau <= 0:
        return np.maximum(s - strike, 0.0), (s > strike).astype(float)
    sd = vol * math.sqrt(tau)
    d1 = (np.log(s / strike) + 0.5 * sd * sd) / sd
    return s * norm.cdf(d1) - strike * norm.cdf(d1 - sd), norm.cdf(d1)


def call_spread_oracle(s: float, strike: float, cap: float, vol: float, tau: float) -> tuple[float, float]:
    """Price and share delta of ``min((S_T - strike)^+, cap)`` under
    lognormal dynamics with zero rates."""
    c1, d1 = bs_call(s, strike, vol, tau)
    c2, d2 = bs_call(s, strike + cap, vol, tau)
    return float(c1 - c2), float(d1 - d2)


def risk_neutral_mc(s: float, payoff: Callable[[np.ndarray], np.ndarray], vol: float, tau: float, P: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Independent Monte Carlo price under exact lognormal sampling."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(P)
    sT = s * np.exp(vol * math.sqrt(tau) * g - 0.5 * vol * vol * tau)
    v = payoff(sT)
    return float(np.mean(v)), float(np.std(v) / math.sqrt(P))


__all__ = [
    "MarketSpec",
    "PriceEstimate",
    "PricePartials",
    "HedgeReport",
    "build_utility_driver",
    "pricing_problem",
    "indifference_price",
    "price_partials",
    "hedge_ratio",
    "delta_hedge",
    "regression_policy",
    "hedge_backtest",
    "write_hedge_csv",
    "gbm_market",
    "correlated_market",
    "call_spread_oracle",
    "risk_neutral_mc",
    "theta_sup",
]

