import math

import numpy as np
import pytest

from qfbsde.errors import ConfigurationError, MarketDegenerateError
from qfbsde.hedging import (
    MarketSpec,
    build_utility_driver,
    call_spread_oracle,
    correlated_market,
    delta_hedge,
    gbm_market,
    hedge_backtest,
    hedge_ratio,
    indifference_price,
    pricing_problem,
    regression_policy,
    risk_neutral_mc,
    write_hedge_csv,
)
from qfbsde.paths import TimeGrid
from qfbsde.presets import martingale_model


def test_call_spread_oracle_matches_mc():
    price, delta = call_spread_oracle(1.0, 1.0, 0.5, 0.2, 1.0)
    mc, se = risk_neutral_mc(1.0, lambda s: np.clip(s - 1.0, 0.0, 0.5), 0.2, 1.0, P=400_000, seed=3)
    assert abs(mc - price) < 5 * se
    assert 0.4 < delta < 0.6


def test_hedge_ratio_identity_density(rng):
    beta = rng.normal(size=(4, 2, 3))
    Z = rng.normal(size=(4, 3))
    q = np.broadcast_to(np.eye(3), (4, 3, 3))
    lam = hedge_ratio(beta, q, Z)
    for p in range(4):
        b = beta[p]
        expect = Z[p] @ b.T @ np.linalg.inv(b @ b.T)
        assert np.allclose(lam[p], expect)


def test_hedge_ratio_projects_onto_traded_span(rng):
    # lambda beta q is the q q*-weighted projection of Z q on the span of beta q
    beta = rng.normal(size=(1, 1, 2))
    q = np.array([[[1.0, 0.3], [0.3, 2.0]]])
    Z = rng.normal(size=(1, 2))
    lam = hedge_ratio(beta, q, Z)
    resid = Z @ q[0] - lam @ beta[0] @ q[0]
    assert np.max(np.abs(resid @ (beta[0] @ q[0]).T)) < 1e-12


def test_degenerate_market_detected():
    beta = np.zeros((1, 1, 1))
    with pytest.raises(MarketDegenerateError):
        hedge_ratio(beta, np.ones((1, 1, 1)), np.ones((1, 1)))


def test_market_validation():
    mk = gbm_market()
    with pytest.raises(ConfigurationError):
        MarketSpec(mk.risk, mk.beta, mk.alpha, 2, 1.0, mk.payoff)
    with pytest.raises(ConfigurationError):
        MarketSpec(mk.risk, mk.beta, mk.alpha, 1, 0.0, mk.payoff)


def test_utility_driver_at_zero_control():
    mk = gbm_market(vol=0.2, mu=0.05, kappa=2.0)
    drv = build_utility_driver(mk)
    assert drv.lipschitz
    P = 3
    x = np.ones((P, 1))
    m = np.zeros((P, 1))
    q = np.ones((P, 1, 1))
    theta = mk.alpha(0.0, x, m)[:, 0] / 0.2
    f0 = drv.f(0.0, x, m, np.zeros(P), np.zeros((P, 1)), q)
    assert np.allclose(f0, -theta**2 / (2 * 2.0))


def test_complete_market_price_and_delta_small():
    grid = TimeGrid.uniform(1.0, 50)
    mk = gbm_market(kappa=1.0)
    pb = pricing_problem(mk, martingale_model(), grid, 20_000, 11)
    est = indifference_price(mk, pb, (0.0, [1.0], [0.0]))
    oracle, delta = call_spread_oracle(1.0, 1.0, 0.5, 0.2, 1.0)
    assert abs(est.price - oracle) < 5 * est.stderr + 2e-3
    lam = delta_hedge(mk, 0.0, [1.0], [0.0], np.array([delta]), np.array([0.0]), np.eye(1), reduced=True)
    assert np.isclose(lam[0], delta)


def test_incomplete_backtest_reduces_variance(tmp_path):
    grid = TimeGrid.uniform(1.0, 25)
    mk = correlated_market(kappa=1.0)
    pb = pricing_problem(mk, martingale_model(d=2), grid, 5000, 3)
    est = indifference_price(mk, pb, (0.0, [1.0], [0.0, 0.0]))
    rep = hedge_backtest(mk, regression_policy(mk, est), est.bundle, est.forward, x0=est.price, price=est.price)
    assert rep.var_hedged < rep.var_unhedged
    out = tmp_path / "hedge.csv"
    write_hedge_csv([rep], out, mk.k)
    assert out.read_text().splitlines()[0] == "t,r,m,price,delta_1,pnl_mean,pnl_var_hedged,pnl_var_unhedged"
