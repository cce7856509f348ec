"""Named families of models, coefficients, drivers and terminal conditions.

Everything a configuration file can reference lives here, so configs stay
declarative (a preset name plus numeric parameters).
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from .bsde import Driver, TerminalCondition, constant_terminal, entropic_driver, linear_driver, zero_driver
from .errors import ConfigurationError
from .forward import SdeCoefficients
from .paths import MartingaleModel, brownian_clock_rate


# ---------------------------------------------------------------------------
# martingale models


def sqrt_one_plus_m2(t, m):
    """``a(m) = diag(sqrt(1 + m_i^2))``."""
    v = np.sqrt(1.0 + m * m)
    out = np.zeros(m.shape + (m.shape[-1],))
    idx = np.arange(m.shape[-1])
    out[..., idx, idx] = v
    return out


VOLATILITIES = {"sqrt_one_plus_m2": sqrt_one_plus_m2}


def martingale_model(kind: str = "brownian", d: int = 1, m=None, volatility: str | None = None,
                     orthogonal: bool = False, orthogonal_vol: float = 1.0, Q: float = math.inf) -> MartingaleModel:
    m = (0.0,) * d if m is None else tuple(np.atleast_1d(np.asarray(m, dtype=float)).tolist())
    vol = None
    if kind == "diffusion_martingale":
        name = volatility or "sqrt_one_plus_m2"
        if name not in VOLATILITIES:
            raise ConfigurationError(f"unknown volatility preset {name!r}")
        vol = VOLATILITIES[name]
    return MartingaleModel(d=d, kind=kind, volatility=vol, m=m, orthogonal=orthogonal, orthogonal_vol=orthogonal_vol, Q=Q)


# ---------------------------------------------------------------------------
# forward coefficients


def _zeros(*tail):
    def fn(t, x, m):
        return np.zeros((x.shape[0],) + tail)

    return fn


def forward_zero(n: int = 1, d: int = 1) -> SdeCoefficients:
    return SdeCoefficients(n, d, _zeros(n, d), _zeros(n), _zeros(n, d, n), _zeros(n, d, d), _zeros(n, n), _zeros(n, d), K=0.0, m_free=True)


def forward_passthrough(d: int = 1, scale: float = 1.0) -> SdeCoefficients:
    """``dX = scale dM``."""
    eye = scale * np.eye(d)

    def sigma(t, x, m):
        return np.broadcast_to(eye, (x.shape[0], d, d)).copy()

    return SdeCoefficients(d, d, sigma, _zeros(d), _zeros(d, d, d), _zeros(d, d, d), _zeros(d, d), _zeros(d, d), K=0.0, m_free=True)


def forward_linear(d: int = 1, vol=1.0, drift: float = 0.0) -> SdeCoefficients:
    """Scalar ``dX = X (vol . dM + drift dC)``."""
    v = np.broadcast_to(np.asarray(vol, dtype=float), (d,)).copy()

    def sigma(t, x, m):
        return x[:, :, None] * v

    def b(t, x, m):
        return drift * x

    def dsx(t, x, m):
        return np.broadcast_to(v[None, None, :, None], (x.shape[0], 1, d, 1)).copy()

    def dbx(t, x, m):
        return np.full((x.shape[0], 1, 1), drift)

    return SdeCoefficients(1, d, sigma, b, dsx, _zeros(1, d, d), dbx, _zeros(1, d), K=float(np.abs(v).sum() + abs(drift)), m_free=True)


def forward_gbm(d: int = 1, vol=0.2, mu: float = 0.0) -> SdeCoefficients:
    """Geometric Brownian motion in calendar time on a Brownian basis:
    ``dX = X (mu dt + vol . dW)``; the drift is divided by ``dC/dt``."""
    v = np.broadcast_to(np.asarray(vol, dtype=float), (d,)).copy()

    def sigma(t, x, m):
        return x[:, :, None] * v

    def b(t, x, m):
        return mu * x / brownian_clock_rate(t, d)

    def dsx(t, x, m):
        return np.broadcast_to(v[None, None, :, None], (x.shape[0], 1, d, 1)).copy()

    def dbx(t, x, m):
        return np.full((x.shape[0], 1, 1), mu / float(brownian_clock_rate(t, d)))

    return SdeCoefficients(1, d, sigma, b, dsx, _zeros(1, d, d), dbx, _zeros(1, d), K=float(np.abs(v).sum()), m_free=True)


def forward_sine(s0: float = 1.0, s1: float = 0.5, c: float = 0.3, mcoef: float = 0.0) -> SdeCoefficients:
    """Smooth nonlinear scalar model ``sigma = s0 + s1 sin(x) + mcoef m``,
    ``b = c cos(x)``; used for derivative-flow checks."""

    def sigma(t, x, m):
        return (s0 + s1 * np.sin(x) + mcoef * m)[:, :, None]

    def b(t, x, m):
        return c * np.cos(x)

    def dsx(t, x, m):
        return (s1 * np.cos(x))[:, :, None, None]

    def dsm(t, x, m):
        return np.full((x.shape[0], 1, 1, 1), mcoef)

    def dbx(t, x, m):
        return (-c * np.sin(x))[:, :, None]

    return SdeCoefficients(1, 1, sigma, b, dsx, dsm, dbx, _zeros(1, 1), K=abs(s1) + abs(c) + abs(mcoef), m_free=(mcoef == 0.0))


def forward_a3_switch(T: float = 1.0, scheme: str = "log_euler") -> SdeCoefficients:
    """``sigma(t, x) = 1 + x`` for ``t >= T/2`` and 0 before; ``b = 0``.

    ``scheme="log_euler"`` steps ``1 + X`` multiplicatively,
    ``1 + X_{i+1} = (1 + X_i) exp(dM - d<M>/2)``, which keeps ``1 + X > 0``;
    plain Euler can cross ``-1`` when ``M`` has state-dependent volatility.
    """
    half = 0.5 * T

    def on(t):
        return 1.0 if t >= half - 1e-12 * max(1.0, T) else 0.0

    def sigma(t, x, m):
        return (on(t) * (1.0 + x))[:, :, None]

    def dsx(t, x, m):
        return np.full((x.shape[0], 1, 1, 1), on(t))

    def growth(t, dM, dB):
        return np.exp(on(t) * (dM - 0.5 * dB[:, :, 0]))

    def step(t, x, m, dM, dC, dB):
        return (1.0 + x) * growth(t, dM, dB) - 1.0

    def jac(t, x, m, dM, dC, dB):
        return growth(t, dM, dB)[:, :, None], np.zeros((x.shape[0], 1, 1))

    if scheme not in ("euler", "log_euler"):
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    custom = scheme == "log_euler"
    return SdeCoefficients(1, 1, sigma, _zeros(1), dsx, _zeros(1, 1, 1), _zeros(1, 1), _zeros(1, 1), K=1.0, m_free=True,
                           step=step if custom else None, step_jacobian=jac if custom else None)


def forward_a3_log(T: float = 1.0) -> SdeCoefficients:
    """The switching example in the log coordinate ``L = log(1 + X)``.

    ``dL = dM - d<M>/2`` for ``t >= T/2`` and 0 before, stepped exactly on
    the simulated increments, so ``F(X) = log(1 + X)`` becomes the identity
    payoff. Use this when ``M`` has state-dependent volatility: ``1 + X``
    itself underflows on the heavy paths.
    """
    half = 0.5 * T

    def on(t):
        return 1.0 if t >= half - 1e-12 * max(1.0, T) else 0.0

    def sigma(t, x, m):
        return np.full((x.shape[0], 1, 1), on(t))

    def step(t, x, m, dM, dC, dB):
        return x + on(t) * (dM - 0.5 * dB[:, :, 0])

    def jac(t, x, m, dM, dC, dB):
        return np.ones((x.shape[0], 1, 1)), np.zeros((x.shape[0], 1, 1))

    return SdeCoefficients(1, 1, sigma, _zeros(1), _zeros(1, 1, 1), _zeros(1, 1, 1), _zeros(1, 1), _zeros(1, 1), K=1.0, m_free=True,
                           step=step, step_jacobian=jac)


def forward_coefficients(name: str, params: dict[str, Any] | None = None, d: int = 1, T: float = 1.0) -> tuple[SdeCoefficients, tuple[float, ...]]:
    """Build a forward preset; returns the coefficients and the times at
    which they jump (to be aligned with the grid)."""
    p = dict(params or {})
    if name == "zero":
        return forward_zero(p.get("n", 1), d), ()
    if name == "passthrough":
        return forward_passthrough(d, p.get("scale", 1.0)), ()
    if name == "linear":
        return forward_linear(d, p.get("vol", 1.0), p.get("drift", 0.0)), ()
    if name == "gbm":
        return forward_gbm(d, p.get("vol", 0.2), p.get("mu", 0.0)), ()
    if name == "sine":
        return forward_sine(p.get("s0", 1.0), p.get("s1", 0.5), p.get("c", 0.3), p.get("mcoef", 0.0)), ()
    if name == "a3_switch":
        return forward_a3_switch(T, p.get("scheme", "log_euler")), (0.5 * T,)
    if name == "a3_log":
        return forward_a3_log(T), (0.5 * T,)
    raise ConfigurationError(f"unknown forward preset {name!r}")


# ---------------------------------------------------------------------------
# drivers and terminal conditions


def driver_preset(name: str, params: dict[str, Any] | None = None) -> Driver:
    p = dict(params or {})
    if name == "zero":
        return zero_driver()
    if name == "linear":
        return linear_driver(p.get("r", 0.0), p.get("c", 0.0), p.get("mu"))
    if name == "entropic":
        return entropic_driver(p.get("gamma", 1.0))
    raise ConfigurationError(f"unknown driver preset {name!r}")


def terminal_preset(name: str, params: dict[str, Any] | None = None) -> TerminalCondition:
    p = dict(params or {})
    if name == "constant":
        return constant_terminal(p.get("c", 1.0))
    if name == "identity":
        return TerminalCondition(
            lambda x, m: x[:, 0].copy(),
            bound=math.inf,
            grad_x=lambda x, m: np.eye(x.shape[1])[0] + 0 * x,
            grad_m=lambda x, m: np.zeros_like(m),
            name="identity",
        )
    if name == "clipped_identity":
        lo, hi = p.get("lo", -10.0), p.get("hi", 10.0)

        def gx(x, m):
            out = np.zeros_like(x)
            out[:, 0] = ((x[:, 0] > lo) & (x[:, 0] < hi)).astype(float)
            return out

        return TerminalCondition(lambda x, m: np.clip(x[:, 0], lo, hi), bound=max(abs(lo), abs(hi)),
                                 grad_x=gx, grad_m=lambda x, m: np.zeros_like(m), name="clipped_identity")
    if name == "tanh":
        scale = p.get("scale", 1.0)
        width = p.get("width", 1.0)
        shift = p.get("shift", 0.0)

        def gx(x, m):
            out = np.zeros_like(x)
            out[:, 0] = scale / width / np.cosh((x[:, 0] - shift) / width) ** 2
            return out

        return TerminalCondition(lambda x, m: scale * np.tanh((x[:, 0] - shift) / width), bound=abs(scale),
                                 grad_x=gx, grad_m=lambda x, m: np.zeros_like(m), name="tanh")
    if name == "log1p":

        def F(x, m):
            v = x[:, 0]
            if np.any(v <= -1.0):
                from .errors import ModelDomainError

                raise ModelDomainError("log(1 + x) needs x > -1")
            return np.log1p(v)

        def gx(x, m):
            out = np.zeros_like(x)
            out[:, 0] = 1.0 / (1.0 + x[:, 0])
            return out

        return TerminalCondition(F, bound=math.inf, grad_x=gx, grad_m=lambda x, m: np.zeros_like(m), name="log1p")
    if name == "clipped_call":
        return clipped_call(p.get("strike", 1.0), p.get("cap", 1.0))
    raise ConfigurationError(f"unknown terminal preset {name!r}")


def clipped_call(strike: float, cap: float) -> TerminalCondition:
    """Call spread ``min((x - strike)^+, cap)`` on the first state component."""

    def F(x, m):
        return np.clip(x[:, 0] - strike, 0.0, cap)

    def gx(x, m):
        out = np.zeros_like(x)
        out[:, 0] = ((x[:, 0] > strike) & (x[:, 0] < strike + cap)).astype(float)
        return out

    return TerminalCondition(F, bound=cap, grad_x=gx, grad_m=lambda x, m: np.zeros_like(m), name="clipped_call")
