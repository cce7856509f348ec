"""Euler simulation of the forward SDE and of its first variation.

The forward process solves
``X_s = x + int_t^s sigma(u, X_u, M_u) dM_u + int_t^s b(u, X_u, M_u) dC_u``
on the grid of a :class:`~qfbsde.paths.PathBundle`. Derivative flows reuse the
same increments (common random numbers).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import BlowUpError, ConfigurationError, ShapeError
from .paths import PathBundle

Coef = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeCoefficients:
    """Forward coefficients, vectorised over paths.

    Shapes for ``P`` paths: ``sigma -> (P, n, d)``, ``b -> (P, n)``,
    ``dsigma_dx -> (P, n, d, n)`` (last axis differentiates),
    ``dsigma_dm -> (P, n, d, d)``, ``db_dx -> (P, n, n)``, ``db_dm -> (P, n, d)``.

    ``step(t, x, m, dM, dC, dB) -> x_next`` optionally replaces the Euler
    update (e.g. a log-Euler step that keeps a multiplicative state positive);
    ``step_jacobian`` with the same arguments returns ``(dx_next/dx (P, n, n),
    dx_next/dm (P, n, d))`` for the variational flows.
    """

    n: int
    d: int
    sigma: Coef
    b: Coef
    dsigma_dx: Optional[Coef] = None
    dsigma_dm: Optional[Coef] = None
    db_dx: Optional[Coef] = None
    db_dm: Optional[Coef] = None
    K: float = float("nan")
    m_free: bool = False
    step: Optional[Callable] = None
    step_jacobian: Optional[Callable] = None

    @property
    def has_partials(self) -> bool:
        return None not in (self.dsigma_dx, self.dsigma_dm, self.db_dx, self.db_dm)

    def check_partials(self, t: float, x: np.ndarray, m: np.ndarray, eps: float = 1e-6, rtol: float = 1e-4) -> float:
        """Finite-difference spot check of the supplied partials.

        Returns the worst relative discrepancy and raises
        :class:`ConfigurationError` when it exceeds ``rtol``.
        """
        if not self.has_partials:
            raise ConfigurationError("partial derivatives were not supplied")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = np.atleast_2d(np.asarray(m, dtype=float))
        worst = 0.0
        pairs = [
            (self.sigma, self.dsigma_dx, 0),
            (self.sigma, self.dsigma_dm, 1),
            (self.b, self.db_dx, 0),
            (self.b, self.db_dm, 1),
        ]
        for fn, dfn, which in pairs:
            analytic = np.asarray(dfn(t, x, m), dtype=float)
            width = x.shape[1] if which == 0 else m.shape[1]
            for k in range(width):
                e = np.zeros(width)
                e[k] = eps
                if which == 0:
                    up, dn = fn(t, x + e, m), fn(t, x - e, m)
                else:
                    up, dn = fn(t, x, m + e), fn(t, x, m - e)
                fd = (np.asarray(up) - np.asarray(dn)) / (2 * eps)
                err = np.abs(fd - analytic[..., k])
                scale = np.maximum(np.abs(analytic[..., k]), 1.0)
                worst = max(worst, float(np.max(err / scale)))
        if worst > rtol:
            raise ConfigurationError(f"supplied partials disagree with finite differences (rel err {worst:.2e})")
        return worst


@dataclass(frozen=True)
class ForwardSolution:
    """Forward paths started at grid index ``start`` from ``(x, m)``.

    ``M`` is the martingale state ``m + M - M_t`` seen by the coefficients;
    it aliases the bundle array when no shift was needed. Values before
    ``start`` are held at the initial state.
    """

    X: np.ndarray
    M: np.ndarray
    start: int
    x0: np.ndarray
    m0: np.ndarray
    Dx: Optional[np.ndarray] = None
    Dm: Optional[np.ndarray] = None
    m_free: bool = False


def _per_path(v, P: int, width: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim <= 1:
        v = np.atleast_1d(v)
        if v.shape != (width,):
            raise ShapeError(f"{name} has shape {v.shape}, expected ({width},)")
        return np.broadcast_to(v, (P, width))
    if v.shape != (P, width):
        raise ShapeError(f"{name} has shape {v.shape}, expected ({P}, {width})")
    return v


def _shifted_M(bundle: PathBundle, start: int, m) -> tuple[np.ndarray, np.ndarray]:
    base = bundle.M[:, start]
    if m is None:
        return bundle.M, np.array(base)
    m = _per_path(m, bundle.P, bundle.d, "m")
    shift = m - base
    if not np.any(shift):
        return bundle.M, np.array(base)
    out = bundle.M + shift[:, None, :]
    out.setflags(write=False)
    return out, np.array(m)


def _check_finite(arr: np.ndarray, step: int, what: str) -> None:
    ok = np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    if not ok.all():
        p = int(np.argmin(ok))
        raise BlowUpError(f"non-finite {what} on path {p} at step {step}", path=p, step=step)


def simulate_forward(coeffs: SdeCoefficients, bundle: PathBundle, start=None) -> ForwardSolution:
    """Euler scheme ``X_{i+1} = X_i + sigma_i dM_i + b_i dC_i`` on ``[t, T]``.

    ``start`` is ``(t_index, x, m)``; ``x`` and ``m`` may be shared vectors or
    per-path arrays, ``m=None`` keeps the bundle's own martingale values.
    Starting at ``T`` returns the constant solution.
    """
    if start is None:
        start = (bundle.start, np.zeros(coeffs.n), None)
    s, x, m = start
    s = int(s)
    if coeffs.d != bundle.d:
        raise ShapeError(f"coefficients expect d={coeffs.d}, bundle has d={bundle.d}")
    if not bundle.start <= s <= bundle.grid.N:
        raise ShapeError(f"start index {s} is outside the simulated range of the bundle")
    P, N, n = bundle.P, bundle.grid.N, coeffs.n
    x0 = np.array(_per_path(x, P, n, "x"))
    M, m0 = _shifted_M(bundle, s, m)
    t = bundle.grid.points

    X = np.empty((P, N + 1, n))
    X[:, : s + 1] = x0[:, None, :]
    for i in range(s, N):
        xi, mi = X[:, i], M[:, i]
        sig = np.asarray(coeffs.sigma(t[i], xi, mi), dtype=float)
        drift = np.asarray(coeffs.b(t[i], xi, mi), dtype=float)
        if sig.shape[-2:] != (n, coeffs.d):
            raise ShapeError(f"sigma returned shape {sig.shape}, expected (P, {n}, {coeffs.d})")
        dM = M[:, i + 1] - mi
        dC = bundle.C[:, i + 1] - bundle.C[:, i]
        if coeffs.step is not None:
            dB = bundle.bracketMM[:, i + 1] - bundle.bracketMM[:, i]
            nxt = np.asarray(coeffs.step(t[i], xi, mi, dM, dC, dB), dtype=float)
        else:
            nxt = xi + np.einsum("...ij,...j->...i", sig, dM) + drift * dC[:, None]
        _check_finite(nxt, i + 1, "forward state")
        X[:, i + 1] = nxt
    X.setflags(write=False)
    return ForwardSolution(X=X, M=M, start=s, x0=x0, m0=m0, m_free=coeffs.m_free)


def simulate_variational(coeffs: SdeCoefficients, bundle: PathBundle, forward: ForwardSolution):
    """Euler scheme for the first-variation flows ``(Dx, Dm)``.

    ``Dx`` starts at the identity and ``Dm`` at zero; both are driven by the
    increments that produced ``forward``.
    """
    if not coeffs.has_partials:
        raise ConfigurationError("variational flows need dsigma_dx, dsigma_dm, db_dx and db_dm")
    P, N, n, d = bundle.P, bundle.grid.N, coeffs.n, coeffs.d
    s = forward.start
    X, M = forward.X, forward.M
    t = bundle.grid.points
    Dx = np.zeros((P, N + 1, n, n))
    Dm = np.zeros((P, N + 1, n, d))
    Dx[:, : s + 1] = np.eye(n)
    for i in range(s, N):
        xi, mi = X[:, i], M[:, i]
        dM = M[:, i + 1] - mi
        dC = (bundle.C[:, i + 1] - bundle.C[:, i])[:, None, None]
        if coeffs.step is not None:
            if coeffs.step_jacobian is None:
                raise ConfigurationError("a custom step needs step_jacobian for the variational flows")
            dB = bundle.bracketMM[:, i + 1] - bundle.bracketMM[:, i]
            Jx, Jm = coeffs.step_jacobian(t[i], xi, mi, dM, dC[:, 0, 0], dB)
            Dx[:, i + 1] = Jx @ Dx[:, i]
            Dm[:, i + 1] = Jx @ Dm[:, i] + Jm
            _check_finite(Dx[:, i + 1], i + 1, "variational flow")
            continue
        sx = np.asarray(coeffs.dsigma_dx(t[i], xi, mi), dtype=float)
        sm = np.asarray(coeffs.dsigma_dm(t[i], xi, mi), dtype=float)
        bx = np.asarray(coeffs.db_dx(t[i], xi, mi), dtype=float)
        bm = np.asarray(coeffs.db_dm(t[i], xi, mi), dtype=float)
        A = np.einsum("...iaj,...a->...ij", sx, dM) + bx * dC
        src = np.einsum("...iak,...a->...ik", sm, dM) + bm * dC
        Dx[:, i + 1] = Dx[:, i] + A @ Dx[:, i]
        Dm[:, i + 1] = Dm[:, i] + A @ Dm[:, i] + src
        _check_finite(Dx[:, i + 1], i + 1, "variational flow")
    Dx.setflags(write=False)
    Dm.setflags(write=False)
    return Dx, Dm


def with_variational(coeffs: SdeCoefficients, bundle: PathBundle, forward: ForwardSolution) -> ForwardSolution:
    Dx, Dm = simulate_variational(coeffs, bundle, forward)
    return replace(forward, Dx=Dx, Dm=Dm)


def bump_restart(coeffs: SdeCoefficients, bundle: PathBundle, start, bump: tuple[int, float]) -> ForwardSolution:
    """Re-simulate from ``(x, m) + h e_k`` on the bundle's own increments.

    ``bump = (k, h)`` with ``k`` indexing the stacked vector ``(x, m)``.
    Bumping ``m`` shifts the martingale level only; models whose dynamics
    depend on ``m`` must be regenerated with the same seed instead.
    """
    k, h = bump
    if h == 0:
        raise ConfigurationError("bump size must be non-zero")
    s, x, m = start
    n = coeffs.n
    if m is None:
        m = np.array(bundle.M[:, s])
    x = np.array(np.asarray(x, dtype=float), copy=True)
    m = np.array(np.asarray(m, dtype=float), copy=True)
    if not 0 <= k < n + coeffs.d:
        raise ShapeError(f"bump coordinate {k} out of range")
    if k < n:
        x[..., k] += h
    else:
        m[..., k - n] += h
    return simulate_forward(coeffs, bundle, (s, x, m))
