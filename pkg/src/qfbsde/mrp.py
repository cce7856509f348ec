"""BSDEs with an orthogonal martingale ``N`` and the ``kappa/2 d<L>`` term.

With ``L = int U dN`` the equation

    Y_t = F - int Z dM - int U dN + int f(., Y, Z q*) dC + kappa/2 int U^2 d<N>

is rewritten on the augmented basis ``(M, N)`` with clock
``C~ = arctan(S~)``, ``S~ = sum_i <M^i> + <N>``, weights
``phi_1 = dS / dS~`` and ``phi_2 = d<N> / dS~``, density
``q~ = diag(q sqrt(phi_1), sqrt(phi_2))`` and generator
``h = f~ phi_1 + g`` where ``f~`` rescales the first block by
``phi_1^(-1/2)`` and multiplies by ``dC / (phi_1 dC~)`` and
``g(u) = kappa/2 u^2 dS~ / dC~``. On the grid this gives
``h dC~ = f dC + kappa/2 U^2 d<N>`` exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .bsde import (
    BsdeSolution,
    Driver,
    SolverOptions,
    TerminalCondition,
    _Audit,
    _Context,
    _compact,
    _feature_fn,
    _solve_quadratic_ctx,
    _use_m,
    rho,
)
from .errors import InconsistencyError, ShapeError
from .forward import ForwardSolution
from .paths import PathBundle
from .regression import RegressionBasis

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MrpTransform:
    """Augmented clock data; step arrays have N entries, level arrays N + 1.

    Arrays that coincide across paths are kept with a leading axis of 1.
    """

    C_tilde: np.ndarray
    S_tilde: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    q_tilde: np.ndarray
    dC: np.ndarray
    dC_tilde: np.ndarray
    dN_bracket: np.ndarray
    kappa: float
    driver: Driver

    def h(self, i: int, t, x, m, y, zt, q) -> np.ndarray:
        """Augmented generator per unit of ``dC~`` at step ``i``.

        ``zt`` is the rotated augmented control ``Z~ q~*`` (P, d + 1) and
        ``q`` the density of ``M`` against ``C``.
        """
        d = zt.shape[1] - 1
        p1 = self.phi1[:, i]
        dCt = self.dC_tilde[:, i]
        live = (p1 > 0) & (dCt > 0)
        s1 = np.sqrt(np.where(live, p1, 1.0))
        z = zt[:, :d] / s1[:, None]
        ratio = np.where(live, self.dC[:, i] / np.where(live, p1 * dCt, 1.0), 0.0)
        ftilde = self.driver.f(t, x, m, y, z, q) * ratio
        # u = U sqrt(phi_2), so g carries U^2 d<N> / dC~
        u = zt[:, d]
        g = np.where(dCt > 0, 0.5 * self.kappa * u * u * (self.S_tilde[:, i + 1] - self.S_tilde[:, i]) / np.where(dCt > 0, dCt, 1.0), 0.0)
        return np.where(live, ftilde * p1, 0.0) + g


def mrp_transform(bundle: PathBundle, driver: Driver, kappa: Optional[float] = None) -> MrpTransform:
    """Compute ``C~, phi_1, phi_2, q~`` and the generator ``h`` of the
    augmented problem."""
    if not bundle.has_orthogonal or bundle.bracketNN is None:
        raise ShapeError("the bundle has no orthogonal component")
    kappa = driver.kappa if kappa is None else float(kappa)
    B, _ = _compact(bundle.bracketMM)
    NN, _ = _compact(bundle.bracketNN)
    C, _ = _compact(bundle.C)
    q, _ = _compact(bundle.q)
    S = np.trace(B, axis1=-2, axis2=-1)
    rows = max(S.shape[0], NN.shape[0])
    S = np.broadcast_to(S, (rows, S.shape[1]))
    NN = np.broadcast_to(NN, (rows, NN.shape[1]))
    St = S + NN
    Ct = np.arctan(St)
    dS = np.diff(S, axis=1)
    dN = np.diff(NN, axis=1)
    dSt = np.diff(St, axis=1)
    if np.any(dS < 0) or np.any(dN < 0):
        raise InconsistencyError("bracket increments are negative")
    moving = dSt > 0
    safe = np.where(moving, dSt, 1.0)
    phi1 = np.where(moving, dS / safe, 0.0)
    phi2 = np.where(moving, dN / safe, 0.0)
    if np.any(phi1 < 0) or np.any(phi2 < 0):
        raise InconsistencyError("negative phi from corrupted brackets")
    d = B.shape[-1]
    qrows = max(q.shape[0], rows)
    qt = np.zeros((qrows, B.shape[1], d + 1, d + 1))
    p1 = np.concatenate([phi1, phi1[:, -1:]], axis=1)
    p2 = np.concatenate([phi2, phi2[:, -1:]], axis=1)
    qt[:, :, :d, :d] = q * np.sqrt(p1)[:, :, None, None]
    qt[:, :, d, d] = np.sqrt(p2)
    Cc = np.broadcast_to(C, (rows, C.shape[1]))
    return MrpTransform(
        C_tilde=Ct,
        S_tilde=St,
        phi1=phi1,
        phi2=phi2,
        q_tilde=qt,
        dC=np.diff(Cc, axis=1),
        dC_tilde=np.diff(Ct, axis=1),
        dN_bracket=dN,
        kappa=kappa,
        driver=driver,
    )


def _augmented_context(forward: ForwardSolution, bundle: PathBundle, tr: MrpTransform, use_m: bool, use_n: bool) -> _Context:
    P = bundle.P
    d = bundle.d
    M = forward.M
    Nn = bundle.N_orth
    B, _ = _compact(bundle.bracketMM)
    dNb = tr.dN_bracket
    dCt = tr.dC_tilde

    def dM(i):
        return np.concatenate([M[:, i + 1] - M[:, i], (Nn[:, i + 1] - Nn[:, i])[:, None]], axis=1)

    def dB(i):
        rows = max(B.shape[0], dNb.shape[0])
        out = np.zeros((rows, d + 1, d + 1))
        out[:, :d, :d] = B[:, i + 1] - B[:, i]
        out[:, d, d] = dNb[:, i]
        return np.broadcast_to(out, (P, d + 1, d + 1))

    extra = [lambda i: Nn[:, i]] if use_n else []
    return _Context(
        t=bundle.grid.points,
        s=forward.start,
        N=bundle.grid.N,
        P=P,
        X=forward.X,
        M=M,
        q=np.broadcast_to(tr.q_tilde, (P,) + tr.q_tilde.shape[1:]),
        dM=dM,
        dB=dB,
        dC=lambda i: np.broadcast_to(dCt[:, i], (P,)),
        features=_feature_fn(forward.X, M, extra, use_m),
    )


def _h_path_driver(tr: MrpTransform, ctx: _Context, bundle: PathBundle, K: float, R: float, audit: _Audit):
    t, X, M = ctx.t, ctx.X, ctx.M
    q = bundle.q
    qt = tr.q_tilde
    d = bundle.d

    def fn(i, y, Zt):
        qi = qt[:, i]
        zt = np.einsum("pj,pij->pi", Zt, np.broadcast_to(qi, (Zt.shape[0],) + qi.shape[1:]))
        if np.isfinite(K):
            audit.hit("K", np.abs(y) > K)
            y = rho(y, K)
        if np.isfinite(R):
            # clip the original rotated control Z q* at R
            p1 = tr.phi1[:, i]
            s1 = np.sqrt(np.where(p1 > 0, p1, 1.0))
            nz = np.sqrt(np.sum(zt[:, :d] ** 2, axis=1)) / s1
            over = nz > R
            audit.hit("R", over)
            if np.any(over):
                zt = zt.copy()
                zt[:, :d] *= np.where(over, R / np.where(over, nz, 1.0), 1.0)[:, None]
        return tr.h(i, t[i], X[:, i], M[:, i], y, zt, q[:, i])

    return fn


def solve_quadratic_with_orthogonal(
    driver: Driver,
    terminal: TerminalCondition,
    forward: ForwardSolution,
    bundle: PathBundle,
    kappa: Optional[float] = None,
    basis: Optional[RegressionBasis] = None,
    opts: Optional[SolverOptions] = None,
) -> BsdeSolution:
    """Solve on the augmented basis ``(M, N)`` and split ``Z~ = (Z, U)``.

    ``solution.residual`` holds the grid residual of the original equation
    per path and step.
    """
    opts = opts or SolverOptions()
    if basis is not None:
        opts = replace(opts, basis=basis)
    kappa = driver.kappa if kappa is None else float(kappa)
    tr = mrp_transform(bundle, driver, kappa)
    use_m = _use_m(opts, driver.m_free, terminal, forward, bundle)
    ctx = _augmented_context(forward, bundle, tr, use_m, terminal.uses_orthogonal)
    if terminal.uses_orthogonal:
        FT = terminal(forward.X[:, -1], np.concatenate([forward.M[:, -1], bundle.N_orth[:, -1:]], axis=1))
    else:
        FT = terminal(forward.X[:, -1], forward.M[:, -1])
    tr_driver = replace(driver, kappa=kappa)

    def factory(K, R, audit):
        return _h_path_driver(tr, ctx, bundle, K, R, audit)

    sol = _solve_quadratic_ctx(tr_driver, terminal, FT, ctx, bundle, opts, factory, kappa, d_split=bundle.d, dim=bundle.d + 1)
    sol.residual = original_residual(sol, forward, bundle, driver, kappa)
    sol.transform = tr
    return sol


def original_residual(sol: BsdeSolution, forward: ForwardSolution, bundle: PathBundle, driver: Driver, kappa: float) -> np.ndarray:
    """Per-step residual of the untransformed equation on the grid.

    ``r_i = Y_i - Y_{i+1} + Z_i dM_i + U_i dN_i - f_i dC_i - kappa/2 U_i^2 d<N>_i``.
    """
    P, N = bundle.P, bundle.grid.N
    s = sol.start
    t = bundle.grid.points
    out = np.zeros((P, N))
    q = bundle.q
    for i in range(s, N):
        dM = forward.M[:, i + 1] - forward.M[:, i]
        dN = bundle.N_orth[:, i + 1] - bundle.N_orth[:, i]
        dC = bundle.C[:, i + 1] - bundle.C[:, i]
        dNb = bundle.bracketNN[:, i + 1] - bundle.bracketNN[:, i]
        qi = np.broadcast_to(q[:, i], (P,) + q.shape[2:])
        z = np.einsum("pj,pij->pi", sol.Z[:, i], qi)
        f = driver.f(t[i], forward.X[:, i], forward.M[:, i], sol.Y[:, i], z, qi)
        U = sol.U_orth[:, i]
        out[:, i] = sol.Y[:, i] - sol.Y[:, i + 1] + np.sum(sol.Z[:, i] * dM, axis=1) + U * dN - f * dC - 0.5 * kappa * U**2 * dNb
    return out


def generator_identity_gap(tr: MrpTransform, bundle: PathBundle, Y, Z, U, x=None) -> float:
    """Largest relative gap between ``sum f dC + kappa/2 sum U^2 d<N>`` and
    ``sum h dC~`` over paths."""
    P, N = Y.shape[0], bundle.grid.N
    t = bundle.grid.points
    d = bundle.d
    lhs = np.zeros(P)
    rhs = np.zeros(P)
    x = np.zeros((P, N + 1, 1)) if x is None else x
    q = bundle.q
    for i in range(N):
        qi = np.broadcast_to(q[:, i], (P, d, d))
        z = np.einsum("pj,pij->pi", Z[:, i], qi)
        f = tr.driver.f(t[i], x[:, i], bundle.M[:, i], Y[:, i], z, qi)
        lhs += f * tr.dC[:, i] + 0.5 * tr.kappa * U[:, i] ** 2 * tr.dN_bracket[:, i]
        Zt = np.concatenate([Z[:, i], U[:, i : i + 1]], axis=1)
        qti = np.broadcast_to(tr.q_tilde[:, i], (P, d + 1, d + 1))
        zt = np.einsum("pj,pij->pi", Zt, qti)
        rhs += tr.h(i, t[i], x[:, i], bundle.M[:, i], Y[:, i], zt, qi) * tr.dC_tilde[:, i]
    scale = np.maximum(np.abs(lhs), 1e-300)
    return float(np.max(np.abs(lhs - rhs) / scale))


__all__ = [
    "MrpTransform",
    "mrp_transform",
    "solve_quadratic_with_orthogonal",
    "original_residual",
    "generator_identity_gap",
]
