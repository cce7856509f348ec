"""Backward solvers: least-squares Monte Carlo with Picard iteration.

Sign convention (matching the forward time direction):

    Y_t = F(X_T, M_T) - int_t^T Z dM + int_t^T f(s, X, M, Y, Z q*) dC
          - (L_T - L_t) + kappa/2 (<L>_T - <L>_t)

Picard step on the grid, for fixed previous iterate ``(Y^k, Z^k)``::

    Y_i = E[F + sum_{j>=i} f_j(Y^k_j, Z^k_j) dC_j | X_i, M_i]
    Z_i = E[(Y_{i+1} - Y_i) dM_i | X_i, M_i] (d<M>_i)^-1

Quadratic drivers are handled either directly with a ``z`` truncation
(mode ``"direct"``) or through the exponential change of variables
``U = exp(kappa Y)`` (mode ``"transform"``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConfigurationError,
    InconsistencyError,
    IterationLimitError,
    ModelDomainError,
    ShapeError,
    TruncationBindingError,
)
from .forward import ForwardSolution
from .paths import PathBundle, _compact
from .regression import RegressionBasis, Regressor

logger = logging.getLogger(__name__)

DriverFn = Callable[..., np.ndarray]


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class Driver:
    """Generator ``f(t, x, m, y, z, q)`` evaluated on ``P`` paths.

    ``x`` is (P, n), ``m`` is (P, d), ``y`` is (P,), ``z`` is the rotated
    control ``Z q*`` of shape (P, d) and ``q`` the density (P, d, d).
    Optional partials share the signature and return (P, n), (P, d), (P,)
    and (P, d) respectively (``df_dz`` differentiates in the rotated ``z``).

    ``gamma`` is the quadratic ``z`` coefficient, ``kappa`` the coefficient
    of the orthogonal bracket (also the exponent of the transform), ``a`` the
    size of ``|f(., 0, 0)|``, ``b`` its growth in ``y``.
    """

    f: DriverFn
    df_dx: Optional[DriverFn] = None
    df_dm: Optional[DriverFn] = None
    df_dy: Optional[DriverFn] = None
    df_dz: Optional[DriverFn] = None
    gamma: float = 0.0
    kappa: float = 0.0
    a: float = 0.0
    b: float = 0.0
    eta_bar: float = math.nan
    c_theta: float = math.nan
    lipschitz: bool = True
    m_free: bool = True
    solution_free: bool = False
    name: str = "custom"

    def __call__(self, t, x, m, y, z, q) -> np.ndarray:
        return self.f(t, x, m, y, z, q)

    @property
    def has_partials(self) -> bool:
        return None not in (self.df_dx, self.df_dm, self.df_dy, self.df_dz)

    def audit_growth(self, t, x, m, y, z, q) -> float:
        """Worst excess of ``|f|`` over ``eta + b eta |y| + gamma/2 |z|^2``.

        Non-positive values mean the growth metadata is consistent.
        """
        eta = self.eta_bar if np.isfinite(self.eta_bar) else self.a
        val = np.abs(np.asarray(self.f(t, x, m, y, z, q), dtype=float))
        bound = eta + self.b * eta * np.abs(y) + 0.5 * abs(self.gamma) * np.sum(z**2, axis=-1)
        return float(np.max(val - bound))


def zero_driver() -> Driver:
    def f(t, x, m, y, z, q):
        return np.zeros(np.shape(y))

    def zx(t, x, m, y, z, q):
        return np.zeros_like(x)

    def zm(t, x, m, y, z, q):
        return np.zeros_like(m)

    def zy(t, x, m, y, z, q):
        return np.zeros(np.shape(y))

    def zz(t, x, m, y, z, q):
        return np.zeros_like(z)

    return Driver(f, zx, zm, zy, zz, name="zero", solution_free=True)


def linear_driver(r: float = 0.0, c: float = 0.0, mu=None) -> Driver:
    """``f = c - r y + z . mu``: Lipschitz with constant ``|r| + |mu|``."""
    mu_arr = None if mu is None else np.atleast_1d(np.asarray(mu, dtype=float))

    def f(t, x, m, y, z, q):
        out = c - r * y
        if mu_arr is not None:
            out = out + z @ mu_arr
        return out

    def fy(t, x, m, y, z, q):
        return np.full(np.shape(y), -r)

    def fz(t, x, m, y, z, q):
        return np.zeros_like(z) if mu_arr is None else np.broadcast_to(mu_arr, z.shape).copy()

    def fx(t, x, m, y, z, q):
        return np.zeros_like(x)

    def fm(t, x, m, y, z, q):
        return np.zeros_like(m)

    return Driver(f, fx, fm, fy, fz, a=abs(c), b=abs(r), name="linear")


def entropic_driver(gamma: float) -> Driver:
    """``f = -(gamma/2) |z|^2``; with ``kappa = -gamma`` the transformed
    driver vanishes and ``Y_0 = -log E[exp(-gamma F)] / gamma``."""
    if gamma <= 0:
        raise ConfigurationError("gamma must be positive")

    def f(t, x, m, y, z, q):
        return -0.5 * gamma * np.sum(z * z, axis=-1)

    def fz(t, x, m, y, z, q):
        return -gamma * z

    def fy(t, x, m, y, z, q):
        return np.zeros(np.shape(y))

    def fx(t, x, m, y, z, q):
        return np.zeros_like(x)

    def fm(t, x, m, y, z, q):
        return np.zeros_like(m)

    return Driver(f, fx, fm, fy, fz, gamma=gamma, kappa=-gamma, lipschitz=False, name="entropic")


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal value ``F(x, m)`` returning (P,) values, bounded by ``bound``.

    With ``uses_orthogonal`` the second argument is the augmented state
    ``(M, N)`` of shape (P, d + 1).
    """

    F: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bound: float = math.inf
    m_free: bool = True
    uses_orthogonal: bool = False
    grad_x: Optional[Callable] = None
    grad_m: Optional[Callable] = None
    name: str = "custom"

    def __call__(self, x, m) -> np.ndarray:
        return np.asarray(self.F(x, m), dtype=float)

    def audit_bound(self, x, m) -> float:
        """Largest ``|F|`` at the sample points minus the declared bound."""
        return float(np.max(np.abs(self(x, m))) - self.bound)


def constant_terminal(c: float) -> TerminalCondition:
    return TerminalCondition(
        lambda x, m: np.full(x.shape[0], float(c)),
        bound=abs(c),
        grad_x=lambda x, m: np.zeros_like(x),
        grad_m=lambda x, m: np.zeros_like(m),
        name="constant",
    )


# ---------------------------------------------------------------------------
# options and results


@dataclass(frozen=True)
class SolverOptions:
    """Picard, truncation and feature settings.

    ``features`` is ``"auto"`` (drop ``M`` when the whole problem is free of
    it and ``M`` has independent increments), ``"x"`` or ``"xm"``.
    """

    basis: RegressionBasis = field(default_factory=RegressionBasis)
    tol: float = 1e-6
    max_iter: int = 50
    mode: str = "transform"
    strict: bool = False
    K_level: Optional[float] = None
    R: float = 100.0
    c1: Optional[float] = None
    c2: Optional[float] = None
    features: str = "auto"
    diagnostics: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")
        if self.mode not in ("transform", "direct"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.features not in ("auto", "x", "xm"):
            raise ConfigurationError(f"unknown feature selection {self.features!r}")


@dataclass
class BsdeSolution:
    """Solution paths and diagnostics.

    ``Y`` is (P, N+1), ``Z`` is (P, N+1, d) in the unrotated convention of
    ``int Z dM``; ``U_orth`` is the control on ``N`` when present. Before the
    start index ``Y`` is held at its start value and ``Z`` is zero; ``Z`` at
    ``T`` is held from the last step. ``influence`` holds per-path values
    whose mean is ``Y`` at the start (to first order in the transform mode),
    so differences of solves on common noise get paired standard errors.
    """

    Y: np.ndarray
    Z: np.ndarray
    start: int
    history: list[float]
    eps_hat: float
    stderr: float
    U_orth: Optional[np.ndarray] = None
    coefficients: list = field(default_factory=list)
    regressors: list = field(default_factory=list)
    truncation: dict = field(default_factory=dict)
    condition: float = math.nan
    mode: str = "lipschitz"
    Z_stderr: Optional[np.ndarray] = None
    Y_stderr: Optional[np.ndarray] = None
    features: Optional[Callable[[int], np.ndarray]] = field(default=None, repr=False)
    residual: Optional[np.ndarray] = field(default=None, repr=False)
    influence: Optional[np.ndarray] = field(default=None, repr=False)
    transform: object = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[:, self.start]))

    @property
    def bound(self) -> float:
        return float(np.max(np.abs(self.Y[:, self.start :])))

    def predict_Y(self, i: int, features: np.ndarray) -> np.ndarray:
        """Evaluate the step-``i`` regression surface at new feature rows."""
        reg = self.regressors[i]
        if reg is None:
            raise ShapeError(f"no regression stored for step {i}")
        return reg.design(features) @ self.coefficients[i]


# ---------------------------------------------------------------------------
# engine


@dataclass
class _Context:
    """Per-step accessors shared by every backward solve on one forward run."""

    t: np.ndarray
    s: int
    N: int
    P: int
    X: np.ndarray
    M: np.ndarray
    q: np.ndarray
    dM: Callable[[int], np.ndarray]
    dB: Callable[[int], np.ndarray]
    dC: Callable[[int], np.ndarray]
    features: Callable[[int], np.ndarray]


def _time_major(A: np.ndarray) -> np.ndarray:
    """(P, N+1, ...) -> contiguous (N+1, P, ...) for fast per-step slices."""
    return np.ascontiguousarray(np.moveaxis(A, 1, 0))


def _feature_fn(X, M, extra_cols: list[Callable[[int], np.ndarray]], use_m: bool):
    Xt = _time_major(X)
    Mt = _time_major(M) if use_m else None

    def features(i: int) -> np.ndarray:
        cols = [Xt[i]]
        if use_m:
            cols.append(Mt[i])
        for fn in extra_cols:
            v = fn(i)
            cols.append(v.reshape(v.shape[0], -1))
        return np.concatenate(cols, axis=1)

    return features


def _use_m(opts: SolverOptions, driver_m_free: bool, terminal: TerminalCondition, forward, bundle) -> bool:
    if opts.features == "xm":
        return True
    if opts.features == "x":
        return False
    brownian = bundle.model is None or bundle.model.kind == "brownian"
    return not (driver_m_free and terminal.m_free and forward.m_free and brownian)


def _make_context(forward: ForwardSolution, bundle: PathBundle, use_m: bool, extra=None) -> _Context:
    if forward.X.shape[0] != bundle.P or forward.X.shape[1] != bundle.grid.N + 1:
        raise ShapeError("forward solution and bundle disagree in shape")
    M = forward.M
    P = bundle.P
    B, _ = _compact(bundle.bracketMM)
    C, _ = _compact(bundle.C)
    dMt = np.diff(_time_major(M), axis=0)
    return _Context(
        t=bundle.grid.points,
        s=forward.start,
        N=bundle.grid.N,
        P=bundle.P,
        X=forward.X,
        M=M,
        q=bundle.q,
        dM=lambda i: dMt[i],
        dB=lambda i: np.broadcast_to(B[:, i + 1] - B[:, i], (P,) + B.shape[2:]),
        dC=lambda i: np.broadcast_to(C[:, i + 1] - C[:, i], (P,)),
        features=_feature_fn(forward.X, M, list(extra or []), use_m),
    )


def _bracket_solve(zfit: np.ndarray, dB: np.ndarray, dM: np.ndarray, step: int) -> np.ndarray:
    """Return ``zfit (dB)^-1`` path-wise; zero where the bracket is flat."""
    d = zfit.shape[1]
    dBc, shared = _compact(dB)
    if d == 1:
        b = dBc[:, 0, 0]
        flat = b <= 0.0
        if np.any(flat):
            moving = np.any(dM != 0.0, axis=1)
            if np.any(np.broadcast_to(flat, moving.shape) & moving):
                raise InconsistencyError(f"martingale moves with a zero bracket at step {step}")
        return np.where(flat[:, None], 0.0, zfit / np.where(flat, 1.0, b)[:, None])
    if shared:
        det = np.linalg.det(dBc[0])
        if det <= 0.0:
            if np.any(dM != 0.0):
                raise InconsistencyError(f"singular bracket increment at step {step}")
            return np.zeros_like(zfit)
        return zfit @ np.linalg.inv(dBc[0])
    det = np.linalg.det(dB)
    flat = det <= 1e-300
    if np.any(flat & np.any(dM != 0.0, axis=1)):
        raise InconsistencyError(f"singular bracket increment with a moving martingale at step {step}")
    safe = np.where(flat[:, None, None], np.eye(d), dB)
    out = np.linalg.solve(safe, zfit[:, :, None])[:, :, 0]
    return np.where(flat[:, None], 0.0, out)


@dataclass
class _EngineResult:
    Y: np.ndarray
    Z: np.ndarray
    history: list
    eps_hat: float
    stderr: float
    coefficients: list
    regressors: list
    condition: float
    Y_stderr: Optional[np.ndarray] = None
    Z_stderr: Optional[np.ndarray] = None
    clipped: float = 0.0
    influence: Optional[np.ndarray] = None


def _eps_hat(history: list[float]) -> float:
    ratios = [history[k] / history[k - 1] for k in range(2, len(history)) if history[k - 1] > 0]
    if not ratios:
        return 0.0
    return float(max(ratios))


# memory allowed for design matrices kept across Picard sweeps
PHI_CACHE_BYTES = 1024 * 2**20


def picard_solve(
    ctx: _Context,
    terminal_values: np.ndarray,
    path_driver: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]],
    basis: RegressionBasis,
    tol: float,
    max_iter: int,
    dim: Optional[int] = None,
    on_sweep: Optional[Callable[[], None]] = None,
    diagnostics: bool = False,
    clip: Optional[tuple[float, float]] = None,
) -> _EngineResult:
    """Generic backward Picard sweep.

    ``path_driver(i, Y_i, Z_i)`` returns the generator per unit of
    ``ctx.dC(i)`` for the unrotated control. ``None`` means a zero driver
    (one sweep is exact). ``clip`` projects fitted values onto a known
    a-priori range; the fraction of clipped cells is reported.
    """
    P, N, s = ctx.P, ctx.N, ctx.s
    d = dim if dim is not None else ctx.M.shape[2]
    FT = np.asarray(terminal_values, dtype=float)
    if FT.shape != (P,):
        raise ShapeError(f"terminal values have shape {FT.shape}, expected ({P},)")
    if not np.all(np.isfinite(FT)):
        raise ModelDomainError("terminal condition is not finite")
    Yk = np.broadcast_to(FT[:, None], (P, N + 1))
    Zk = np.zeros((P, N + 1, d))
    regs: list = [None] * (N + 1)
    coefs: list = [None] * (N + 1)
    history: list[float] = []
    sweeps = 1 if path_driver is None else max_iter
    converged = False
    phis: list = [None] * (N + 1)
    keep_phi = True
    for k in range(sweeps):
        if on_sweep is not None:
            on_sweep()
        # column-major so that per-step slices are contiguous
        Y = np.empty((P, N + 1), order="F")
        Z = np.zeros((P, N + 1, d), order="F")
        clipped = 0
        Y[:, N] = FT
        acc = FT.copy()
        for i in range(N - 1, s - 1, -1):
            if path_driver is not None:
                acc = acc + path_driver(i, Yk[:, i], Zk[:, i]) * ctx.dC(i)
            if regs[i] is None:
                feats = ctx.features(i)
                regs[i] = Regressor(feats, basis)
                Phi = regs[i].design(feats)
                # design matrices are reused across sweeps while they fit the budget
                keep_phi = keep_phi and Phi.nbytes * (N - s) <= PHI_CACHE_BYTES
                if keep_phi:
                    phis[i] = Phi
            elif phis[i] is not None:
                Phi = phis[i]
            else:
                Phi = regs[i].design(ctx.features(i))
            reg = regs[i]
            coefs[i], Y[:, i] = reg.fit(Phi, acc)
            if clip is not None:
                yi = Y[:, i]
                clipped += int(np.count_nonzero((yi < clip[0]) | (yi > clip[1])))
                np.clip(yi, clip[0], clip[1], out=yi)
            dM = ctx.dM(i)
            _, zfit = reg.fit(Phi, (Y[:, i + 1] - Y[:, i])[:, None] * dM)
            Z[:, i] = _bracket_solve(zfit, ctx.dB(i), dM, i)
        if s < N:
            Z[:, N] = Z[:, N - 1]
        Y[:, :s] = Y[:, s : s + 1]
        if not np.all(np.isfinite(Y)):
            raise ModelDomainError("backward iterate became non-finite")
        diff = float(np.max(np.abs(Y[:, s:] - Yk[:, s:])))
        history.append(diff)
        Yk, Zk = Y, Z
        logger.debug("picard sweep %d: sup|dY| = %.3e", k + 1, diff)
        if path_driver is None or diff < tol:
            converged = True
            break
    if not converged:
        raise IterationLimitError(f"Picard iteration did not reach tol={tol:g} in {max_iter} sweeps", history)

    # spread of the start-time target; features are constant there
    stderr = float(np.std(acc) / math.sqrt(P)) if s < N else 0.0
    conds = [r.condition for r in regs if r is not None]
    res = _EngineResult(
        Y=Yk,
        Z=Zk,
        history=history,
        eps_hat=_eps_hat(history),
        stderr=stderr,
        coefficients=coefs,
        regressors=regs,
        condition=float(max(conds)) if conds else 1.0,
        clipped=clipped / max(P * (N - s), 1),
        influence=acc if s < N else FT.copy(),
    )
    if diagnostics:
        res.Y_stderr, res.Z_stderr = _pointwise_stderr(ctx, Yk, Zk, FT, path_driver, regs, d)
    return res


def _pointwise_stderr(ctx, Y, Z, FT, path_driver, regs, d):
    """Regression standard errors of ``Y_i`` and ``Z_i`` along the paths."""
    P, N, s = ctx.P, ctx.N, ctx.s
    ys = np.zeros((P, N + 1))
    zs = np.zeros((P, N + 1, d))
    acc = FT.copy()
    for i in range(N - 1, s - 1, -1):
        if path_driver is not None:
            acc = acc + path_driver(i, Y[:, i], Z[:, i]) * ctx.dC(i)
        reg = regs[i]
        feats = ctx.features(i)
        Phi = reg.design(feats)
        ys[:, i] = reg.fitted_stderr(Phi, acc - Y[:, i])
        dM = ctx.dM(i)
        target = (Y[:, i + 1] - Y[:, i])[:, None] * dM
        _, zfit = reg.fit(Phi, target)
        se = np.stack([reg.fitted_stderr(Phi, target[:, j] - zfit[:, j]) for j in range(d)], axis=1)
        dBc, _ = _compact(ctx.dB(i))
        diag = np.diagonal(dBc, axis1=-2, axis2=-1)
        zs[:, i] = se / np.where(diag > 0, diag, np.inf)
    if s < N:
        zs[:, N] = zs[:, N - 1]
    return ys, zs


def _rotate(Z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``Z q*`` per path for symmetric or general ``q``."""
    qc, shared = _compact(q)
    if shared:
        return Z @ qc[0].T
    return np.einsum("pj,pij->pi", Z, q)


class _Audit:
    """Tracks which truncation levels were active during the latest sweep."""

    def __init__(self, names):
        self.flags = {n: False for n in names}

    def reset(self):
        for n in self.flags:
            self.flags[n] = False

    def hit(self, name: str, mask) -> None:
        if np.any(mask):
            self.flags[name] = True


def _base_path_driver(driver: Driver, ctx: _Context, K: float = math.inf, R: float = math.inf, audit: Optional[_Audit] = None):
    """Driver along the paths with optional clamp of ``y`` at ``K`` and of
    ``|Z q*|`` at ``R``."""
    t, X, M, q = ctx.t, ctx.X, ctx.M, ctx.q

    def fn(i, y, Z):
        z = _rotate(Z, q[:, i])
        if np.isfinite(K):
            out = np.abs(y) > K
            if audit is not None:
                audit.hit("K", out)
            y = np.clip(y, -K, K)
        if np.isfinite(R):
            nz = np.sqrt(np.sum(z * z, axis=1))
            over = nz > R
            if audit is not None:
                audit.hit("R", over)
            if np.any(over):
                z = z * np.where(over, R / np.where(over, nz, 1.0), 1.0)[:, None]
        return np.asarray(driver.f(t[i], X[:, i], M[:, i], y, z, q[:, i]), dtype=float)

    return fn


def _wrap_solution(res: _EngineResult, ctx: _Context, mode: str, truncation=None, d_split: Optional[int] = None):
    Z = res.Z
    U = None
    if d_split is not None:
        Z, U = res.Z[:, :, :d_split], res.Z[:, :, d_split]
    return BsdeSolution(
        Y=res.Y,
        Z=Z,
        U_orth=U,
        start=ctx.s,
        history=res.history,
        eps_hat=res.eps_hat,
        stderr=res.stderr,
        coefficients=res.coefficients,
        regressors=res.regressors,
        truncation=dict(truncation or {}),
        condition=res.condition,
        mode=mode,
        Y_stderr=res.Y_stderr,
        Z_stderr=res.Z_stderr,
        features=ctx.features,
        influence=res.influence,
    )


# ---------------------------------------------------------------------------
# public solvers


def solve_lipschitz(
    driver: Driver,
    terminal: TerminalCondition,
    forward: ForwardSolution,
    bundle: PathBundle,
    basis: Optional[RegressionBasis] = None,
    tol: float = 1e-6,
    max_iter: int = 50,
    options: Optional[SolverOptions] = None,
) -> BsdeSolution:
    """Picard/regression solve for a driver Lipschitz in ``(y, z)``."""
    opts = options or SolverOptions()
    basis = basis or opts.basis
    ctx = _make_context(forward, bundle, _use_m(opts, driver.m_free, terminal, forward, bundle))
    FT = terminal(forward.X[:, -1], forward.M[:, -1])
    pd = None if driver.solution_free and driver.name == "zero" else _base_path_driver(driver, ctx)
    res = picard_solve(ctx, FT, pd, basis, tol, max_iter, diagnostics=opts.diagnostics)
    return _wrap_solution(res, ctx, "lipschitz")


def rho(x, K: float):
    """Clamp ``x`` to ``[-K, K]``."""
    return np.clip(x, -K, K)


def truncate_driver(driver: Driver, K_level: float) -> Driver:
    """``f_K(t, x, m, y, z) = f(t, x, m, rho_K(y), z)``."""
    if not K_level > 0:
        raise ConfigurationError("truncation level must be positive")

    def f(t, x, m, y, z, q):
        return driver.f(t, x, m, rho(y, K_level), z, q)

    def wrap(g):
        if g is None:
            return None
        return lambda t, x, m, y, z, q: g(t, x, m, rho(y, K_level), z, q)

    df_dy = None
    if driver.df_dy is not None:
        base = driver.df_dy

        def df_dy(t, x, m, y, z, q):
            inside = np.abs(y) <= K_level
            return np.where(inside, base(t, x, m, rho(y, K_level), z, q), 0.0)

    return replace(
        driver,
        f=f,
        df_dx=wrap(driver.df_dx),
        df_dm=wrap(driver.df_dm),
        df_dy=df_dy,
        df_dz=wrap(driver.df_dz),
        name=f"{driver.name}|K={K_level:g}",
    )


def exp_transform(Y, Z, kappa: float):
    """``U = exp(kappa Y)``, ``V = kappa U Z``."""
    if kappa == 0:
        raise ConfigurationError("the exponential transform needs kappa != 0")
    Y = np.asarray(Y, dtype=float)
    U = np.exp(kappa * Y)
    V = kappa * U[..., None] * np.asarray(Z, dtype=float)
    return U, V


def inverse_exp_transform(U, V, kappa: float):
    """``Y = log(U) / kappa``, ``Z = V / (kappa U)``; requires ``U > 0``."""
    if kappa == 0:
        raise ConfigurationError("the exponential transform needs kappa != 0")
    U = np.asarray(U, dtype=float)
    if np.any(~(U > 0)):
        raise ModelDomainError("inverse transform met U <= 0")
    return np.log(U) / kappa, np.asarray(V, dtype=float) / (kappa * U[..., None])


def transformed_driver_g(f_K: Driver, kappa: float, c1: float, c2: float) -> Driver:
    """``g(u, v) = kappa rho_c2(u) f_K(ln(u v c1)/kappa, v/(kappa (u v c1))) - |v|^2 / (2 (u v c1))``

    where ``u v c1`` is ``max(u, c1)``; ``v`` is the rotated control.
    """
    if kappa == 0:
        raise ConfigurationError("the transformed driver needs kappa != 0")
    if not 0 < c1 <= c2:
        raise ConfigurationError("need 0 < c1 <= c2")

    def g(t, x, m, u, v, q):
        uc = np.maximum(u, c1)
        y = np.log(uc) / kappa
        z = v / (kappa * uc[..., None])
        return kappa * rho(u, c2) * f_K.f(t, x, m, y, z, q) - np.sum(v * v, axis=-1) / (2 * uc)

    return Driver(
        g,
        gamma=1.0 / c1,
        kappa=0.0,
        a=abs(kappa) * c2 * (f_K.a if np.isfinite(f_K.a) else 0.0),
        lipschitz=False,
        m_free=f_K.m_free,
        name=f"g[{f_K.name}]",
    )


def _y_bound(driver: Driver, terminal: TerminalCondition, bundle: PathBundle) -> float:
    """Comparison bound ``(|F| + a dC) exp(b dC)`` on ``|Y|`` under the growth metadata."""
    a = driver.eta_bar if np.isfinite(driver.eta_bar) else driver.a
    span = float(np.max(bundle.C[:, -1] - bundle.C[:, bundle.start]))
    return (terminal.bound + a * span) * math.exp(driver.b * span)


def _transform_levels(driver: Driver, terminal: TerminalCondition, bundle: PathBundle, kappa: float, opts: SolverOptions):
    Fb = terminal.bound
    if not np.isfinite(Fb):
        raise ConfigurationError("the transform mode needs a finite terminal bound")
    a = driver.eta_bar if np.isfinite(driver.eta_bar) else driver.a
    span = float(np.max(bundle.C[:, -1] - bundle.C[:, bundle.start]))
    level = abs(kappa) * (Fb + a * math.exp(driver.b * span))
    K = opts.K_level if opts.K_level is not None else 2.0 * (Fb + a)
    c1 = opts.c1 if opts.c1 is not None else 0.5 * math.exp(-level)
    c2 = opts.c2 if opts.c2 is not None else 2.0 * math.exp(level)
    return K, c1, c2


def _transformed_path_driver(base, kappa, c1, c2, ctx: _Context, R: float, audit: _Audit):
    """``g`` along the paths for the unrotated control ``V``.

    The Ito term uses the bracket increment, ``V d<M> V* / dC``, which is
    ``|V q*|^2`` whenever ``q`` is the true density of the driving martingale.
    """
    vmax = abs(kappa) * c2 * R

    def fn(i, u, V):
        audit.hit("c1", u < c1)
        audit.hit("c2", np.abs(u) > c2)
        uc = np.maximum(u, c1)
        dBc, shared = _compact(ctx.dB(i))
        dC = ctx.dC(i)
        safe = np.where(dC > 0, dC, 1.0)
        if shared:
            quad = np.einsum("pi,ij,pj->p", V, dBc[0], V) / safe
        else:
            quad = np.einsum("pi,pij,pj->p", V, dBc, V) / safe
        quad = np.where(dC > 0, quad, 0.0)
        nv = np.sqrt(quad)
        over = nv > vmax
        audit.hit("R", over)
        quad = np.where(over, vmax**2, quad)
        y = np.log(uc) / kappa
        Z = V / (kappa * uc[:, None])
        return kappa * rho(u, c2) * base(i, y, Z) - quad / (2 * uc)

    return fn


def _solve_quadratic_ctx(driver, terminal, FT, ctx, bundle, opts, path_base_factory, kappa, d_split=None, dim=None):
    mode = opts.mode
    if mode == "transform" and kappa == 0:
        logger.info("kappa = 0: transform mode degenerates to the direct solve")
        mode = "direct"
    if mode == "direct":
        audit = _Audit(["R"])
        pd = path_base_factory(math.inf, opts.R, audit)
        yb = _y_bound(driver, terminal, bundle)
        res = picard_solve(
            ctx, FT, pd, opts.basis, opts.tol, opts.max_iter, dim=dim, on_sweep=audit.reset,
            diagnostics=opts.diagnostics, clip=None if not np.isfinite(yb) else (-yb, yb),
        )
        flags = dict(audit.flags)
        flags["range_clipped"] = res.clipped
    else:
        K, c1, c2 = _transform_levels(driver, terminal, bundle, kappa, opts)
        audit = _Audit(["K", "c1", "c2", "R"])
        base = path_base_factory(K, opts.R, audit)
        gd = _transformed_path_driver(base, kappa, c1, c2, ctx, opts.R, audit)
        UT = np.exp(kappa * FT)
        # U stays within exp(+-level) = [2 c1, c2 / 2]; polynomial fits may not
        res = picard_solve(
            ctx, UT, gd, opts.basis, opts.tol, opts.max_iter, dim=dim, on_sweep=audit.reset,
            diagnostics=opts.diagnostics, clip=(2.0 * c1, 0.5 * c2),
        )
        U0 = float(np.mean(res.Y[:, ctx.s]))
        Y, Z = inverse_exp_transform(res.Y, res.Z, kappa)
        res.Y, res.Z = Y, Z
        res.stderr = res.stderr / (abs(kappa) * U0)
        # first-order expansion of log(mean U) / kappa around U0
        res.influence = math.log(U0) / kappa + (res.influence - U0) / (kappa * U0)
        if res.Y_stderr is not None:
            U = np.exp(kappa * Y)
            res.Y_stderr = res.Y_stderr / (abs(kappa) * U)
            res.Z_stderr = res.Z_stderr / (abs(kappa) * U[:, :, None])
        flags = dict(audit.flags)
        flags["levels"] = {"K": K, "c1": c1, "c2": c2, "R": opts.R}
        flags["range_clipped"] = res.clipped
    active = [k for k in ("K", "c1", "c2", "R") if flags.get(k)]
    if active:
        msg = f"truncation active at convergence: {', '.join(active)}"
        if opts.strict:
            raise TruncationBindingError(msg, {k: bool(flags.get(k)) for k in ("K", "c1", "c2", "R")})
        logger.warning(msg)
    return _wrap_solution(res, ctx, mode, flags, d_split=d_split)


def solve_quadratic(
    driver: Driver,
    terminal: TerminalCondition,
    forward: ForwardSolution,
    bundle: PathBundle,
    basis: Optional[RegressionBasis] = None,
    opts: Optional[SolverOptions] = None,
) -> BsdeSolution:
    """Quadratic-growth solve in ``"transform"`` or ``"direct"`` mode.

    The transform exponent is ``driver.kappa``; ``kappa = 0`` falls back to
    the direct mode. ``solution.truncation`` records which clamps were active
    in the final sweep.
    """
    opts = opts or SolverOptions()
    if basis is not None:
        opts = replace(opts, basis=basis)
    ctx = _make_context(forward, bundle, _use_m(opts, driver.m_free, terminal, forward, bundle))
    FT = terminal(forward.X[:, -1], forward.M[:, -1])

    def factory(K, R, audit):
        return _base_path_driver(driver, ctx, K, R, audit)

    return _solve_quadratic_ctx(driver, terminal, FT, ctx, bundle, opts, factory, driver.kappa)


def bmo_norm_estimate(Z: np.ndarray, bundle: PathBundle, basis: Optional[RegressionBasis] = None, forward: Optional[ForwardSolution] = None, start: int = 0) -> float:
    """Grid-time proxy for ``sup_tau E[int_tau^T |q Z*|^2 dC | F_tau]^(1/2)``.

    The conditional expectation at each grid time is a regression on
    ``(X_t, M_t)`` (``M_t`` only without a forward solution).
    """
    basis = basis or RegressionBasis()
    Z = np.asarray(Z, dtype=float)
    P, N = bundle.P, bundle.grid.N
    if Z.shape[:2] != (P, N + 1):
        raise ShapeError("Z does not match the bundle")
    B = bundle.bracketMM
    inc = np.empty((P, N))
    for i in range(N):
        dB = np.broadcast_to(B[:, i + 1] - B[:, i], (P,) + B.shape[2:])
        inc[:, i] = np.einsum("pi,pij,pj->p", Z[:, i], dB, Z[:, i])
    tail = np.cumsum(inc[:, ::-1], axis=1)[:, ::-1]
    M = bundle.M if forward is None else forward.M
    best = 0.0
    for i in range(start, N):
        cols = [M[:, i]] if forward is None else [forward.X[:, i], M[:, i]]
        feats = np.concatenate(cols, axis=1)
        reg = Regressor(feats, basis)
        _, fitted = reg.fit(reg.design(feats), tail[:, i])
        best = max(best, float(np.max(fitted)))
    return math.sqrt(max(best, 0.0))


def write_convergence_csv(solution: BsdeSolution, path) -> None:
    """Picard report ``iteration,sup_dY,ratio`` (ratio empty for the first row)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "sup_dY", "ratio"])
        prev = None
        for k, h in enumerate(solution.history, start=1):
            ratio = "" if prev in (None, 0.0) else repr(h / prev)
            w.writerow([k, repr(float(h)), ratio])
            prev = h
