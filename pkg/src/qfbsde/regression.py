"""Ridge-regularised polynomial least squares for conditional expectations.

Features are standardised column-wise, constant columns are dropped, and the
design contains every monomial of total degree ``<= degree``. The Gram matrix
is factorised once per feature set so repeated fits (Picard sweeps, several
targets) only cost one matrix product each.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

# condition numbers above this mean the ridge did not restore full rank
MAX_CONDITION = 1e13


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis of total degree ``degree`` with trace-scaled ridge.

    The penalty is ``ridge * trace(G) / dim`` on the non-constant terms,
    where ``G = Phi' Phi / P``; the intercept is left unpenalized.
    """

    family: str = "polynomial"
    degree: int = 3
    ridge: float = 1e-8

    def __post_init__(self):
        if self.family != "polynomial":
            raise ConfigurationError(f"unsupported basis family {self.family!r}")
        if self.degree < 0:
            raise ConfigurationError("degree must be non-negative")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be non-negative")

    def dimension(self, k: int) -> int:
        """Number of monomials in ``k`` variables."""
        return comb(k + self.degree, self.degree)


class Regressor:
    """Least-squares projector onto the polynomial span of fixed features.

    Parameters
    ----------
    features : (P, k) array
        Conditioning variables, one row per path.
    basis : RegressionBasis
    """

    def __init__(self, features: np.ndarray, basis: RegressionBasis):
        F = np.asarray(features, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        P, k = F.shape
        self.basis = basis
        mean = F.mean(axis=0)
        std = F.std(axis=0)
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.keep = keep
        self.mean = mean[keep]
        self.std = std[keep]
        nk = int(keep.sum())
        self.terms = [()]
        for deg in range(1, basis.degree + 1):
            self.terms += list(combinations_with_replacement(range(nk), deg))
        dim = len(self.terms)
        if P < dim + 1:
            raise NumericalError(f"{P} samples cannot support a basis of dimension {dim}")
        self.P = P
        Phi = self.design(F)
        G = Phi.T @ Phi / P
        lam = basis.ridge * np.trace(G) / dim
        pen = np.full(dim, lam)
        pen[0] = 0.0  # intercept is not shrunk, so constant targets are fitted exactly
        Gr = G + np.diag(pen)
        self.condition = float(np.linalg.cond(Gr))
        if not np.isfinite(self.condition) or self.condition > MAX_CONDITION:
            raise NumericalError(f"regression design is rank deficient (condition {self.condition:.3g})", self.condition)
        try:
            self._cho = linalg.cho_factor(Gr, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"Cholesky failed: {exc}", self.condition) from exc

    @property
    def dim(self) -> int:
        return len(self.terms)

    def design(self, features: np.ndarray) -> np.ndarray:
        """Design matrix ``Phi`` for (new) feature rows."""
        F = np.asarray(features, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        Zs = (F[:, self.keep] - self.mean) / self.std
        cols = np.empty((F.shape[0], self.dim))
        cache = {(): np.ones(F.shape[0])}
        for j, term in enumerate(self.terms):
            if term not in cache:
                cache[term] = cache[term[:-1]] * Zs[:, term[-1]]
            cols[:, j] = cache[term]
        return cols

    def coefficients(self, Phi: np.ndarray, target: np.ndarray) -> np.ndarray:
        rhs = Phi.T @ target / self.P
        return linalg.cho_solve(self._cho, rhs, check_finite=False)

    def fit(self, Phi: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients and fitted values for ``target`` of shape (P,) or (P, r)."""
        coef = self.coefficients(Phi, target)
        return coef, Phi @ coef

    def fitted_stderr(self, Phi: np.ndarray, residual: np.ndarray) -> np.ndarray:
        """Pointwise standard error of fitted values.

        Uses the heteroskedasticity-robust sandwich
        ``phi G^-1 (Phi' diag(e^2) Phi / P) G^-1 phi' / P``.
        """
        dof = self.P / max(self.P - self.dim, 1)
        meat = (Phi * (residual**2)[:, None]).T @ Phi / self.P * dof
        Ginv_meat = linalg.cho_solve(self._cho, meat, check_finite=False)
        A = linalg.cho_solve(self._cho, Ginv_meat.T, check_finite=False)
        var = np.einsum("pj,jk,pk->p", Phi, A, Phi) / self.P
        return np.sqrt(np.maximum(var, 0.0))


@dataclass(frozen=True)
class RegressionFit:
    coefficients: np.ndarray
    fitted: np.ndarray
    stderr: np.ndarray
    condition: float
    regressor: Regressor

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.regressor.design(features) @ self.coefficients


def regress_conditional(features: np.ndarray, targets: np.ndarray, basis: RegressionBasis | None = None) -> RegressionFit:
    """Estimate ``E[target | features]`` by ridge least squares.

    Returns the coefficients, fitted values per path, and their pointwise
    standard errors.
    """
    basis = basis or RegressionBasis()
    targets = np.asarray(targets, dtype=float)
    reg = Regressor(features, basis)
    Phi = reg.design(features)
    coef, fitted = reg.fit(Phi, targets)
    resid = targets - fitted
    if resid.ndim == 1:
        se = reg.fitted_stderr(Phi, resid)
    else:
        se = np.stack([reg.fitted_stderr(Phi, resid[:, j]) for j in range(resid.shape[1])], axis=1)
    return RegressionFit(coef, fitted, se, reg.condition, reg)
