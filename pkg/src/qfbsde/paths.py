"""Discretised paths of the driving martingale, its brackets, clock and density.

The clock is ``C = arctan(sum_i <M^i, M^i>)`` and the density ``q`` is the
symmetric PSD root of ``Delta<M, M> / Delta C`` on each step, so that
``q q* Delta C`` reproduces the bracket increments exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapacityError, InconsistencyError, ModelDomainError, ShapeError

logger = logging.getLogger(__name__)

#: paths per noise block; fixed so that output never depends on thread count
BLOCK_SIZE = 4096
DEFAULT_MEMORY_BUDGET = 2 * 1024**3


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time points ``0 = t_0 < ... < t_N = T``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ShapeError("a time grid needs at least two points")
        if pts[0] != 0.0:
            raise ShapeError("a time grid must start at 0")
        if np.any(np.diff(pts) <= 0):
            raise ShapeError("time grid must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 1 or T <= 0:
            raise ShapeError("need T > 0 and N >= 1")
        pts = np.linspace(0.0, T, N + 1)
        pts[-1] = T
        return cls(pts)

    @property
    def N(self) -> int:
        return self.points.size - 1

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        """Index of the grid point equal to ``t`` (within ``atol``)."""
        i = int(np.argmin(np.abs(self.points - t)))
        if abs(self.points[i] - t) > atol * max(1.0, self.T):
            raise ShapeError(f"time {t} is not a grid point")
        return i

    def contains(self, t: float, atol: float = 1e-12) -> bool:
        try:
            self.index_of(t, atol)
        except ShapeError:
            return False
        return True


@dataclass(frozen=True)
class MartingaleModel:
    """Continuous martingale basis ``M`` (plus optional orthogonal ``N``).

    ``volatility(t, m)`` maps ``(P, d)`` states to ``(P, d, d)`` matrices and
    is only used for ``kind == "diffusion_martingale"``.
    """

    d: int = 1
    kind: str = "brownian"
    volatility: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    m: Optional[Sequence[float]] = None
    orthogonal: bool = False
    orthogonal_vol: float = 1.0
    Q: float = math.inf

    def __post_init__(self):
        if self.d < 1:
            raise ShapeError("dimension d must be positive")
        if self.kind not in ("brownian", "diffusion_martingale"):
            raise ModelDomainError(f"unknown martingale kind {self.kind!r}")
        if self.kind == "diffusion_martingale" and self.volatility is None:
            raise ModelDomainError("diffusion_martingale needs a volatility function")
        m = np.zeros(self.d) if self.m is None else np.atleast_1d(np.asarray(self.m, dtype=float))
        if m.shape != (self.d,):
            raise ShapeError(f"initial value has shape {m.shape}, expected ({self.d},)")
        object.__setattr__(self, "m", tuple(m.tolist()))

    @property
    def deterministic_bracket(self) -> bool:
        return self.kind == "brownian"

    def with_initial(self, m) -> "MartingaleModel":
        from dataclasses import replace

        return replace(self, m=tuple(np.atleast_1d(np.asarray(m, dtype=float)).tolist()))


@dataclass(frozen=True)
class PathBundle:
    """Immutable sample of martingale paths on a grid.

    Arrays whose content is identical across paths (Brownian brackets,
    clock and density) are stored as read-only broadcast views.
    """

    grid: TimeGrid
    M: np.ndarray
    bracketMM: np.ndarray
    C: np.ndarray
    q: np.ndarray
    seed: int
    start: int = 0
    N_orth: Optional[np.ndarray] = None
    bracketNN: Optional[np.ndarray] = None
    model: Optional[MartingaleModel] = field(default=None, compare=False)

    @property
    def P(self) -> int:
        return self.M.shape[0]

    @property
    def d(self) -> int:
        return self.M.shape[2]

    @property
    def has_orthogonal(self) -> bool:
        return self.N_orth is not None

    def dC(self, i: int) -> np.ndarray:
        return self.C[:, i + 1] - self.C[:, i]

    def dM(self, i: int) -> np.ndarray:
        return self.M[:, i + 1] - self.M[:, i]

    def dbracket(self, i: int) -> np.ndarray:
        return self.bracketMM[:, i + 1] - self.bracketMM[:, i]


def _compact(a: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return the single-path slice of a broadcast array, if it is one."""
    if a.ndim and a.shape[0] > 1 and a.strides[0] == 0:
        return a[:1], True
    return a, False


def _frozen(a: np.ndarray, P: int | None = None) -> np.ndarray:
    if P is not None and a.shape[0] == 1 and P > 1:
        a = np.broadcast_to(a, (P,) + a.shape[1:])
    else:
        a.setflags(write=False)
    return a


def _block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def _estimate_bytes(model: MartingaleModel, P: int, N: int) -> int:
    per_path = model.d
    if not model.deterministic_bracket:
        per_path += 2 * model.d * model.d + 1
    if model.orthogonal:
        per_path += 1
    return 8 * P * (N + 1) * per_path


def generate_paths(
    model: MartingaleModel,
    grid: TimeGrid,
    P: int,
    seed: int,
    *,
    start: int = 0,
    stream: int = 0,
    threads: int = 1,
    memory_budget: int | None = None,
) -> PathBundle:
    """Euler paths ``M_{i+1} = M_i + a(t_i, M_i) dW_i`` from grid index ``start``.

    Before ``start`` every array holds its initial value. For Brownian models
    the initial bracket at ``start`` is ``t_start * I`` so the clock matches
    the one of a path started at 0; diffusion martingales restart with a
    zero bracket. Noise is keyed by ``(seed, stream, block)``.
    """
    if P < 1:
        raise ShapeError("need at least one path")
    N, d = grid.N, model.d
    if not 0 <= start <= N:
        raise ShapeError(f"start index {start} outside grid")
    budget = DEFAULT_MEMORY_BUDGET if memory_budget is None else memory_budget
    need = _estimate_bytes(model, P, N)
    if need > budget:
        raise CapacityError(f"path bundle needs ~{need / 2**20:.0f} MiB, budget is {budget / 2**20:.0f} MiB")

    t = grid.points
    dt = grid.dt
    sqdt = np.sqrt(dt)
    m0 = np.asarray(model.m, dtype=float)
    eye = np.eye(d)

    M = np.empty((P, N + 1, d))
    M[:, : start + 1] = m0
    Nn = None
    if model.orthogonal:
        Nn = np.zeros((P, N + 1))

    if model.deterministic_bracket:
        elapsed = np.concatenate([np.full(start, t[start]), t[start:]])
        bracket = (elapsed[:, None, None] * eye)[None]
        bracket = np.ascontiguousarray(bracket)
    else:
        bracket = np.zeros((P, N + 1, d, d))

    blocks = [(b, b * BLOCK_SIZE, min(P, (b + 1) * BLOCK_SIZE)) for b in range((P + BLOCK_SIZE - 1) // BLOCK_SIZE)]

    def run_block(spec):
        b, lo, hi = spec
        rng = _block_rng(seed, stream, b)
        z = rng.standard_normal((hi - lo, N, d))
        zn = rng.standard_normal((hi - lo, N)) if model.orthogonal else None
        if start == N:
            return
        if model.deterministic_bracket:
            inc = z[:, start:, :] * sqdt[start:, None]
            M[lo:hi, start + 1 :] = m0 + np.cumsum(inc, axis=1)
        else:
            for i in range(start, N):
                mi = M[lo:hi, i]
                a = np.asarray(model.volatility(t[i], mi), dtype=float)
                if a.shape != (hi - lo, d, d):
                    a = np.broadcast_to(a, (hi - lo, d, d))
                if not np.all(np.isfinite(a)):
                    bad = int(np.argmin(np.all(np.isfinite(a.reshape(hi - lo, -1)), axis=1)))
                    raise ModelDomainError(f"non-finite volatility at path {lo + bad}, step {i}")
                M[lo:hi, i + 1] = mi + np.einsum("pij,pj->pi", a, z[:, i, :]) * sqdt[i]
                bracket[lo:hi, i + 1] = bracket[lo:hi, i] + np.einsum("pij,pkj->pik", a, a) * dt[i]
        if zn is not None:
            inc = model.orthogonal_vol * zn[:, start:] * sqdt[start:]
            Nn[lo:hi, start + 1 :] = np.cumsum(inc, axis=1)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, blocks))
    else:
        for spec in blocks:
            run_block(spec)

    if np.isfinite(model.Q):
        peak = np.max(np.abs(bracket[:, -1]))
        if peak > model.Q:
            raise ModelDomainError(f"bracket reached {peak:.4g} which exceeds the bound Q={model.Q:.4g}")

    bracketNN = None
    if model.orthogonal:
        elapsed = np.concatenate([np.full(start, t[start]), t[start:]])
        bracketNN = (model.orthogonal_vol**2 * elapsed)[None].copy()

    C = _clock_from(bracket, bracketNN, augmented=False)
    q = _density_from(bracket, C)
    return PathBundle(
        grid=grid,
        M=_frozen(M),
        bracketMM=_frozen(bracket, P),
        C=_frozen(C, P),
        q=_frozen(q, P),
        seed=int(seed),
        start=start,
        N_orth=None if Nn is None else _frozen(Nn),
        bracketNN=None if bracketNN is None else _frozen(bracketNN, P),
        model=model,
    )


def _clock_from(bracket: np.ndarray, bracketNN: np.ndarray | None, augmented: bool) -> np.ndarray:
    b, _ = _compact(bracket)
    total = np.trace(b, axis1=-2, axis2=-1)
    if augmented:
        if bracketNN is None:
            raise InconsistencyError("augmented clock requested without an orthogonal bracket")
        nn, _ = _compact(bracketNN)
        total = total + nn
    if not np.all(np.isfinite(total)):
        raise ModelDomainError("non-finite bracket")
    return np.arctan(total)


def compute_clock(bundle: PathBundle, augmented: bool = False) -> np.ndarray:
    """``C_t = arctan(sum_i <M^i, M^i>_t)``; with ``augmented`` the orthogonal
    bracket ``<N, N>`` is added to the sum."""
    C = _clock_from(bundle.bracketMM, bundle.bracketNN, augmented)
    return _frozen(C, bundle.P)


def _density_from(bracket: np.ndarray, C: np.ndarray) -> np.ndarray:
    b, _ = _compact(bracket)
    C = _compact(C)[0]
    if b.shape[0] != C.shape[0]:
        C = np.broadcast_to(C, (b.shape[0],) + C.shape[1:])
    db = np.diff(b, axis=1)
    dC = np.diff(C, axis=1)
    d = b.shape[-1]
    zero_clock = dC <= 0.0
    if np.any(zero_clock):
        nonzero = np.any(np.abs(db.reshape(db.shape[:2] + (-1,))) > 0.0, axis=-1)
        if np.any(zero_clock & nonzero):
            raise InconsistencyError("bracket moves on a step where the clock does not")
    safe = np.where(zero_clock, 1.0, dC)
    qq = db / safe[..., None, None]
    qq = 0.5 * (qq + np.swapaxes(qq, -1, -2))
    if d == 1:
        q = np.sqrt(np.maximum(qq, 0.0))
    else:
        w, v = np.linalg.eigh(qq)
        q = np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.maximum(w, 0.0)), v)
    q = np.where(zero_clock[..., None, None], 0.0, q)
    # q at the last grid point is held from the final step
    return np.concatenate([q, q[:, -1:]], axis=1)


def q_density(bundle: PathBundle) -> np.ndarray:
    """Per-step symmetric root of ``Delta<M,M> / Delta C`` (zero where the clock is flat)."""
    return _frozen(_density_from(bundle.bracketMM, bundle.C), bundle.P)


def discrete_covariation(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Running sum of ``Delta A * Delta B`` along axis 1, starting at 0."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ShapeError(f"grid mismatch: {A.shape} vs {B.shape}")
    inc = np.diff(A, axis=1) * np.diff(B, axis=1)
    out = np.zeros_like(A)
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def brownian_clock_rate(t, d: int = 1):
    """``dC/dt`` for a ``d``-dimensional Brownian basis, ``d / (1 + (d t)^2)``.

    Coefficients that should act per unit of calendar time multiply by the
    reciprocal of this rate.
    """
    t = np.asarray(t, dtype=float)
    return d / (1.0 + (d * t) ** 2)


def write_paths_csv(
    bundle: PathBundle,
    path,
    X: np.ndarray | None = None,
    extra: dict[str, np.ndarray] | None = None,
    max_paths: int | None = None,
) -> None:
    """Columnar dump ``path,step,t,M_1..M_d,N,C,q_11..q_dd[,X_1..X_n,...]``."""
    d = bundle.d
    P = bundle.P if max_paths is None else min(bundle.P, max_paths)
    header = ["path", "step", "t"] + [f"M_{i + 1}" for i in range(d)] + ["N", "C"]
    header += [f"q_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    if X is not None:
        header += [f"X_{i + 1}" for i in range(X.shape[2])]
    extra = extra or {}
    header += list(extra)
    t = bundle.grid.points
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in range(P):
            for i in range(bundle.grid.N + 1):
                row = [p, i, repr(float(t[i]))]
                row += [repr(float(v)) for v in bundle.M[p, i]]
                row.append("" if bundle.N_orth is None else repr(float(bundle.N_orth[p, i])))
                row.append(repr(float(bundle.C[p, i])))
                row += [repr(float(v)) for v in bundle.q[p, i].ravel()]
                if X is not None:
                    row += [repr(float(v)) for v in X[p, i]]
                for arr in extra.values():
                    row += [repr(float(v)) for v in np.atleast_1d(arr[p, i])]
                w.writerow(row)
