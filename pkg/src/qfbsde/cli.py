"""Config-driven experiment runner.

``qfbsde run <config> [--seed S] [--out DIR] [--threads K]`` executes the
pipeline (paths, forward, backward solve, node surface, checks, hedging) and
writes CSV artifacts plus ``manifest.json``. ``qfbsde validate <config>``
performs static checks and hypothesis spot-audits without solving.
``qfbsde plotdata <manifest>`` flattens the artifacts to ``series,xaxis,x,y``.

Exit codes: 0 success, 2 invalid configuration, 3 solver failure,
4 capacity (memory budget).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .bsde import SolverOptions, write_convergence_csv
from .errors import CapacityError, ConfigurationError, ModelDomainError, QfbsdeError, ShapeError, ValidationError
from .forward import simulate_forward
from .markov import FbsdeProblem, bracket_check, build_surface, estimate_u, representation_check, validate_grid_alignment
from .paths import TimeGrid
from .presets import driver_preset, forward_coefficients, martingale_model, terminal_preset
from .regression import RegressionBasis

logger = logging.getLogger("qfbsde")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CAPACITY = 0, 2, 3, 4

DRIVERS = ("zero", "linear", "entropic", "utility-market")
FORWARDS = ("zero", "passthrough", "linear", "gbm", "sine", "a3_switch", "a3_log")
TERMINALS = ("constant", "identity", "clipped_identity", "tanh", "log1p", "clipped_call")
MARKETS = ("gbm", "correlated")
MODELS = ("brownian", "diffusion_martingale")

DEFAULTS: dict[str, Any] = {
    "scenario": "unnamed",
    "model": {"kind": "brownian", "d": 1},
    "forward": {"preset": "passthrough", "params": {}},
    "driver": {"preset": "zero", "params": {}},
    "terminal": {"preset": "constant", "params": {}},
    "grid": {"T": 1.0, "N": 50},
    "paths": 10_000,
    "seed": 0,
    "regression": {"degree": 3, "ridge": 1e-8},
    "picard": {"tol": 1e-6, "max_iter": 50},
    "solver": {"type": "auto", "mode": "transform", "kappa": None, "features": "auto", "strict": False},
    "truncation": {"K_level": None, "R": 100.0, "c1": None, "c2": None},
    "start": {"x": None},
    "study": {},
    "market": None,
    "output": "qfbsde_out",
}


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    """Parse a JSON config and fill defaults; raises ValidationError on a
    malformed file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config not found: {path}", [{"level": "error", "field": "", "message": str(exc)}]) from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}", [{"level": "error", "field": "", "message": str(exc)}]) from exc
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object", [{"level": "error", "field": "", "message": "not an object"}])
    return _merge(DEFAULTS, raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _issue(issues, level, fld, msg):
    issues.append({"level": level, "field": fld, "message": msg})


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _static_checks(cfg: dict) -> list[dict]:
    issues: list[dict] = []
    model = cfg["model"]
    if model.get("kind") not in MODELS:
        _issue(issues, "error", "model.kind", f"unknown martingale model {model.get('kind')!r}")
    d = model.get("d", 1)
    if not isinstance(d, int) or d < 1:
        _issue(issues, "error", "model.d", "d must be a positive integer")
        d = 1
    grid = cfg["grid"]
    if not (isinstance(grid.get("N"), int) and grid["N"] >= 1):
        _issue(issues, "error", "grid.N", "N must be an integer >= 1")
    if not (_num(grid.get("T")) and grid["T"] > 0):
        _issue(issues, "error", "grid.T", "T must be positive")
    if not (isinstance(cfg["paths"], int) and cfg["paths"] >= 1):
        _issue(issues, "error", "paths", "P must be an integer >= 1")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        _issue(issues, "error", "seed", "seed must be a non-negative integer")
    pic = cfg["picard"]
    if not (_num(pic.get("tol")) and pic["tol"] > 0):
        _issue(issues, "error", "picard.tol", "tol must be positive")
    if not (isinstance(pic.get("max_iter"), int) and pic["max_iter"] >= 1):
        _issue(issues, "error", "picard.max_iter", "max_iter must be >= 1")
    reg = cfg["regression"]
    if not (isinstance(reg.get("degree"), int) and reg["degree"] >= 0):
        _issue(issues, "error", "regression.degree", "degree must be a non-negative integer")
    if not (_num(reg.get("ridge")) and reg["ridge"] >= 0):
        _issue(issues, "error", "regression.ridge", "ridge must be non-negative")
    drv = cfg["driver"].get("preset")
    if drv not in DRIVERS:
        _issue(issues, "error", "driver.preset", f"unknown driver preset {drv!r}")
    if drv == "utility-market":
        if not isinstance(cfg.get("market"), dict):
            _issue(issues, "error", "market", "the utility-market driver needs a market block")
    else:
        if cfg["forward"].get("preset") not in FORWARDS:
            _issue(issues, "error", "forward.preset", f"unknown forward preset {cfg['forward'].get('preset')!r}")
        if cfg["terminal"].get("preset") not in TERMINALS:
            _issue(issues, "error", "terminal.preset", f"unknown terminal preset {cfg['terminal'].get('preset')!r}")
    mk = cfg.get("market")
    if isinstance(mk, dict):
        if mk.get("preset") not in MARKETS:
            _issue(issues, "error", "market.preset", f"unknown market preset {mk.get('preset')!r}")
        k = mk.get("k", 1)
        if not isinstance(k, int) or k < 1:
            _issue(issues, "error", "market.k", "k must be a positive integer")
        elif k > d:
            _issue(issues, "error", "market.k", f"k={k} traded assets exceed d={d}: we assume k <= d to exclude arbitrage")
        kap = mk.get("params", {}).get("kappa", 1.0)
        if not (_num(kap) and kap > 0):
            _issue(issues, "error", "market.params.kappa", "risk aversion must be positive")
    solver = cfg["solver"]
    if solver.get("mode") not in ("transform", "direct"):
        _issue(issues, "error", "solver.mode", "mode must be transform or direct")
    if solver.get("type") not in ("auto", "lipschitz", "quadratic", "orthogonal"):
        _issue(issues, "error", "solver.type", "unknown solver type")
    if solver.get("features") not in ("auto", "x", "xm"):
        _issue(issues, "error", "solver.features", "features must be auto, x or xm")
    study = cfg.get("study") or {}
    if "surface" in study:
        s = study["surface"]
        if not s.get("t") or not s.get("x"):
            _issue(issues, "error", "study.surface", "surface needs t and x node lists")
        if "h" in s and not (_num(s["h"]) and s["h"] > 0):
            _issue(issues, "error", "study.surface.h", "bump size must be positive")
    if "refinement" in study:
        ladder = study["refinement"].get("N", [])
        if not ladder or not all(isinstance(n, int) and n >= 1 for n in ladder):
            _issue(issues, "error", "study.refinement.N", "refinement ladder must list positive integers")
    return issues


@dataclass
class Scenario:
    cfg: dict
    model: Any
    grid: TimeGrid
    coeffs: Any
    discontinuities: tuple
    driver: Any
    terminal: Any
    opts: SolverOptions
    market: Any = None
    x0: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def problem(self, P=None, grid=None) -> FbsdeProblem:
        c = self.cfg
        return FbsdeProblem(
            self.model, self.coeffs, self.driver, self.terminal, grid or self.grid, P or c["paths"], c["seed"],
            opts=self.opts, solver=c["solver"]["type"], kappa=c["solver"]["kappa"],
            discontinuities=self.discontinuities, threads=c.get("_threads", 1),
        )


def _market(cfg: dict):
    from .hedging import correlated_market, gbm_market

    mk = cfg["market"]
    params = dict(mk.get("params", {}))
    if mk["preset"] == "gbm":
        return gbm_market(**params)
    return correlated_market(**params)


def _options(cfg: dict) -> SolverOptions:
    t = cfg["truncation"]
    return SolverOptions(
        basis=RegressionBasis(degree=cfg["regression"]["degree"], ridge=float(cfg["regression"]["ridge"])),
        tol=float(cfg["picard"]["tol"]),
        max_iter=int(cfg["picard"]["max_iter"]),
        mode=cfg["solver"]["mode"],
        strict=bool(cfg["solver"].get("strict", False)),
        K_level=t.get("K_level"),
        R=float(t.get("R", 100.0)),
        c1=t.get("c1"),
        c2=t.get("c2"),
        features=cfg["solver"]["features"],
    )


def build_scenario(cfg: dict) -> Scenario:
    """Turn a validated config into model objects (raises ValidationError on
    static errors)."""
    errors = [i for i in _static_checks(cfg) if i["level"] == "error"]
    if errors:
        raise ValidationError(f"{len(errors)} configuration error(s)", errors)
    mcfg = cfg["model"]
    d = mcfg.get("d", 1)
    try:
        model = martingale_model(mcfg["kind"], d, mcfg.get("m"), mcfg.get("volatility"),
                                 mcfg.get("orthogonal", False), mcfg.get("orthogonal_vol", 1.0))
    except (ConfigurationError, ShapeError, ModelDomainError) as exc:
        raise ValidationError(str(exc), [{"level": "error", "field": "model", "message": str(exc)}]) from exc
    g = cfg["grid"]
    grid = TimeGrid.uniform(float(g["T"]), int(g["N"]))
    try:
        opts = _options(cfg)
    except ConfigurationError as exc:
        raise ValidationError(str(exc), [{"level": "error", "field": "solver", "message": str(exc)}]) from exc
    market = None
    try:
        if cfg["driver"]["preset"] == "utility-market":
            from .hedging import build_utility_driver

            market = _market(cfg)
            if market.risk.d != d:
                raise ValidationError("market dimension differs from the model", [
                    {"level": "error", "field": "market", "message": f"market uses d={market.risk.d}, model d={d}"}])
            coeffs, disc = market.risk, ()
            driver = build_utility_driver(market)
            terminal = market.payoff
        else:
            coeffs, disc = forward_coefficients(cfg["forward"]["preset"], cfg["forward"].get("params"), d, grid.T)
            driver = driver_preset(cfg["driver"]["preset"], cfg["driver"].get("params"))
            terminal = terminal_preset(cfg["terminal"]["preset"], cfg["terminal"].get("params"))
        validate_grid_alignment(grid, disc)
    except (ConfigurationError, ShapeError, TypeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc), [{"level": "error", "field": "", "message": str(exc)}]) from exc
    if coeffs.d != d:
        raise ValidationError("forward preset dimension differs from the model", [
            {"level": "error", "field": "forward", "message": f"coefficients use d={coeffs.d}, model d={d}"}])
    off_grid = []
    study = cfg.get("study") or {}
    times = [n[0] for n in study.get("nodes") or []] + list((study.get("surface") or {}).get("t") or [])
    times += [n[0] for n in ((cfg.get("market") or {}).get("nodes") or [])]
    for t in times:
        if not (_num(t) and grid.contains(float(t))):
            off_grid.append(t)
    if off_grid:
        raise ValidationError("study times are not grid points", [
            {"level": "error", "field": "study", "message": f"times {off_grid} are not on the grid T={grid.T:g}, N={grid.N}"}])
    x = cfg["start"].get("x")
    x0 = np.zeros(coeffs.n) if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    if x0.shape != (coeffs.n,):
        raise ValidationError("start.x has the wrong length", [{"level": "error", "field": "start.x", "message": f"expected {coeffs.n} values"}])
    return Scenario(cfg, model, grid, coeffs, disc, driver, terminal, opts, market, x0)


def validate_config(cfg: dict, samples: int = 256) -> list[dict]:
    """Static checks plus sampled terminal-bound and driver-growth audits;
    never runs the solver."""
    issues = _static_checks(cfg)
    if any(i["level"] == "error" for i in issues):
        return issues
    try:
        sc = build_scenario(cfg)
    except ValidationError as exc:
        return issues + exc.issues
    rng = np.random.default_rng(0)
    n, d = sc.coeffs.n, sc.model.d
    x = sc.x0 + rng.normal(scale=2.0, size=(samples, n))
    m = rng.normal(scale=2.0, size=(samples, d))
    if sc.terminal.name == "log1p":
        x = np.abs(x)
    if not math.isfinite(sc.terminal.bound):
        _issue(issues, "warning", "terminal", f"bounded terminal: preset {sc.terminal.name!r} is unbounded; clip it for the quadratic solver")
    else:
        excess = sc.terminal.audit_bound(x, m)
        if excess > 1e-12:
            _issue(issues, "warning", "terminal", f"bounded terminal: sampled |F| exceeds the declared bound by {excess:.3g}")
    if sc.market is None:
        y = rng.normal(size=samples)
        z = rng.normal(size=(samples, d))
        q = np.broadcast_to(np.eye(d), (samples, d, d))
        ex = sc.driver.audit_growth(0.0, x, m, y, z, q)
        if ex > 1e-9:
            _issue(issues, "warning", "driver", f"driver growth: sampled |f| exceeds the declared growth bound by {ex:.3g}")
    return issues


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.timings[name] = round(time.perf_counter() - t0, 3)
        logger.info("stage %s done in %.2fs", name, self.timings[name])
        return out


def _nodes(raw, n, d):
    out = []
    for node in raw:
        t, x, m = node[0], node[1], node[2] if len(node) > 2 else [0.0] * d
        out.append((float(t), np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(m, dtype=float))))
    return out


def run_experiment(cfg: dict, out_dir: Path) -> dict:
    """Execute the configured pipeline and return the manifest dict."""
    sc = build_scenario(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    st = _Stages()
    artifacts: list[dict] = []
    diag: dict[str, Any] = {}

    def emit(name, kind):
        p = out_dir / name
        artifacts.append({"file": name, "kind": kind, "sha256": _sha256(p)})

    prob = sc.problem()
    m0 = np.asarray(sc.model.m, dtype=float)
    bundle = st.run("paths", prob.bundle, 0, m0, stream=0)
    fw = st.run("forward", simulate_forward, sc.coeffs, bundle, (0, sc.x0, None))
    if sc.market is not None:
        from .hedging import _solve_pair

        solF, sol0 = st.run("bsde", _solve_pair, prob, sc.market, bundle, fw)
        sol = solF
        diag["price_at_start"] = solF.Y0 - sol0.Y0
    else:
        sol = st.run("bsde", prob.solve, fw, bundle)
    diag.update({
        "Y0": sol.Y0,
        "Y0_stderr": sol.stderr,
        "iterations": sol.iterations,
        "eps_hat": sol.eps_hat,
        "condition": sol.condition,
        "mode": sol.mode,
        "truncation": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in sol.truncation.items()},
    })
    write_convergence_csv(sol, out_dir / "convergence.csv")
    emit("convergence.csv", "convergence")

    study = cfg.get("study") or {}
    n, d = sc.coeffs.n, sc.model.d
    if study.get("nodes"):
        surf = st.run("nodes", estimate_u, prob, _nodes(study["nodes"], n, d))
        surf.to_csv(out_dir / "nodes.csv")
        emit("nodes.csv", "surface")
    surface = None
    if study.get("surface"):
        s = study["surface"]
        surface = st.run("surface", build_surface, prob, s["t"], s["x"], s.get("m"), float(s.get("h", 1e-2)),
                         bool(s.get("partials", True)), s.get("coords", "xm"))
        surface.to_csv(out_dir / "surface.csv")
        emit("surface.csv", "surface")
    if study.get("representation") and surface is not None and surface.d2u is not None:
        rc = study["representation"]
        steps = rc.get("steps") or [sc.grid.index_of(t) for t in study["surface"]["t"]]
        f2 = surface.interpolator(surface.d2u[:, 0])
        f3 = surface.interpolator(surface.d3u[:, 0]) if "m" in study["surface"].get("coords", "xm") else None
        rep = st.run(
            "representation", representation_check, sol, fw, bundle, sc.coeffs,
            lambda r: f2(r)[:, None], None if f3 is None else (lambda r: f3(r)[:, None]),
            steps=steps, max_paths=int(rc.get("max_paths", 2000)), seed=cfg["seed"],
        )
        rep.to_csv(out_dir / "representation.csv")
        emit("representation.csv", "representation")
        diag["representation"] = {"median_rel": rep.median_rel, **rep.quantiles, "excluded": rep.excluded}
    if study.get("bracket"):
        br = st.run("bracket", bracket_check, sol, bundle, fw)
        _write_rows(out_dir / "bracket.csv", ["statistic", "value"],
                    [["median", br.median]] + [[k, v] for k, v in br.quantiles.items()])
        emit("bracket.csv", "bracket")
        diag["bracket_median"] = br.median
    if study.get("refinement"):
        rows = st.run("refinement", _refinement, sc, study["refinement"])
        _write_rows(out_dir / "refinement.csv", ["level", "N", "P", "metric", "value"], rows)
        emit("refinement.csv", "refinement")
    if sc.market is not None and cfg["market"].get("nodes"):
        rows = st.run("hedging", _hedging, sc, prob, _nodes(cfg["market"]["nodes"], n, d), cfg["market"])
        from .hedging import write_hedge_csv

        write_hedge_csv(rows, out_dir / "hedge.csv", sc.market.k)
        emit("hedge.csv", "hedge")

    manifest = {
        "scenario": cfg["scenario"],
        "config_hash": config_hash({k: v for k, v in cfg.items() if not k.startswith("_") and k != "output"}),
        "seed": cfg["seed"],
        "artifacts": artifacts,
        "timings": st.timings,
        "diagnostics": _jsonable(diag),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _refinement(sc: Scenario, ref: dict) -> list[list]:
    """Bracket-residual medians and start values along an ``N`` ladder."""
    rows = []
    Ps = ref.get("P") or [sc.cfg["paths"]] * len(ref["N"])
    for level, (N, P) in enumerate(zip(ref["N"], Ps)):
        grid = TimeGrid.uniform(sc.grid.T, int(N))
        validate_grid_alignment(grid, sc.discontinuities)
        prob = sc.problem(P=int(P), grid=grid)
        b = prob.bundle(0, np.asarray(sc.model.m, dtype=float), stream=0)
        fw = simulate_forward(sc.coeffs, b, (0, sc.x0, None))
        sol = prob.solve(fw, b)
        br = bracket_check(sol, b, fw)
        rows.append([level, int(N), int(P), "bracket_median", br.median])
        rows.append([level, int(N), int(P), "Y0", sol.Y0])
        rows.append([level, int(N), int(P), "Y0_stderr", sol.stderr])
    return rows


def _hedging(sc: Scenario, prob: FbsdeProblem, nodes, mcfg: dict):
    from .hedging import delta_hedge, hedge_backtest, indifference_price, price_partials, regression_policy

    h = float(mcfg.get("h", 1e-2))
    reports = []
    reduced = sc.model.kind == "brownian" and sc.coeffs.m_free
    for t, r, m in nodes:
        pp = price_partials(sc.market, prob, (t, r, m), h, coords="r" if reduced else "rm")
        i = sc.grid.index_of(t)
        b = prob.bundle(i, m)
        q = np.asarray(b.q[0, i], dtype=float)
        lam = delta_hedge(sc.market, t, r, m, pp.dp_dr, np.nan_to_num(pp.dp_dm), q, reduced=reduced)
        if mcfg.get("backtest", True):
            est = indifference_price(sc.market, prob, (t, r, m))
            rep = hedge_backtest(sc.market, regression_policy(sc.market, est), est.bundle, est.forward,
                                 x0=est.price, price=pp.price, delta=lam)
        else:
            from .hedging import HedgeReport

            rep = HedgeReport(t, r, m, pp.price, pp.price_stderr, lam)
        rep.t, rep.r, rep.m, rep.price_stderr = t, r, m, pp.price_stderr
        reports.append(rep)
    return reports


def emit_plot_data(manifest_path, out_path=None) -> Path:
    """Normalize the run's artifacts to long-format ``series,xaxis,x,y``."""
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest: {exc}", [{"level": "error", "field": "", "message": str(exc)}]) from exc
    base = manifest_path.parent
    rows: list[list] = []
    for art in manifest.get("artifacts", []):
        p = base / art["file"]
        if not p.exists():
            raise ValidationError(f"missing artifact {art['file']}", [{"level": "error", "field": "artifacts", "message": art["file"]}])
        with open(p, encoding="utf-8") as fh:
            data = list(csv.DictReader(fh))
        kind = art.get("kind", "")
        if kind == "surface":
            ts = sorted({r["t"] for r in data}, key=float)
            for r in data:
                label = f"u(m={r['m']})" if len(ts) == 1 else f"u(t={r['t']},m={r['m']})"
                rows.append([label, "x", r["x"], r["u"]])
        elif kind == "convergence":
            rows += [["picard_sup_dY", "iteration", r["iteration"], r["sup_dY"]] for r in data]
        elif kind == "refinement":
            rows += [[r["metric"], "N", r["N"], r["value"]] for r in data]
        elif kind == "representation":
            rows += [["representation_resid", "t", r["t"], r["resid"]] for r in data]
        elif kind == "bracket":
            rows += [["bracket_residual", "statistic", r["statistic"], r["value"]] for r in data]
        elif kind == "hedge":
            rows += [["price", "r", r["r"], r["price"]] for r in data]
            rows += [["delta_1", "r", r["r"], r["delta_1"]] for r in data]
    out = Path(out_path) if out_path else base / "plotdata.csv"
    _write_rows(out, ["series", "xaxis", "x", "y"], rows)
    return out


# ---------------------------------------------------------------------------
# entry point


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("QFBSDE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer QFBSDE_THREADS=%r", env)
    return 1


def _error_report(exc: BaseException, code: int, out_dir: Optional[Path] = None) -> int:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    issues = getattr(exc, "issues", None)
    if issues:
        report["issues"] = issues
    for attr in ("history", "flags", "condition", "path", "step"):
        if hasattr(exc, attr):
            report[attr] = _jsonable(getattr(exc, attr))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="qfbsde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--threads", type=int)
    p_val = sub.add_parser("validate", help="check a config without solving")
    p_val.add_argument("config")
    p_plot = sub.add_parser("plotdata", help="long-format CSV from a run manifest")
    p_plot.add_argument("manifest")
    p_plot.add_argument("--out")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "validate":
        try:
            cfg = load_config(args.config)
        except ValidationError as exc:
            return _error_report(exc, EXIT_CONFIG)
        issues = validate_config(cfg)
        print(json.dumps({"issues": issues}, indent=2))
        return EXIT_CONFIG if any(i["level"] == "error" for i in issues) else EXIT_OK

    if args.command == "plotdata":
        try:
            out = emit_plot_data(args.manifest, args.out)
        except ValidationError as exc:
            return _error_report(exc, EXIT_CONFIG)
        print(out)
        return EXIT_OK

    out_dir = None
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out_dir = Path(args.out or cfg["output"])
        cfg["_threads"] = _threads(args.threads)
        manifest = run_experiment(cfg, out_dir)
    except (ValidationError, ConfigurationError, ShapeError) as exc:
        return _error_report(exc, EXIT_CONFIG, out_dir)
    except (CapacityError, MemoryError) as exc:
        return _error_report(exc, EXIT_CAPACITY, out_dir)
    except QfbsdeError as exc:
        return _error_report(exc, EXIT_SOLVER, out_dir)
    print(out_dir / "manifest.json")
    logger.info("wrote %d artifacts", len(manifest["artifacts"]))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
