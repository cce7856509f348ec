import numpy as np
import pytest

from qfbsde.bsde import SolverOptions
from qfbsde.errors import ModelDomainError, SamplingError, ShapeError
from qfbsde.markov import (
    FbsdeProblem,
    a3_bracket_expectation,
    appendix_a3_oracle,
    bracket_check,
    build_surface,
    derivative_bsde_solve,
    estimate_u,
    finite_diff_partials,
    representation_check,
    solve_node,
    validate_grid_alignment,
)
from qfbsde.paths import TimeGrid
from qfbsde.presets import driver_preset, forward_coefficients, forward_passthrough, martingale_model, terminal_preset


def _a3(P=20_000, N=50, seed=1):
    grid = TimeGrid.uniform(1.0, N)
    co, disc = forward_coefficients("a3_switch", {}, 1, 1.0)
    return FbsdeProblem(martingale_model(), co, driver_preset("zero"), terminal_preset("log1p"), grid, P, seed, discontinuities=disc)


def test_grid_alignment():
    validate_grid_alignment(TimeGrid.uniform(1.0, 4), (0.5,))
    with pytest.raises(ShapeError):
        validate_grid_alignment(TimeGrid.uniform(1.0, 3), (0.5,))


def test_a3_closed_form_oracle():
    model = martingale_model()
    assert appendix_a3_oracle(model, 0.0, 0.0) == (-0.25, 0.0)
    assert appendix_a3_oracle(model, 0.75, 0.0) == (-0.125, 0.0)
    with pytest.raises(ModelDomainError):
        appendix_a3_oracle(model, 0.0, -1.0)


def test_a3_bracket_expectation_continuous_limit():
    # Brownian-like limit of the diffusion bracket at m = 0: e^{T} - e^{T/2}
    assert np.isclose(a3_bracket_expectation(0.0, 0.0), np.e - np.exp(0.5))
    assert np.isclose(a3_bracket_expectation(0.0, 1.0), 2 * (np.e - np.exp(0.5)))


def test_a3_nodes_against_oracle():
    pb = _a3()
    surf = estimate_u(pb, [(0.0, [0.2], [0.0]), (0.5, [0.2], [0.0]), (0.76, [0.2], [0.0])])
    for (t, x), u, se in zip([(0.0, 0.2), (0.5, 0.2), (0.76, 0.2)], surf.u, surf.stderr):
        oracle, _ = appendix_a3_oracle(pb.model, t, x)
        assert abs(u - oracle) < 5 * se + 2e-3


def test_partials_of_log1p_in_x():
    pb = _a3()
    pe = finite_diff_partials(pb, (0.0, [0.2], [0.0]), 0.02)
    assert abs(pe.d2u[0] - 1.0 / 1.2) < 5 * pe.d2u_stderr[0] + 1e-3
    # Brownian restart: u does not depend on m
    assert abs(pe.d3u[0]) <= 5 * pe.d3u_stderr[0] + 1e-12


def test_derivative_bsde_for_pure_terminal():
    pb = _a3()
    out = derivative_bsde_solve(pb, (0.0, [0.2], [0.0]))
    assert abs(out.d2u[0] - 1.0 / 1.2) < 5 * out.d2u_stderr[0] + 1e-3


def test_surface_and_csv(tmp_path):
    grid = TimeGrid.uniform(1.0, 20)
    pb = FbsdeProblem(martingale_model(), forward_passthrough(), driver_preset("zero"), terminal_preset("identity"), grid, 4000, 2)
    surf = build_surface(pb, [0.5], [-1.0, 0.0, 1.0], [0.0], h=0.05, coords="x")
    # u(t, x) = x for a martingale payoff
    assert np.allclose(surf.u, [-1.0, 0.0, 1.0], atol=0.05)
    assert np.allclose(surf.d2u[:, 0], 1.0, atol=0.05)
    out = tmp_path / "surface.csv"
    surf.to_csv(out)
    assert out.read_text().splitlines()[0] == "t,x,m,u,stderr,d2u,d3u"
    interp = surf.interpolator(surf.u)
    assert np.isnan(interp(np.array([[0.5, 5.0, 0.0]]))[0])


def test_bracket_residual_small_for_martingale_payoff():
    grid = TimeGrid.uniform(1.0, 200)
    pb = FbsdeProblem(martingale_model(), forward_passthrough(), driver_preset("zero"), terminal_preset("tanh"), grid, 2000, 4)
    b = pb.bundle(0, [0.0], stream=0)
    from qfbsde.forward import simulate_forward

    fw = simulate_forward(pb.coeffs, b, (0, [0.0], None))
    sol = pb.solve(fw, b)
    rep = bracket_check(sol, b, fw)
    assert rep.median < 0.1
    assert set(rep.quantiles) >= {"q25", "q50", "q75"}


def test_representation_needs_cells():
    grid = TimeGrid.uniform(1.0, 10)
    pb = FbsdeProblem(martingale_model(), forward_passthrough(), driver_preset("zero"), terminal_preset("tanh"), grid, 300, 4)
    b = pb.bundle(0, [0.0], stream=0)
    from qfbsde.forward import simulate_forward

    fw = simulate_forward(pb.coeffs, b, (0, [0.0], None))
    sol = pb.solve(fw, b)
    with pytest.raises(SamplingError):
        representation_check(sol, fw, b, pb.coeffs, lambda r: np.ones((r.shape[0], 1)), steps=[5], max_paths=50)


def test_solver_resolution():
    pb = _a3()
    assert pb.resolved_solver() == "lipschitz"
    q = FbsdeProblem(martingale_model(), forward_passthrough(), driver_preset("entropic", {"gamma": 1.0}),
                     terminal_preset("tanh"), TimeGrid.uniform(1.0, 10), 100, 0)
    assert q.resolved_solver() == "quadratic"
    assert q.effective_kappa == -1.0


def test_node_restart_uses_common_noise():
    pb = _a3(P=2000)
    a = solve_node(pb, (0.5, [0.2], [0.0]))
    b = solve_node(pb, (0.5, [0.3], [0.0]))
    assert np.array_equal(a.bundle.M, b.bundle.M)
