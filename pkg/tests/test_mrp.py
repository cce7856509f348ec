import numpy as np
import pytest

from qfbsde.bsde import SolverOptions, TerminalCondition, entropic_driver, linear_driver, zero_driver
from qfbsde.forward import simulate_forward
from qfbsde.mrp import generator_identity_gap, mrp_transform, solve_quadratic_with_orthogonal
from qfbsde.paths import MartingaleModel, TimeGrid, generate_paths
from qfbsde.presets import forward_passthrough


@pytest.fixture(scope="module")
def orth():
    g = TimeGrid.uniform(1.0, 40)
    b = generate_paths(MartingaleModel(orthogonal=True), g, 10_000, 5)
    fw = simulate_forward(forward_passthrough(), b, (0, [0.0], None))
    return b, fw


def test_weights_partition_unity(orth):
    b, _ = orth
    tr = mrp_transform(b, zero_driver(), 0.0)
    assert np.max(np.abs(tr.phi1 + tr.phi2 - 1.0)) < 1e-12
    # Brownian M and N: augmented clock is arctan(2t)
    assert np.allclose(tr.C_tilde[0, -1], np.arctan(2.0))


def test_m_only_payoff_has_no_orthogonal_control(orth):
    b, fw = orth
    F = TerminalCondition(lambda x, m: np.tanh(x[:, 0]), bound=1.0)
    s = solve_quadratic_with_orthogonal(linear_driver(r=0.5), F, fw, b, kappa=0.0, opts=SolverOptions(diagnostics=True))
    se = s.Z_stderr[:, :-1, 1]
    assert np.max(np.abs(s.U_orth[:, :-1]) / se) <= 5


def test_entropic_with_orthogonal_payoff(orth):
    b, fw = orth
    F = TerminalCondition(lambda x, m: np.tanh(x[:, 0] + m[:, 1]), bound=1.0, uses_orthogonal=True)
    s = solve_quadratic_with_orthogonal(entropic_driver(1.0), F, fw, b)
    e = np.exp(-np.tanh(b.M[:, -1, 0] + b.N_orth[:, -1]))
    assert abs(s.Y0 + np.log(e.mean())) < 5 * s.stderr + 1e-3
    gap = generator_identity_gap(s.transform, b, s.Y, s.Z, s.U_orth, fw.X)
    assert gap < 1e-10
