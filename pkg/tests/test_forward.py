import numpy as np
import pytest

from qfbsde.errors import BlowUpError, ConfigurationError, ShapeError
from qfbsde.forward import SdeCoefficients, bump_restart, simulate_forward, simulate_variational, with_variational
from qfbsde.paths import MartingaleModel, TimeGrid, generate_paths
from qfbsde.presets import forward_coefficients, forward_gbm, forward_linear, forward_passthrough, forward_sine


def test_passthrough_reproduces_martingale(brownian_bundle):
    fw = simulate_forward(forward_passthrough(), brownian_bundle, (0, [0.0], None))
    assert np.allclose(fw.X[..., 0], brownian_bundle.M[..., 0])


def test_linear_euler_matches_closed_recursion(brownian_bundle):
    b = brownian_bundle
    co = forward_linear(vol=0.5, drift=0.3)
    fw = simulate_forward(co, b, (0, [1.0], None))
    x = np.ones(b.P)
    for i in range(b.grid.N):
        x = x + 0.5 * x * b.dM(i)[:, 0] + 0.3 * x * b.dC(i)
    assert np.allclose(fw.X[:, -1, 0], x, rtol=1e-12)


def test_restart_holds_state_before_start(brownian_bundle):
    fw = simulate_forward(forward_passthrough(), brownian_bundle, (10, [2.0], [0.5]))
    assert np.all(fw.X[:, :11, 0] == 2.0)
    assert np.allclose(fw.M[:, 10, 0], 0.5)


def test_variational_flow_linear_case_is_exact(brownian_bundle):
    co = forward_linear(vol=0.5, drift=0.3)
    start = (0, [0.3], None)
    fw = with_variational(co, brownian_bundle, simulate_forward(co, brownian_bundle, start))
    up = bump_restart(co, brownian_bundle, start, (0, 0.1))
    assert np.max(np.abs((up.X - fw.X) / 0.1 - fw.Dx[..., 0])) < 1e-12


def test_variational_flow_against_central_bumps(brownian_bundle):
    co = forward_sine()
    start = (0, [0.3], None)
    fw = with_variational(co, brownian_bundle, simulate_forward(co, brownian_bundle, start))
    h = 1e-4
    fd = (bump_restart(co, brownian_bundle, start, (0, h)).X - bump_restart(co, brownian_bundle, start, (0, -h)).X) / (2 * h)
    assert np.max(np.abs(fw.Dx[..., 0] - fd)) < 1e-6


def test_m_flow_for_m_dependent_sigma():
    g = TimeGrid.uniform(1.0, 50)
    b = generate_paths(MartingaleModel(), g, 1000, 2)
    co = forward_sine(mcoef=0.2)
    start = (0, [0.3], [0.1])
    fw = with_variational(co, b, simulate_forward(co, b, start))
    h = 1e-4
    fd = (bump_restart(co, b, start, (1, h)).X - bump_restart(co, b, start, (1, -h)).X) / (2 * h)
    assert np.max(np.abs(fw.Dm[..., 0, 0] - fd[..., 0])) < 1e-6


def test_variational_needs_partials(brownian_bundle):
    co = SdeCoefficients(1, 1, lambda t, x, m: np.ones((x.shape[0], 1, 1)), lambda t, x, m: 0 * x)
    fw = simulate_forward(co, brownian_bundle, (0, [0.0], None))
    with pytest.raises(ConfigurationError):
        simulate_variational(co, brownian_bundle, fw)


def test_check_partials_detects_wrong_derivative():
    co = forward_gbm(vol=0.2)
    x = np.full((5, 1), 1.0)
    m = np.zeros((5, 1))
    assert co.check_partials(0.0, x, m) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_reports_path_and_step(brownian_bundle):
    co = SdeCoefficients(1, 1, lambda t, x, m: (x * x * 1e80)[:, :, None], lambda t, x, m: x * x * 1e80)
    with pytest.raises(BlowUpError) as info:
        simulate_forward(co, brownian_bundle, (0, [1.0], None))
    assert info.value.step >= 1


def test_start_shape_checked(brownian_bundle):
    with pytest.raises(ShapeError):
        simulate_forward(forward_passthrough(), brownian_bundle, (0, [0.0, 1.0], None))


def test_a3_log_state_flows_are_one():
    co, disc = forward_coefficients("a3_log", {}, 1, 1.0)
    assert disc == (0.5,)
    g = TimeGrid.uniform(1.0, 20)
    b = generate_paths(MartingaleModel(), g, 200, 1)
    fw = with_variational(co, b, simulate_forward(co, b, (0, [0.2], None)))
    assert np.allclose(fw.Dx, 1.0)
    # first half has no dynamics
    assert np.allclose(fw.X[:, :11, 0], 0.2)
