import math

import numpy as np
import pytest

from qfbsde.errors import InconsistencyError, ShapeError
from qfbsde.paths import (
    MartingaleModel,
    TimeGrid,
    brownian_clock_rate,
    compute_clock,
    discrete_covariation,
    generate_paths,
    q_density,
    write_paths_csv,
)
from qfbsde.presets import martingale_model


def test_uniform_grid_and_lookup():
    g = TimeGrid.uniform(1.0, 4)
    assert g.N == 4 and g.T == 1.0
    assert np.allclose(g.dt, 0.25)
    assert g.index_of(0.5) == 2
    assert g.contains(0.75) and not g.contains(0.3)
    with pytest.raises(ShapeError):
        g.index_of(0.3)


def test_brownian_bracket_is_deterministic_time(brownian_bundle):
    b = brownian_bundle
    t = b.grid.points
    assert np.allclose(b.bracketMM[0, :, 0, 0], t)
    # clock is arctan of the total bracket, bounded by pi/2
    assert np.allclose(b.C[0], np.arctan(t))
    assert np.all(np.diff(b.C[0]) > 0)


def test_clock_and_density_reconstruct_bracket(brownian_bundle):
    b = brownian_bundle
    C = compute_clock(b)
    q = q_density(b)
    dB = np.diff(b.bracketMM[0, :, 0, 0])
    rebuilt = q[0, :-1, 0, 0] ** 2 * np.diff(C[0])
    assert np.allclose(rebuilt, dB, rtol=1e-12)
    # q q* dC/dt equals 1 for Brownian motion, so q^2 = 1 / rate
    assert np.allclose(q[0, 0, 0, 0] ** 2, 1.0 / np.mean(brownian_clock_rate(b.grid.points[:2])), rtol=1e-2)


def test_brownian_increment_moments():
    g = TimeGrid.uniform(1.0, 10)
    b = generate_paths(MartingaleModel(), g, 200_000, 1)
    MT = b.M[:, -1, 0]
    assert abs(MT.mean()) < 5 / math.sqrt(200_000)
    assert abs(MT.var() - 1.0) < 0.02


def test_same_seed_same_paths_and_stream_independence():
    g = TimeGrid.uniform(1.0, 20)
    a = generate_paths(MartingaleModel(), g, 500, 9)
    b = generate_paths(MartingaleModel(), g, 500, 9)
    c = generate_paths(MartingaleModel(), g, 500, 9, stream=3)
    assert np.array_equal(a.M, b.M)
    assert not np.array_equal(a.M, c.M)


def test_thread_count_does_not_change_paths():
    g = TimeGrid.uniform(1.0, 20)
    a = generate_paths(MartingaleModel(d=2), g, 3000, 5, threads=1)
    b = generate_paths(MartingaleModel(d=2), g, 3000, 5, threads=4)
    assert np.array_equal(a.M, b.M)


def test_diffusion_martingale_bracket_matches_realized():
    g = TimeGrid.uniform(1.0, 400)
    model = martingale_model("diffusion_martingale", m=[0.5])
    b = generate_paths(model, g, 2000, 3)
    realized = discrete_covariation(b.M[..., 0], b.M[..., 0])
    # Euler bracket accumulates a^2 dt; realized squares have the same mean
    rel = np.abs(realized[:, -1].mean() - b.bracketMM[:, -1, 0, 0].mean()) / b.bracketMM[:, -1, 0, 0].mean()
    assert rel < 0.05
    assert np.all(np.diff(b.C, axis=1) >= 0)


def test_discrete_covariation_shape_check():
    with pytest.raises(ShapeError):
        discrete_covariation(np.zeros((2, 3)), np.zeros((2, 4)))
    A = np.array([[0.0, 1.0, 3.0]])
    assert np.allclose(discrete_covariation(A, A), [[0.0, 1.0, 5.0]])


def test_orthogonal_component_has_no_covariation():
    g = TimeGrid.uniform(1.0, 50)
    b = generate_paths(MartingaleModel(orthogonal=True), g, 20_000, 2)
    cov = discrete_covariation(b.M[..., 0], b.N_orth)[:, -1]
    assert abs(cov.mean()) < 5 * cov.std() / math.sqrt(len(cov))


def test_density_rejects_bracket_on_flat_clock():
    from qfbsde.paths import _density_from

    bracket = np.zeros((1, 3, 1, 1))
    bracket[0, 2, 0, 0] = 1.0
    C = np.zeros((1, 3))
    with pytest.raises(InconsistencyError):
        _density_from(bracket, C)


def test_paths_csv_header(tmp_path, brownian_bundle):
    out = tmp_path / "paths.csv"
    write_paths_csv(brownian_bundle, out, max_paths=2)
    header = out.read_text().splitlines()[0]
    assert header.startswith("path,step,t,M_1")
