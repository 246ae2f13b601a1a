import math

import numpy as np
import pytest

from cutofflab import density as dens
from cutofflab import dynamics as dyn
from cutofflab import sde_sim
from cutofflab.errors import ConfigError, DivergenceError, InsufficientSampleError
from oracles import ou_law


@pytest.fixture(scope="module")
def ou_ensemble(ou1):
    return sde_sim.simulate_coupled_linearization(ou1, 0.01, [1.0], np.linspace(0, 2, 5), 10_000, 3)


def test_zero_noise_follows_semiflow(quartic):
    grid = np.linspace(0, 2, 11)
    ens = sde_sim.simulate_paths(quartic, 0.0, [1.0], grid, 4, seed=1)
    flow = dyn.integrate_semiflow(quartic, [1.0], 2.0, n_out=10)
    # Euler vs RK4: first order in h = 0.01
    assert np.max(np.abs(ens.paths[:, :, 0] - flow.states[:, 0])) < 0.01
    assert np.all(ens.paths[0] == ens.paths[3])


def test_initial_state_recorded(ou_ensemble):
    assert np.all(ou_ensemble.paths[:, 0, 0] == 1.0)
    assert ou_ensemble.kind == "coupled-pair"


def test_ou_variance_at_t1(ou1):
    ens = sde_sim.simulate_paths(ou1, 0.01, [1.0], np.linspace(0, 1, 5), 10_000, seed=2)
    x = ens.paths[:, -1, 0]
    _, var = ou_law(1.0, 1.0, 0.01, 1.0)
    assert var == pytest.approx(0.004323, abs=1e-6)
    se = var * math.sqrt(2.0 / x.size)
    assert abs(x.var(ddof=1) - var) <= 3 * se


def test_variance_matches_lyapunov_at_every_time(ou_ensemble, ou1):
    sol = dyn.integrate_lyapunov(ou1, 0.01, 2.0, mode="along-flow", x0=[1.0], n_out=4)
    x = ou_ensemble.paths[:, :, 0]
    h = ou_ensemble.step
    for k in range(1, x.shape[1]):
        var = sol.matrices[k, 0, 0]
        # sampling error plus the O(h) weak bias of Euler-Maruyama
        assert abs(x[:, k].var(ddof=1) - var) <= 3 * var * math.sqrt(2.0 / x.shape[0]) + h * var


def test_linearised_mean_tracks_semiflow(ou_ensemble):
    lin = ou_ensemble.linear[:, :, 0]
    se = lin.std(axis=0, ddof=1) / math.sqrt(lin.shape[0])
    assert np.all(np.abs(lin.mean(axis=0) - ou_ensemble.psi[:, 0]) <= 3 * se + 1e-15)


def test_quadratic_coupling_is_exact(quad2):
    ens = sde_sim.simulate_coupled_linearization(quad2, 0.05, [1.0, -1.0], np.linspace(0, 1, 3), 256, 4)
    np.testing.assert_allclose(ens.paths, ens.linear, atol=1e-13)


def test_zero_noise_linearisation_is_semiflow(quartic):
    ens = sde_sim.simulate_coupled_linearization(quartic, 0.0, [1.0], np.linspace(0, 1, 3), 8, 0)
    np.testing.assert_array_equal(ens.linear[:, :, 0], np.broadcast_to(ens.psi[:, 0], (8, 3)))


@pytest.mark.parametrize("workers", [2, 8])
def test_workers_do_not_change_bytes(truncated_quartic, workers):
    grid = np.linspace(0, 1, 4)
    a = sde_sim.simulate_paths(truncated_quartic, 0.01, [1.0], grid, 1100, seed=9)
    b = sde_sim.simulate_paths(truncated_quartic, 0.01, [1.0], grid, 1100, seed=9, workers=workers)
    assert a.paths.tobytes() == b.paths.tobytes()


def test_path_streams_independent_of_ensemble_size(ou1):
    grid = np.linspace(0, 1, 3)
    small = sde_sim.simulate_paths(ou1, 0.1, [1.0], grid, 8, seed=5)
    large = sde_sim.simulate_paths(ou1, 0.1, [1.0], grid, 600, seed=5)
    np.testing.assert_array_equal(small.paths, large.paths[:8])


def test_nonuniform_grid_lands_on_marks(ou1):
    grid = [0.0, 0.013, 0.5, 2.0]
    ens = sde_sim.simulate_paths(ou1, 0.0, [1.0], grid, 2, seed=0)
    # the 0.013 interval is split into two equal Euler steps below h = 0.01
    assert ens.paths[0, 1, 0] == pytest.approx((1 - 0.0065) ** 2, rel=1e-14)
    np.testing.assert_array_equal(ens.times, grid)


@pytest.mark.parametrize("grid", [[0.0], [0.5, 1.0], [0.0, 1.0, 0.5]])
def test_grid_validation(ou1, grid):
    with pytest.raises(ConfigError):
        sde_sim.simulate_paths(ou1, 0.1, [1.0], grid, 4, seed=0)


def test_divergence_detected(quartic):
    # a step far beyond the stability limit makes Euler explode
    with pytest.raises(DivergenceError):
        sde_sim.simulate_paths(quartic, 0.0, [3.0], [0.0, 5.0], 2, seed=0, h=0.5)


# -- moments ----------------------------------------------------------------------------


@pytest.mark.parametrize("m, n, c", [(1, 1, 1), (1, 2, 3), (3, 1, 3), (2, 2, 8)])
def test_moment_constant(m, n, c):
    assert sde_sim.moment_constant(m, n) == c


def test_moment_report_ou(ou_ensemble):
    rep = sde_sim.moment_report(ou_ensemble)
    assert rep.all_passed
    k = list(ou_ensemble.times).index(2.0)
    _, var = ou_law(1.0, 1.0, 0.01, 2.0)
    assert var == pytest.approx(0.004908, abs=1e-6)
    assert abs(rep.estimates[1][k] - var) <= 3 * rep.stderr[1][k] + 1e-4
    assert rep.bounds[1][k] == pytest.approx(0.02)
    lo, hi = rep.confidence_band(1)
    assert np.all(lo <= rep.estimates[1]) and np.all(rep.estimates[1] <= hi)


def test_moment_report_needs_paths(ou1):
    ens = sde_sim.simulate_coupled_linearization(ou1, 0.01, [1.0], [0.0, 1.0], 50, 0)
    with pytest.raises(InsufficientSampleError):
        sde_sim.moment_report(ens)


def test_moment_report_needs_coupled(ou1):
    ens = sde_sim.simulate_paths(ou1, 0.01, [1.0], [0.0, 1.0], 200, 0)
    with pytest.raises(ConfigError):
        sde_sim.moment_report(ens)


def test_moment_rows_schema(ou_ensemble):
    rows = list(sde_sim.moment_report(ou_ensemble).rows())
    assert len(rows) == 2 * len(ou_ensemble.times)
    assert all(len(r) == 6 for r in rows)


def test_residual_quartic_within_fitted_bound(quartic):
    res = sde_sim.coupling_residual_scaling(quartic, [1.0], 5.0, [1e-2, 1e-3, 1e-4], 10_000, seed=4)
    assert res.consistent.all()
    k = list(res.epsilons).index(1e-4)
    assert res.estimates[k] <= res.C_fit * 1e-4 ** 1.5 * 5 ** 2.5


# -- stationary sampling --------------------------------------------------------------


def test_exact_gaussian_samples(quad2):
    s = sde_sim.sample_stationary(quad2, 0.1, 20_000, 1, method="exact-gaussian")
    cov = np.cov(s.T)
    np.testing.assert_allclose(cov, 0.05 * np.diag([1.0, 0.5]), atol=0.05 * 0.05)


def test_exact_gaussian_requires_quadratic(quartic):
    with pytest.raises(ConfigError):
        sde_sim.sample_stationary(quartic, 0.1, 10, 1, method="exact-gaussian")


def test_mala_matches_gibbs_density(quartic):
    s = sde_sim.sample_stationary(quartic, 0.01, 100_000, 7)
    specs = dens.auto_grid(quartic, 0.01, n=512)
    mu = dens.stationary_density(quartic, 0.01, grid=specs)
    assert dens.tv_between_grids(dens.kde_density(s, grid=specs), mu) <= 0.02


def test_long_run_variance(ou1):
    s = sde_sim.sample_stationary(ou1, 0.1, 4000, 3, method="long-run")
    assert abs(s.var() - 0.05) <= 3 * 0.05 * math.sqrt(2 / 4000) + 0.002


def test_empty_sample(ou1):
    assert sde_sim.sample_stationary(ou1, 0.1, 0, 0).shape == (0, 1)


# -- export ----------------------------------------------------------------------------


def test_binary_roundtrip(tmp_path, ou_ensemble):
    p = tmp_path / "ens.bin"
    sde_sim.export_binary(ou_ensemble, p)
    back = sde_sim.read_binary(p)
    np.testing.assert_array_equal(back["paths"], ou_ensemble.paths)
    np.testing.assert_array_equal(back["linear"], ou_ensemble.linear)
    np.testing.assert_array_equal(back["times"], ou_ensemble.times)
    assert back["seed"] == ou_ensemble.seed
    assert back["kind"] == "coupled-pair"


def test_binary_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a trajectory")
    with pytest.raises(ConfigError):
        sde_sim.read_binary(p)


def test_summary_csv(ou_ensemble):
    lines = sde_sim.summary_csv(ou_ensemble).strip().splitlines()
    assert lines[0].startswith("t,")
    assert len(lines) == 1 + len(ou_ensemble.times)
