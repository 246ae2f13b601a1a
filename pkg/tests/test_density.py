import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutofflab import density as dens
from cutofflab import dynamics as dyn
from cutofflab.errors import (
    BandwidthError,
    ConfigError,
    IncompatibleGridError,
    InsufficientSampleError,
    ParameterError,
    PreconditionError,
)
from oracles import gibbs_moments_quad, ou_law, tv_shift_quad


def ou_tv_error(sol, alpha, x0, eps):
    errs = []
    for t, d in zip(sol.times, sol.densities):
        m, v = ou_law(alpha, x0, eps, t)
        g = dens.gaussian_density([m], [[v]], d.axes)
        errs.append(dens.tv_between_grids(d, g))
    return np.array(errs)


# -- grids -----------------------------------------------------------------------------


def test_grid_spec_validation():
    with pytest.raises(ConfigError):
        dens.GridSpec(1.0, 0.0, 10)
    with pytest.raises(ConfigError):
        dens.GridSpec(0.0, 1.0, 2)


def test_density_grid_rejects_negative():
    with pytest.raises(ConfigError):
        dens.DensityGrid((np.linspace(0, 1, 3),), np.array([0.1, -0.1, 0.2]))


def test_auto_grid_covers_initial_point(ou1):
    (spec,) = dens.auto_grid(ou1, 1e-4, include=[1.0])
    assert spec.hi >= 1.0 + 10 * math.sqrt(0.5e-4) - 1e-12
    assert spec.n == dens.DEFAULT_CELLS


# -- stationary densities --------------------------------------------------------------


@pytest.mark.parametrize("alpha, eps", [(1.0, 0.1), (2.5, 1e-3)])
def test_stationary_quadratic_is_gaussian(alpha, eps):
    m = dyn.ou_diagonal([alpha])
    mu = dens.stationary_density(m, eps)
    g = dens.gaussian_density([0.0], [[eps / (2 * alpha)]], mu.axes)
    np.testing.assert_allclose(mu.values, g.values, atol=1e-10 * g.values.max())


def test_stationary_symmetric(quartic):
    mu = dens.stationary_density(quartic, 0.05, grid=dens.GridSpec(-2, 2, 801))
    np.testing.assert_allclose(mu.values, mu.values[::-1], rtol=1e-12, atol=0)


def test_stationary_normalised(quartic):
    mu = dens.stationary_density(quartic, 0.01)
    assert mu.integral() == pytest.approx(1.0, abs=1e-8)


def test_stationary_variance_against_quadrature(quartic):
    eps = 0.5
    mu = dens.stationary_density(quartic, eps)
    x = mu.axes[0]
    var = np.trapezoid(x * x * mu.values, x)
    _, ref = gibbs_moments_quad(lambda z: z * z / 2 + z ** 4 / 4, eps, -8, 8)
    assert var == pytest.approx(ref, rel=1e-8)


def test_stationary_widening_reaches_tail(quartic):
    # the initial +-10 sigma box is wider than needed; the boundary ratio holds
    mu = dens.stationary_density(quartic, 2.0)
    assert max(mu.values[0], mu.values[-1]) < 1e-16 * mu.values.max()


def test_stationary_2d(quad2):
    mu = dens.stationary_density(quad2, 0.1)
    assert mu.values.shape == (dens.DEFAULT_CELLS_2D,) * 2
    assert mu.integral() == pytest.approx(1.0, abs=1e-8)


def test_stationary_rejects_3d():
    with pytest.raises(PreconditionError):
        dens.stationary_density(dyn.ou_diagonal([1.0, 1.0, 1.0]), 0.1)


def test_gaussian_approx_quadratic_is_zero(quad2):
    assert dens.gaussian_approx_distance(quad2, 0.3) <= 1e-8


def test_gaussian_approx_decreases(truncated_quartic):
    d = [dens.gaussian_approx_distance(truncated_quartic, e) for e in (1e-2, 1e-4)]
    assert d[1] < d[0]


# -- tv_between_grids -------------------------------------------------------------------


def test_tv_grids_shift_two():
    x = np.linspace(-12, 14, 4001)
    a = dens.gaussian_density([0.0], [[1.0]], (x,))
    b = dens.gaussian_density([2.0], [[1.0]], (x,))
    assert dens.tv_between_grids(a, b) == pytest.approx(tv_shift_quad(2.0), abs=1e-5)
    assert dens.tv_between_grids(a, a) == 0.0


def test_tv_grids_disjoint_boxes():
    x = np.linspace(0, 4, 4001)
    a = np.where(x <= 1, 1.0, 0.0)
    b = np.where(x >= 3, 1.0, 0.0)
    da = dens.DensityGrid((x,), a).normalized()
    db = dens.DensityGrid((x,), b).normalized()
    assert dens.tv_between_grids(da, db) == pytest.approx(1.0, abs=1e-8)


def test_tv_grids_incompatible():
    a = dens.gaussian_density([0.0], [[1.0]], (np.linspace(-5, 5, 101),))
    b = dens.gaussian_density([0.0], [[1.0]], (np.linspace(-5, 5, 103),))
    with pytest.raises(IncompatibleGridError):
        dens.tv_between_grids(a, b)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_tv_grids_symmetric(m1, m2):
    x = np.linspace(-10, 10, 801)
    a = dens.gaussian_density([m1], [[1.0]], (x,))
    b = dens.gaussian_density([m2], [[1.0]], (x,))
    assert dens.tv_between_grids(a, b) == dens.tv_between_grids(b, a)


# -- Fokker-Planck -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ou_fp_coarse(ou1):
    spec = dens.auto_grid(ou1, 0.01, n=256, include=[1.0])[0]
    return dens.solve_fokker_planck_1d(ou1, 0.01, 1.0, 2.0, grid=spec, record=[0.5, 1.0, 1.5])


@pytest.fixture(scope="module")
def ou_fp_fine(ou1):
    spec = dens.auto_grid(ou1, 0.01, n=512, include=[1.0])[0]
    return dens.solve_fokker_planck_1d(ou1, 0.01, 1.0, 2.0, grid=spec, record=[0.5, 1.0, 1.5])


def test_fp_mass_and_positivity(ou_fp_coarse):
    for d in ou_fp_coarse.densities:
        assert np.sum(d.values) * ou_fp_coarse.dx == pytest.approx(1.0, abs=1e-8)
        assert np.all(d.values >= 0)
    assert ou_fp_coarse.clipped_mass <= 1e-10
    assert ou_fp_coarse.mass_error <= 1e-8


def test_fp_records_requested_times(ou_fp_coarse):
    np.testing.assert_allclose(ou_fp_coarse.times, [0.5, 1.0, 1.5, 2.0])


def test_fp_converges_under_refinement(ou_fp_coarse, ou_fp_fine):
    coarse = ou_tv_error(ou_fp_coarse, 1.0, 1.0, 0.01)
    fine = ou_tv_error(ou_fp_fine, 1.0, 1.0, 0.01)
    assert np.all(fine * 2 <= coarse)


@pytest.mark.slow
def test_fp_ou_reference_resolution(ou1):
    sol = dens.solve_fokker_planck_1d(ou1, 0.01, 1.0, 1.0)
    assert ou_tv_error(sol, 1.0, 1.0, 0.01).max() <= 1e-3


def test_fp_quadratic_matches_linear_law():
    m = dyn.quadratic([[2.0]])
    spec = dens.auto_grid(m, 0.02, n=1024, include=[0.8])[0]
    sol = dens.solve_fokker_planck_1d(m, 0.02, 0.8, 1.0, grid=spec)
    mean, cov = dyn.linear_law_at(m, 0.02, [0.8], [1.0])
    g = dens.gaussian_density(mean[0], cov[0], sol.densities[-1].axes)
    assert dens.tv_between_grids(sol.densities[-1], g) <= 1e-3


def test_fp_reaches_stationarity_and_approaches_monotonically(ou1):
    eps = 0.1
    spec = dens.auto_grid(ou1, eps, n=256, include=[1.0])[0]
    marks = list(np.linspace(0.5, 30.0, 60))
    sol = dens.solve_fokker_planck_1d(ou1, eps, 1.0, 30.0, grid=spec, record=marks)
    mu = dens.stationary_density(ou1, eps, grid=spec)
    tv = np.array([dens.tv_between_grids(d, mu) for d in sol.densities])
    assert tv[-1] <= 1e-3
    assert np.all(np.diff(tv) <= 1e-6)


def test_fp_stationary_drift_balanced(ou1):
    eps = 0.1
    spec = dens.auto_grid(ou1, eps, n=256)[0]
    mu = dens.stationary_density(ou1, eps, grid=spec)
    sol = dens.solve_fokker_planck_1d(ou1, eps, 0.0, 10.0, grid=spec, initial=mu, balanced=True)
    assert dens.tv_between_grids(sol.densities[-1], mu) <= 1e-6


def test_fp_stationary_drift_default_is_second_order(ou1):
    # the unbalanced scheme drifts to its own discrete equilibrium, O(dx^2) away
    eps = 0.1
    drift = []
    for n in (128, 256):
        spec = dens.auto_grid(ou1, eps, n=n)[0]
        mu = dens.stationary_density(ou1, eps, grid=spec)
        sol = dens.solve_fokker_planck_1d(ou1, eps, 0.0, 10.0, grid=spec, initial=mu)
        drift.append(dens.tv_between_grids(sol.densities[-1], mu))
    assert drift[1] * 3 <= drift[0]


def test_fp_rejects_unstable_dt(ou1):
    spec = dens.auto_grid(ou1, 0.01, n=256, include=[1.0])[0]
    with pytest.raises(ParameterError):
        dens.solve_fokker_planck_1d(ou1, 0.01, 1.0, 1.0, grid=spec, dt=1.0)


def test_fp_requires_1d(quad2):
    with pytest.raises(PreconditionError):
        dens.solve_fokker_planck_1d(quad2, 0.01, [1.0, 1.0], 1.0)


# -- KDE -----------------------------------------------------------------------------------


def test_scott_rule():
    s = np.random.default_rng(0).standard_normal((10_000, 1))
    assert dens.scott_bandwidth(s)[0] == pytest.approx(10_000 ** -0.2, rel=0.03)


def test_kde_against_true_density():
    s = np.random.default_rng(1).standard_normal(100_000)
    k = dens.kde_density(s, grid=dens.GridSpec(-8, 8, 1024))
    g = dens.gaussian_density([0.0], [[1.0]], k.axes)
    assert dens.tv_between_grids(k, g) <= 0.02


def test_kde_2d_against_true_density():
    rng = np.random.default_rng(2)
    cov = np.array([[1.0, 0.4], [0.4, 0.5]])
    s = rng.multivariate_normal([0, 0], cov, size=100_000)
    grid = [dens.GridSpec(-6, 6, 256), dens.GridSpec(-5, 5, 256)]
    k = dens.kde_density(s, grid=grid)
    g = dens.gaussian_density([0, 0], cov, k.axes)
    assert k.integral() == pytest.approx(1.0, abs=1e-8)
    assert dens.tv_between_grids(k, g) <= 0.03


def test_kde_deterministic():
    s = np.random.default_rng(3).standard_normal(500)
    a = dens.kde_density(s)
    b = dens.kde_density(s.copy())
    assert a.values.tobytes() == b.values.tobytes()


def test_kde_errors():
    with pytest.raises(InsufficientSampleError):
        dens.kde_density(np.zeros(50))
    with pytest.raises(BandwidthError):
        dens.kde_density(np.ones(200))
    with pytest.raises(PreconditionError):
        dens.kde_density(np.zeros((200, 3)))


def test_to_csv_header():
    d = dens.gaussian_density([0.0], [[1.0]], (np.linspace(-1, 1, 5),))
    lines = dens.to_csv(d).strip().splitlines()
    assert lines[0] == "x,density"
    assert len(lines) == 6
