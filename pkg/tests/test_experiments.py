import csv
import io
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cutofflab import dynamics as dyn
from cutofflab import experiments as ex
from cutofflab.errors import (
    ConfigError,
    ExceptionalInitialConditionError,
    InsufficientSampleError,
    ModelError,
    ParameterError,
    PreconditionError,
    UnsupportedDimensionError,
)
from oracles import rotating_flow, tv_shift_quad


# -- schedules -------------------------------------------------------------------------


def test_linearized_schedule_example():
    s = ex.cutoff_schedule(1.0, math.exp(-10))
    assert s.t_eps == pytest.approx(5.0)
    assert s.w_eps == 1.0 and s.delta_eps == 0.0


def test_nonlinear_schedule_example():
    s = ex.cutoff_schedule(1.0, 1e-2, "nonlinear", gamma=1 / 8)
    assert s.t_eps == pytest.approx(2.302585, abs=1e-6)
    assert s.delta_eps == pytest.approx(0.562341, abs=1e-6)
    assert s.w_eps == pytest.approx(1.562341, abs=1e-6)


@given(st.floats(-5, 5), st.floats(1e-8, 0.5), st.floats(0.1, 5))
def test_shifted_time_is_window_time(b, eps, a1):
    # t_eps + b/alpha1 + b delta equals t_eps + b w_eps
    s = ex.cutoff_schedule(a1, eps, "nonlinear")
    assert s.shifted_time(b) == pytest.approx(s.time(b), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("eps, gamma", [(0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 0.3)])
def test_schedule_parameter_errors(eps, gamma):
    with pytest.raises(ParameterError):
        ex.cutoff_schedule(1.0, eps, "nonlinear", gamma)


def test_schedule_rejects_bad_alpha():
    with pytest.raises(ModelError):
        ex.cutoff_schedule(0.0, 0.1)


# -- profile ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ou_spec():
    return dyn.spectral_at_origin(dyn.ou_diagonal([1.0]))


def test_profile_value_at_zero(ou_spec):
    # |sqrt2 v| = sqrt2, so G(0) = erf(1/2)
    assert ex.profile_G(ou_spec, [1.0], 0.0) == pytest.approx(math.erf(0.5), abs=1e-12)
    assert ex.profile_G(ou_spec, [1.0], 0.0) == pytest.approx(0.520500, abs=1e-6)


def test_profile_limits(ou_spec):
    assert ex.profile_G(ou_spec, [1.0], -5.0) >= 1 - 1e-6
    assert ex.profile_G(ou_spec, [1.0], 40.0) <= 1e-9
    assert ex.profile_G(ou_spec, [1.0], -10.0) == pytest.approx(1.0, abs=1e-12)
    assert ex.profile_G(ou_spec, [1.0], 10.0) <= 1e-4
    assert ex.profile_G(ou_spec, [1.0], -1e6) == 1.0


def test_profile_monotone(ou_spec):
    g = [ex.profile_G(ou_spec, [0.7], b) for b in np.linspace(-6, 6, 49)]
    assert all(x >= y for x, y in zip(g, g[1:]))


def test_profile_is_shifted_gaussian_tv(ou_spec):
    b = 0.3
    assert ex.profile_G(ou_spec, [1.0], b) == pytest.approx(tv_shift_quad(math.sqrt(2) * math.exp(-b)), abs=1e-9)


def test_profile_exceptional_direction(ou_spec):
    with pytest.raises(ExceptionalInitialConditionError):
        ex.profile_G(ou_spec, [0.0], 0.0)
    # x0 on the fast axis has no component along the slowest direction
    with pytest.raises(ExceptionalInitialConditionError):
        ex.profile_curve(dyn.ou_diagonal([1.0, 2.0]), [0.0, 1.0])


def test_profile_curve_kind():
    cv = ex.profile_curve(dyn.ou_diagonal([1.0]), [1.0], [-1.0, 0.0, 1.0])
    assert cv.kind == "profile-G"
    np.testing.assert_array_equal(cv.distances, cv.G)


# -- linearised curves ----------------------------------------------------------------


@pytest.mark.filterwarnings("ignore:eps=0.01:RuntimeWarning")
def test_linearized_ou_converges_to_profile(ou1):
    dev = [ex.linearized_distance_curve(ou1, e, [1.0]).max_deviation() for e in (1e-2, 1e-4, 1e-6)]
    assert dev[2] <= 0.01
    assert dev[0] > dev[1] > dev[2]


def test_linearized_far_right_is_equilibrated(ou1):
    cv = ex.linearized_distance_curve(ou1, 1e-6, [1.0], [20.0])
    assert cv.distances[0] <= 1e-6


def test_linearized_skips_negative_times(ou1):
    with pytest.warns(RuntimeWarning, match="skipped"):
        cv = ex.linearized_distance_curve(ou1, 0.1, [1.0], [-3.0, -2.0, 0.0, 1.0])
    # t_eps = 1.15 here, so c = -2 and -3 give negative times
    assert cv.skipped == (-3.0, -2.0)
    assert len(cv.points) == 2


def test_linearized_quadratic_2d(quad2):
    cv = ex.linearized_distance_curve(quad2, 1e-6, [1.0, 1.0])
    assert cv.max_deviation() <= 0.01
    # saturated at 1 on the far left, strictly decreasing afterwards
    assert np.all(np.diff(cv.distances) <= 0)
    assert np.all(np.diff(cv.distances[cv.c >= -1]) < 0)


def test_linearized_zero_direction_gives_nan_profile(quad2):
    with pytest.warns(RuntimeWarning, match="vanishes"):
        cv = ex.linearized_distance_curve(quad2, 1e-3, [0.0, 1.0], [0.0, 1.0])
    assert np.all(np.isnan(cv.G))


def test_curve_csv_schema(ou1):
    cv = ex.linearized_distance_curve(ou1, 1e-3, [1.0], [0.0, 1.0])
    rows = list(csv.reader(io.StringIO(ex.curve_csv(cv))))
    assert tuple(rows[0]) == ex.CURVE_HEADER
    assert len(rows) == 3
    assert float(rows[1][3]) == cv.points[0].distance


@pytest.mark.parametrize("value, text", [(0.1, "0.10000000000000001"), (True, "true"), (False, "false"), (3, "3")])
def test_format_float(value, text):
    assert ex.format_float(value) == text


def test_c_grid_validation(ou1):
    with pytest.raises(ConfigError):
        ex.linearized_distance_curve(ou1, 0.1, [1.0], [1.0, 0.0])
    with pytest.raises(ConfigError):
        ex.linearized_distance_curve(ou1, 0.1, [1.0], [])


# -- nonlinear curves -----------------------------------------------------------------


def test_fp_curve_matches_linear_for_quadratic():
    m = dyn.quadratic([[1.5]])
    c = [-1.0, 0.0, 1.0, 2.0]
    fp = ex.nonlinear_distance_curve(m, 1e-3, [1.0], c, cells=1024)
    lin = ex.linearized_distance_curve(m, 1e-3, [1.0], c, variant="nonlinear")
    np.testing.assert_allclose(fp.c, lin.c)
    np.testing.assert_allclose(fp.distances, lin.distances, atol=2e-3)
    assert fp.kind == "fokker-planck"


def test_method_dimension_errors(quad2):
    with pytest.raises(UnsupportedDimensionError):
        ex.nonlinear_distance_curve(quad2, 1e-2, [1.0, 1.0], method="fokker-planck")
    with pytest.raises(UnsupportedDimensionError):
        ex.nonlinear_distance_curve(dyn.ou_diagonal([1.0, 1.0, 1.0]), 1e-2, [1.0] * 3, method="kde")
    with pytest.raises(ConfigError):
        ex.nonlinear_distance_curve(quad2, 1e-2, [1.0, 1.0], method="histogram")


def test_kde_needs_enough_paths(ou1):
    with pytest.raises(InsufficientSampleError):
        ex.nonlinear_distance_curve(ou1, 1e-2, [1.0], method="kde", n_paths=1000)


@pytest.mark.slow
def test_kde_curve_ou(ou1):
    c = [0.0, 1.0]
    kde = ex.nonlinear_distance_curve(ou1, 1e-3, [1.0], c, method="kde", n_paths=100_000,
                                      bootstrap=5, seed=3)
    lin = ex.linearized_distance_curve(ou1, 1e-3, [1.0], c, variant="nonlinear")
    assert np.all(np.isfinite([p.stderr for p in kde.points]))
    np.testing.assert_allclose(kde.distances, lin.distances, atol=0.03)


# -- rotating system ------------------------------------------------------------------


def test_rotating_without_rotation_is_ou(ou1):
    c = [-1.0, 0.0, 1.0]
    rot = ex.rotating_frame_curve(1.0, 0.0, [1.0, 0.0], 1e-4, c)
    ou = ex.linearized_distance_curve(dyn.ou_diagonal([1.0, 1.0]), 1e-4, [1.0, 0.0], c)
    np.testing.assert_allclose(rot.distances, ou.distances, atol=1e-9)


def test_rotating_frame_removes_rotation():
    rot = ex.rotating_frame_curve(1.0, 2.0, [1.0, 0.5], 1e-6)
    assert rot.extras["frame_deviation"].max() <= 1e-12
    assert rot.max_deviation() <= 1e-5
    np.testing.assert_allclose(rot.extras["stationary_cov"], 0.5e-6 * np.eye(2), rtol=1e-12)


def test_rotating_mean_matches_oracle():
    # the frame-corrected mean is exp(-a t) x0 whatever b is
    a, b, t = 0.8, 1.7, 2.3
    x0 = np.array([0.3, -1.1])
    m = rotating_flow(a, b, x0, t)
    R = dyn.rotation(-b * t)
    np.testing.assert_allclose(R @ m, math.exp(-a * t) * x0, atol=1e-13)


def test_rotating_principal_root_profile_differs():
    rot = ex.rotating_frame_curve(1.0, 2.0, [1.0, 0.0], 1e-6, [0.0])
    assert rot.G[0] == pytest.approx(0.5205, abs=1e-4)
    assert abs(rot.extras["G_principal"][0] - rot.G[0]) > 0.1


def test_rotating_rejects_bad_input():
    with pytest.raises(ModelError):
        ex.rotating_frame_curve(0.0, 1.0, [1.0, 0.0], 1e-3)
    with pytest.raises(ConfigError):
        ex.rotating_frame_curve(1.0, 1.0, [1.0], 1e-3)


# -- verdicts and truncation ----------------------------------------------------------


def test_verdict_small_eps_passes(ou1):
    v = ex.cutoff_verdict(ou1, 1e-10, [1.0])
    assert v.pre_distance >= 0.9 and v.post_distance <= 0.1
    assert v.passed


def test_verdict_moderate_eps_fails(ou1):
    v = ex.cutoff_verdict(ou1, 1e-3, [1.0])
    assert not v.passed


def test_exit_bound_formula():
    assert ex.exit_bound(0.01, 2.0, 3.0, 1.0) == pytest.approx(2e-4 * 4 / (4 - 0.02) ** 2)
    assert ex.exit_bound(1.0, 10.0, 2.0, 0.0) == math.inf


def test_truncation_far_level_is_invisible(quartic):
    rep = ex.truncation_comparison(quartic, [50.0], 1e-2, [1.0], n_paths=200)
    assert rep.rows[0].stationary_tv <= 1e-10
    assert rep.rows[0].exit_probability == 0.0
    assert rep.all_within_bound


def test_truncation_precondition(quartic):
    with pytest.raises(PreconditionError):
        ex.truncation_comparison(quartic, [1.0], 1e-2, [1.0])
    with pytest.raises(UnsupportedDimensionError):
        ex.truncation_comparison(dyn.quadratic(np.eye(2)), [3.0], 1e-2, [1.0, 0.0])


def test_truncation_tv_decreases_with_M(quartic):
    # only a very wide Gibbs measure feels the truncation at these levels
    rep = ex.truncation_comparison(quartic, [2.0, 3.0, 5.0], 0.99, [1.0], n_paths=100)
    tv = [r.stationary_tv for r in rep.rows]
    assert tv[0] > tv[1] > tv[2] >= 0


def test_truncation_csv_rows(quartic):
    rep = ex.truncation_comparison(quartic, [3.0, 5.0], 1e-2, [1.0], n_paths=100, seed=1)
    rows = rep.csv_rows()
    assert len(rows) == 2 and len(rows[0]) == len(ex.TruncationReport.HEADER)
    assert rows[0][-1] is True


# -- config and runner ----------------------------------------------------------------


def base_config(**over):
    cfg = {"model": {"kind": "ou-diagonal", "rates": [1.0]}, "x0": [1.0], "epsilons": [0.01],
           "c_grid": [-1.0, 0.0, 1.0], "seed": 7}
    cfg.update(over)
    return cfg


def test_derive_seed_properties():
    assert ex.derive_seed(1, 0) == ex.derive_seed(1, 0)
    assert ex.derive_seed(1, 0) != ex.derive_seed(1, 1)
    assert 0 <= ex.derive_seed(5, 3) < 2 ** 63


@pytest.mark.parametrize(
    "patch",
    [
        {"colour": "blue"},
        {"solver": {"n_pathz": 3}},
        {"thresholds": {"middle": 0.5}},
        {"tasks": ["profile", "sing"]},
        {"tasks": ["profile", "profile"]},
        {"epsilons": [2.0]},
        {"x0": [1.0, 2.0]},
        {"gamma": 0.5},
        {"model": {"kind": "mystery"}},
    ],
)
def test_config_rejects(patch):
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_dict(base_config(**patch))


def test_config_missing_key():
    raw = base_config()
    del raw["epsilons"]
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_dict(raw)


def test_config_hash_ignores_order_and_output():
    a = ex.ExperimentConfig.from_dict(base_config(output_dir="x"))
    raw = dict(reversed(list(base_config(output_dir="y").items())))
    b = ex.ExperimentConfig.from_dict(raw)
    assert a.hash == b.hash
    assert a.hash != ex.ExperimentConfig.from_dict(base_config(seed=8)).hash


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ex.load_config(tmp_path / "absent.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ex.load_config(p)


def test_load_config_relative_output(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(base_config(output_dir="res")))
    assert ex.load_config(p).output_dir == str(tmp_path / "res")


def test_empty_task_list_writes_only_manifest(tmp_path):
    man = ex.run_experiment(base_config(), output_dir=tmp_path)
    assert man.files == []
    assert man.exit_code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]


def test_profile_task_output(tmp_path):
    man = ex.run_experiment(base_config(tasks=["profile"], epsilons=[1e-2, 1e-4]), output_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "profile.csv")))
    assert list(rows[0]) == list(ex.CURVE_HEADER)
    assert len(rows) == 6
    assert [v["epsilon"] for v in man.verdicts] == [1e-2, 1e-4]
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["config_hash"] == man.config_hash
    assert data["files"][0]["name"] == "profile.csv"
    assert data["thresholds"] == {"pre": 0.9, "post": 0.1}


def test_partial_failure(tmp_path):
    # fp needs a 1-D model; the 2-D profile task still succeeds
    cfg = base_config(model={"kind": "quadratic", "A": [[1.0, 0.0], [0.0, 2.0]]}, x0=[1.0, 1.0],
                      tasks=["profile", "fp"])
    man = ex.run_experiment(cfg, output_dir=tmp_path)
    assert man.tasks["profile"]["status"] == "ok"
    assert man.tasks["fp"]["status"] == "error"
    assert man.exit_code == 2
    assert not (tmp_path / "profile_fp.csv").exists()
    assert (tmp_path / "profile.csv").exists()


def test_warnings_recorded_in_manifest(tmp_path):
    man = ex.run_experiment(base_config(tasks=["profile"], epsilons=[0.1], c_grid=[-3.0, 0.0]),
                            output_dir=tmp_path)
    assert any("skipped" in w for w in man.tasks["profile"]["warnings"])


def test_runner_lyapunov_and_semiflow(tmp_path):
    cfg = base_config(tasks=["lyapunov", "semiflow"], epsilons=[0.01, 0.02], solver={"n_out": 5})
    man = ex.run_experiment(cfg, output_dir=tmp_path)
    names = sorted(f["name"] for f in man.files)
    assert names == ["lyapunov_0.csv", "lyapunov_1.csv", "semiflow.csv"]
    rows = list(csv.reader(open(tmp_path / "lyapunov_1.csv")))
    assert rows[0] == ["t", "entry_00"]
    assert len(rows) == 1 + 6


def test_runner_accepts_config_object(tmp_path):
    cfg = ex.ExperimentConfig.from_dict(base_config(tasks=["semiflow"]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        man = ex.run_experiment(cfg, output_dir=tmp_path)
    assert man.exit_code == 0
