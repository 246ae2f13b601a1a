"""Cutoff schedules, profile curves and reproducible experiment runs.

The distance-to-equilibrium of the diffusion is sampled along the window
``t = t_eps + c * w_eps`` and compared with the limiting profile ``G(c)``.
Linearised curves are exact Gaussian computations; nonlinear curves come
from the Fokker-Planck solver or from kernel density estimates of
simulated paths.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from . import __version__
from . import density as dens
from . import dynamics as dyn
from . import sde_sim
from .errors import (
    ConfigError,
    CutoffLabError,
    ExceptionalInitialConditionError,
    InsufficientSampleError,
    ModelError,
    ParameterError,
    PreconditionError,
    UnsupportedDimensionError,
)
from .gaussian_tv import GaussianDist, spd_inv_sqrt, spd_sqrt, tv_general, tv_identity_cov

__all__ = [
    "DEFAULT_C_GRID",
    "DEFAULT_GAMMA",
    "CutoffSchedule",
    "CurvePoint",
    "ProfileCurve",
    "CutoffVerdict",
    "TruncationRow",
    "TruncationReport",
    "ExperimentConfig",
    "RunManifest",
    "cutoff_schedule",
    "profile_G",
    "profile_curve",
    "linearized_distance_curve",
    "nonlinear_distance_curve",
    "rotating_frame_curve",
    "truncation_comparison",
    "cutoff_verdict",
    "derive_seed",
    "load_config",
    "run_experiment",
    "format_float",
    "curve_csv",
]

DEFAULT_C_GRID = tuple(float(c) for c in np.arange(-3.0, 3.0 + 1e-9, 0.5))
DEFAULT_GAMMA = 1.0 / 16.0
MIN_KDE_PATHS = 100_000
# whitened covariance this close to I counts as converged
CONVERGED_COV = 1e-13


# ---------------------------------------------------------------------------
# schedules and profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffSchedule:
    """Cutoff time ``t_eps`` and window ``w_eps`` for one noise level.

    Attributes
    ----------
    epsilon : float
    t_eps : float
        ``ln(1/eps) / (2 alpha1)``.
    w_eps : float
        ``1/alpha1``, plus ``delta_eps`` for the nonlinear variant.
    delta_eps : float
        ``eps**gamma``; zero for the linearised variant.
    gamma : float
    alpha1 : float
    variant : str
    """

    epsilon: float
    t_eps: float
    w_eps: float
    delta_eps: float
    gamma: float
    alpha1: float
    variant: str

    def time(self, c):
        return self.t_eps + c * self.w_eps

    def shifted_time(self, b):
        """``t_eps + b/alpha1`` delayed by ``b * delta_eps``."""
        return (self.t_eps + b / self.alpha1) + b * self.delta_eps


def _alpha1(spectral):
    if isinstance(spectral, dyn.SpectralData):
        return spectral.alpha1
    a = float(spectral)
    if not a > 0:
        raise ModelError("alpha1 must be positive")
    return a


def cutoff_schedule(spectral, epsilon, variant="linearized", gamma=DEFAULT_GAMMA):
    """Cutoff schedule for noise level ``epsilon``.

    Parameters
    ----------
    spectral : SpectralData or float
        Spectral data at the origin, or ``alpha1`` directly.
    epsilon : float
        Must lie in ``(0, 1)``.
    variant : {"linearized", "nonlinear"}
    gamma : float
        Window-correction exponent in ``(0, 1/4]``.
    """
    eps = float(epsilon)
    if not 0 < eps < 1:
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    if not 0 < gamma <= 0.25:
        raise ParameterError(f"gamma must lie in (0, 1/4], got {gamma!r}")
    if variant not in ("linearized", "nonlinear"):
        raise ConfigError(f"unknown schedule variant {variant!r}")
    a1 = _alpha1(spectral)
    t_eps = math.log(1.0 / eps) / (2.0 * a1)
    delta = eps ** gamma if variant == "nonlinear" else 0.0
    return CutoffSchedule(eps, t_eps, 1.0 / a1 + delta, delta, float(gamma), a1, variant)


def _direction(v):
    if isinstance(v, dyn.AsymptoticDirection):
        v.require_nonzero()
        return np.asarray(v.v, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not np.any(v):
        raise ExceptionalInitialConditionError("v(x0) vanishes and the profile is undefined")
    return v


def profile_G(spectral, v, b):
    """Limiting profile ``G(b) = TV(N(sqrt2 e^-b H^{1/2} v, I), N(0, I))``.

    Parameters
    ----------
    spectral : SpectralData
    v : AsymptoticDirection or array_like
    b : float

    Raises
    ------
    ExceptionalInitialConditionError
        If ``v`` vanishes.
    """
    vec = _direction(v)
    # e^-b overflows below about -709; the profile is 1 there anyway
    scale = math.sqrt(2.0) * math.exp(-max(float(b), -700.0))
    return tv_identity_cov(scale * (spd_sqrt(spectral.hess0) @ vec))


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    c: float
    t: float
    distance: float
    stderr: float = math.nan
    G: float = math.nan


@dataclass(frozen=True, eq=False)
class ProfileCurve:
    """Distances along the cutoff window for one ``epsilon``.

    ``extras`` holds per-point side quantities keyed by name (for instance
    the alternative profile of the rotating system).
    """

    kind: str
    epsilon: float
    points: tuple
    schedule: Optional[CutoffSchedule] = None
    skipped: tuple = ()
    extras: dict = field(default_factory=dict)

    @property
    def c(self):
        return np.array([p.c for p in self.points])

    @property
    def distances(self):
        return np.array([p.distance for p in self.points])

    @property
    def G(self):
        return np.array([p.G for p in self.points])

    def max_deviation(self):
        """``max_c |distance - G|`` over points with a defined profile."""
        d = np.abs(self.distances - self.G)
        d = d[np.isfinite(d)]
        return float(d.max()) if d.size else math.nan

    def rows(self):
        return [(self.epsilon, p.c, p.t, p.distance, p.stderr, p.G) for p in self.points]


CURVE_HEADER = ("epsilon", "c", "t", "distance", "stderr", "G")


def format_float(x):
    """Shortest text that round-trips; fixed across platforms."""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_float(v) for v in r])
    return buf.getvalue()


def curve_csv(curves):
    """CSV text ``epsilon,c,t,distance,stderr,G`` for one or more curves."""
    if isinstance(curves, ProfileCurve):
        curves = [curves]
    return _csv_text(CURVE_HEADER, [r for cv in curves for r in cv.rows()])


def _check_c_grid(c_grid):
    c = np.asarray(list(c_grid), dtype=float)
    if c.ndim != 1 or c.size == 0 or not np.all(np.isfinite(c)):
        raise ConfigError("c grid must be a nonempty list of finite numbers")
    if np.any(np.diff(c) <= 0):
        raise ConfigError("c grid must be strictly increasing")
    return c


def _split_times(schedule, c_grid):
    times = np.array([schedule.time(c) for c in c_grid])
    keep = times > 0
    skipped = tuple(float(c) for c in c_grid[~keep])
    if skipped:
        warnings.warn(
            f"eps={schedule.epsilon:g}: c={list(skipped)} give t <= 0 and are skipped",
            RuntimeWarning,
            stacklevel=3,
        )
    return c_grid[keep], times[keep], skipped


def _profile_values(model, spectral, x0, c_kept):
    """``G`` on the grid, or NaN with a warning when ``v(x0)`` vanishes."""
    v = dyn.asymptotic_direction(model, x0, spectral=spectral)
    if v.near_zero:
        warnings.warn("v(x0) vanishes; the profile column is undefined", RuntimeWarning, stacklevel=3)
        return np.full(c_kept.size, math.nan)
    return np.array([profile_G(spectral, v.v, c) for c in c_kept])


def profile_curve(model, x0, c_grid=DEFAULT_C_GRID):
    """``G(c)`` sampled on ``c_grid`` (kind ``profile-G``)."""
    c = _check_c_grid(c_grid)
    spectral = dyn.spectral_at_origin(model)
    v = dyn.asymptotic_direction(model, x0, spectral=spectral).require_nonzero()
    pts = tuple(CurvePoint(float(ci), math.nan, profile_G(spectral, v, ci), math.nan,
                           profile_G(spectral, v, ci)) for ci in c)
    return ProfileCurve("profile-G", math.nan, pts)


def _gauss_tv(mean1, cov1, cov_ref, q=None):
    """TV between ``N(mean1, cov1)`` and ``N(0, cov_ref)``.

    Uses the one-dimensional identity-covariance formula once the whitened
    covariance equals the identity to rounding.
    """
    W = spd_inv_sqrt(cov_ref)
    Sw = W @ cov1 @ W.T
    if np.max(np.abs(Sw - np.eye(Sw.shape[0]))) <= CONVERGED_COV:
        return tv_identity_cov(W @ mean1)
    return tv_general(GaussianDist(mean1, cov1), GaussianDist(np.zeros_like(mean1), cov_ref), q)


def linearized_distance_curve(model, epsilon, x0, c_grid=DEFAULT_C_GRID, variant="linearized",
                              gamma=DEFAULT_GAMMA, h=None, q=None):
    """Exact distance of the linearised process from its Gaussian equilibrium.

    For each ``c`` the law ``N(psi(t), Delta_eps(t))`` at ``t = t_eps + c
    w_eps`` is compared with ``N(0, (eps/2) H(0)^{-1})``.  ``psi`` and
    ``Delta_eps`` come from one joint RK4 integration.

    Parameters
    ----------
    variant : {"linearized", "nonlinear"}
        Which window to sample; ``"nonlinear"`` puts the points at the same
        times as :func:`nonlinear_distance_curve`.

    Notes
    -----
    Points with ``t <= 0`` are skipped with a ``RuntimeWarning`` and listed
    in ``ProfileCurve.skipped``.
    """
    if model.dim > 3:
        raise UnsupportedDimensionError("linearised curves support dimension <= 3")
    c = _check_c_grid(c_grid)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    spectral = dyn.spectral_at_origin(model)
    sched = cutoff_schedule(spectral, epsilon, variant, gamma)
    c_kept, times, skipped = _split_times(sched, c)
    G = _profile_values(model, spectral, x0, c_kept)
    pts = []
    if times.size:
        means, covs = dyn.linear_law_at(model, sched.epsilon, x0, times, h=h)
        ref = 0.5 * sched.epsilon * np.linalg.inv(spectral.hess0)
        for ci, ti, m, S, g in zip(c_kept, times, means, covs, G):
            pts.append(CurvePoint(float(ci), float(ti), _gauss_tv(m, S, ref, q), math.nan, float(g)))
    return ProfileCurve("exact-linearized", sched.epsilon, tuple(pts), sched, skipped)


def _bootstrap_rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xB007])))


def nonlinear_distance_curve(model, epsilon, x0, c_grid=DEFAULT_C_GRID, method="fokker-planck",
                             gamma=DEFAULT_GAMMA, cells=None, n_paths=MIN_KDE_PATHS, seed=0,
                             bootstrap=20, workers=1, min_paths=MIN_KDE_PATHS, balanced=False):
    """Distance of the nonlinear diffusion from the Gibbs measure.

    Times follow the nonlinear window ``t_eps + c (1/alpha1 + eps^gamma)``.

    Parameters
    ----------
    method : {"fokker-planck", "kde"}
        ``fokker-planck`` solves the 1-D forward equation on ``cells``
        nodes; ``kde`` smooths ``n_paths`` simulated paths and attaches a
        bootstrap standard error from ``bootstrap`` resamples.
    cells : int, optional
        Grid size; 2048 (1-D) or 256 per axis (2-D) by default.
    min_paths : int
        Smallest ensemble accepted by the ``kde`` method.

    Raises
    ------
    UnsupportedDimensionError
        ``fokker-planck`` with ``dim != 1`` or ``kde`` with ``dim > 2``.
    InsufficientSampleError
        ``kde`` with fewer than ``min_paths`` paths.
    """
    if method not in ("fokker-planck", "kde"):
        raise ConfigError(f"unknown method {method!r}")
    if method == "fokker-planck" and model.dim != 1:
        raise UnsupportedDimensionError("the fokker-planck method needs a 1-D model")
    if method == "kde":
        if model.dim > 2:
            raise UnsupportedDimensionError("the kde method supports dimension <= 2")
        if n_paths < min_paths:
            raise InsufficientSampleError(f"kde needs at least {min_paths} paths, got {n_paths}")
    c = _check_c_grid(c_grid)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    spectral = dyn.spectral_at_origin(model)
    sched = cutoff_schedule(spectral, epsilon, "nonlinear", gamma)
    c_kept, times, skipped = _split_times(sched, c)
    G = _profile_values(model, spectral, x0, c_kept)
    specs = dens.auto_grid(model, sched.epsilon, n=cells, include=x0)
    mu = dens.stationary_density(model, sched.epsilon, grid=specs)
    pts = []
    if times.size and method == "fokker-planck":
        sol = dens.solve_fokker_planck_1d(model, sched.epsilon, x0, float(times[-1]), grid=specs,
                                          record=list(times), balanced=balanced)
        for ci, ti, d, g in zip(c_kept, sol.times, sol.densities, G):
            pts.append(CurvePoint(float(ci), float(ti), dens.tv_between_grids(d, mu), math.nan, float(g)))
    elif times.size:
        ens = sde_sim.simulate_paths(model, sched.epsilon, x0, np.concatenate([[0.0], times]),
                                     int(n_paths), seed, workers=workers)
        rng = _bootstrap_rng(seed)
        for k, (ci, ti, g) in enumerate(zip(c_kept, times, G)):
            s = ens.paths[:, k + 1]
            dist = dens.tv_between_grids(dens.kde_density(s, grid=specs), mu)
            reps = [dens.tv_between_grids(dens.kde_density(s[rng.integers(0, len(s), len(s))],
                                                           grid=specs), mu)
                    for _ in range(int(bootstrap))]
            se = float(np.std(reps, ddof=1)) if len(reps) > 1 else math.nan
            pts.append(CurvePoint(float(ci), float(ti), dist, se, float(g)))
    kind = "fokker-planck" if method == "fokker-planck" else "kde"
    return ProfileCurve(kind, sched.epsilon, tuple(pts), sched, skipped)


def rotating_frame_curve(a, b, x0, epsilon, c_grid=DEFAULT_C_GRID, q=None):
    """Exact curve of the linear system ``dx = -A x dt + sqrt(eps) dW``.

    Here ``A = [[a, b], [-b, a]]``.  The mean ``exp(-A t) x0`` and the
    covariance ``Sigma - exp(-A t) Sigma exp(-A t)^T`` are both taken into
    the rotating frame ``Rot(-b t)``.  ``Sigma`` solves the Lyapunov
    equation ``A Sigma + Sigma A^T = eps I``.  The comparison law is
    ``N(0, Sigma)`` and the schedule is ``t_eps = ln(1/eps) / (2a)``,
    ``w = 1/a``.

    ``G`` uses the square root of the symmetric part of ``A`` (``sqrt(a) I``).
    ``extras["G_principal"]`` holds the profile built from the principal
    square root of ``A`` itself, ``extras["frame_deviation"]`` the distance
    between the frame-corrected mean and ``exp(-a t) x0``.
    """
    a = float(a)
    b = float(b)
    if not a > 0:
        raise ModelError("the rotating system needs a > 0")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (2,):
        raise ConfigError("x0 must be a 2-vector")
    c = _check_c_grid(c_grid)
    A = np.array([[a, b], [-b, a]])
    sched = cutoff_schedule(a, epsilon, "linearized")
    c_kept, times, skipped = _split_times(sched, c)
    eps = sched.epsilon
    Sigma = linalg.solve_continuous_lyapunov(A, eps * np.eye(2))
    root_sym = math.sqrt(a) * np.eye(2)
    root_principal = np.real(linalg.sqrtm(A))
    pts, g_alt, dev = [], [], []
    for ci, ti in zip(c_kept, times):
        E = linalg.expm(-A * ti)
        R = dyn.rotation(-b * ti)
        mean = R @ (E @ x0)
        cov = R @ (Sigma - E @ Sigma @ E.T) @ R.T
        ref = R @ Sigma @ R.T
        scale = math.sqrt(2.0) * math.exp(-ci)
        pts.append(CurvePoint(float(ci), float(ti), _gauss_tv(mean, cov, ref, q), math.nan,
                              tv_identity_cov(scale * (root_sym @ x0))))
        g_alt.append(tv_identity_cov(scale * (root_principal @ x0)))
        dev.append(float(np.linalg.norm(mean - math.exp(-a * ti) * x0)))
    extras = {"G_principal": np.array(g_alt), "frame_deviation": np.array(dev),
              "stationary_cov": Sigma}
    return ProfileCurve("exact-linearized", eps, tuple(pts), sched, skipped, extras)


# ---------------------------------------------------------------------------
# verdicts and truncation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffVerdict:
    epsilon: float
    pre_distance: float
    post_distance: float
    pre_threshold: float
    post_threshold: float

    @property
    def passed(self):
        return self.pre_distance >= self.pre_threshold and self.post_distance <= self.post_threshold


def cutoff_verdict(model, epsilon, x0, pre=0.9, post=0.1, h=None):
    """Linearised distances at ``0.8 t_eps`` and ``1.25 t_eps`` against thresholds."""
    spectral = dyn.spectral_at_origin(model)
    sched = cutoff_schedule(spectral, epsilon)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    times = np.array([0.8 * sched.t_eps, 1.25 * sched.t_eps])
    means, covs = dyn.linear_law_at(model, sched.epsilon, x0, times, h=h)
    ref = 0.5 * sched.epsilon * np.linalg.inv(spectral.hess0)
    d = [_gauss_tv(m, S, ref) for m, S in zip(means, covs)]
    return CutoffVerdict(sched.epsilon, d[0], d[1], float(pre), float(post))


@dataclass(frozen=True)
class TruncationRow:
    """One truncation level.

    ``bound`` is ``2 eps^2 t*^2 / (c_M^2 - eps t*)^2`` with ``c_M = M - |x0|``,
    or ``inf`` when the denominator is not positive.
    """

    M: float
    stationary_tv: float
    exit_probability: float
    exit_stderr: float
    bound: float
    t_star: float

    @property
    def within_bound(self):
        return self.exit_probability <= self.bound


@dataclass(frozen=True, eq=False)
class TruncationReport:
    epsilon: float
    x0: float
    b: float
    gamma: float
    n_paths: int
    rows: tuple

    @property
    def all_within_bound(self):
        return all(r.within_bound for r in self.rows)

    HEADER = ("M", "stationary_tv", "exit_probability", "exit_stderr", "bound", "t_star", "within_bound")

    def csv_rows(self):
        return [(r.M, r.stationary_tv, r.exit_probability, r.exit_stderr, r.bound, r.t_star,
                 r.within_bound) for r in self.rows]


def exit_bound(epsilon, t_star, M, x0):
    cM = M - abs(x0)
    den = cM * cM - epsilon * t_star
    if den <= 0:
        return math.inf
    return 2.0 * epsilon ** 2 * t_star ** 2 / den ** 2


def truncation_comparison(base, M_list, epsilon, x0, b=0.0, n_paths=10_000, seed=0,
                          gamma=DEFAULT_GAMMA, workers=1, cells=None):
    """Stationary TV and exit probabilities for truncated versions of ``base``.

    For each ``M`` the Gibbs densities of ``base`` and of its truncation are
    compared on a common grid, and ``n_paths`` paths of the truncated
    diffusion are run to ``t* = t_eps + b (1/alpha1 + eps^gamma)`` to
    estimate ``P(sup |x| > M)``.
    """
    if base.dim != 1:
        raise UnsupportedDimensionError("truncation is implemented for 1-D base models")
    x0 = float(np.atleast_1d(np.asarray(x0, dtype=float))[0])
    Ms = [float(M) for M in M_list]
    if not Ms:
        raise ConfigError("M list is empty")
    for M in Ms:
        if not M > abs(x0):
            raise PreconditionError(f"truncation level M={M} must exceed |x0|={abs(x0)}")
    spectral = dyn.spectral_at_origin(base)
    sched = cutoff_schedule(spectral, epsilon, "nonlinear", gamma)
    t_star = sched.time(b)
    if not t_star > 0:
        raise ConfigError(f"t* = {t_star:.4g} is not positive for b={b}")
    mu = dens.stationary_density(base, sched.epsilon) if cells is None else \
        dens.stationary_density(base, sched.epsilon, grid=dens.auto_grid(base, sched.epsilon, n=cells))
    rows = []
    for k, M in enumerate(Ms):
        tm = dyn.build_truncated_model(base, M)
        tv = dens.tv_between_grids(mu, dens.stationary_density(tm, sched.epsilon, grid=mu))
        ens = sde_sim.simulate_paths(tm, sched.epsilon, [x0], [0.0, t_star], int(n_paths),
                                     derive_seed(seed, k), workers=workers)
        hit = ens.sup_norm > M
        p = float(hit.mean())
        se = math.sqrt(max(p * (1 - p), 0.0) / hit.size)
        rows.append(TruncationRow(M, tv, p, se, exit_bound(sched.epsilon, t_star, M, x0), t_star))
    return TruncationReport(sched.epsilon, x0, float(b), float(gamma), int(n_paths), tuple(rows))


# ---------------------------------------------------------------------------
# configuration and runner
# ---------------------------------------------------------------------------

TASKS = ("profile", "fp", "kde", "rotating", "lyapunov", "moments", "semiflow", "truncation")
CONFIG_KEYS = {"model", "x0", "epsilons", "c_grid", "gamma", "tasks", "solver", "seed",
               "output_dir", "thresholds"}
SOLVER_DEFAULTS = {
    "fp_cells": None,
    "n_paths": MIN_KDE_PATHS,
    "moment_paths": 10_000,
    "bootstrap": 20,
    "M_list": [3.0, 5.0],
    "b": 0.0,
    "rotation": {"a": 1.0, "b": 1.0},
    "t_end": None,
    "n_out": 11,
    "lyapunov_mode": "along-flow",
}
THRESHOLD_DEFAULTS = {"pre": 0.9, "post": 0.1}


def derive_seed(seed, index):
    """Seed of cell ``index``: a 63-bit hash of ``(seed, index)``."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _strict(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(mapping) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated run configuration.

    Built with :meth:`from_dict` or :func:`load_config`.  Unknown keys at
    any level are rejected.
    """

    model_spec: dict
    x0: tuple
    epsilons: tuple
    c_grid: tuple
    gamma: float
    tasks: tuple
    solver: dict
    seed: int
    output_dir: str
    thresholds: dict

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        _strict(raw, CONFIG_KEYS, "config")
        for key in ("model", "x0", "epsilons"):
            if key not in raw:
                raise ConfigError(f"config is missing {key!r}")
        solver = dict(SOLVER_DEFAULTS)
        user_solver = raw.get("solver", {})
        _strict(user_solver, SOLVER_DEFAULTS, "solver")
        solver.update(user_solver)
        rot = solver["rotation"]
        _strict(rot, {"a", "b"}, "solver.rotation")
        thresholds = dict(THRESHOLD_DEFAULTS)
        _strict(raw.get("thresholds", {}), THRESHOLD_DEFAULTS, "thresholds")
        thresholds.update(raw.get("thresholds", {}))
        tasks = tuple(raw.get("tasks", ()))
        bad = [t for t in tasks if t not in TASKS]
        if bad:
            raise ConfigError(f"unknown tasks {bad}; choose from {list(TASKS)}")
        if len(set(tasks)) != len(tasks):
            raise ConfigError("tasks must not repeat")
        try:
            x0 = tuple(float(v) for v in np.atleast_1d(raw["x0"]))
            epsilons = tuple(float(e) for e in raw["epsilons"])
            c_grid = tuple(float(c) for c in raw.get("c_grid", DEFAULT_C_GRID))
            gamma = float(raw.get("gamma", DEFAULT_GAMMA))
            seed = int(raw.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config value: {exc}") from None
        if not epsilons or not all(0 < e < 1 for e in epsilons):
            raise ConfigError("epsilons must be a nonempty list in (0, 1)")
        _check_c_grid(c_grid)
        if not 0 < gamma <= 0.25:
            raise ConfigError("gamma must lie in (0, 1/4]")
        model = dyn.model_from_spec(raw["model"])
        if len(x0) != model.dim:
            raise ConfigError(f"x0 has {len(x0)} entries, the model has dimension {model.dim}")
        out = str(raw.get("output_dir", "out"))
        if base_dir is not None and not os.path.isabs(out):
            out = os.path.join(base_dir, out)
        return cls(raw["model"], x0, epsilons, c_grid, gamma, tasks, solver, seed, out, thresholds)

    def canonical(self):
        """JSON-ready dictionary with every default filled in."""
        return {
            "model": self.model_spec,
            "x0": list(self.x0),
            "epsilons": list(self.epsilons),
            "c_grid": list(self.c_grid),
            "gamma": self.gamma,
            "tasks": list(self.tasks),
            "solver": self.solver,
            "seed": self.seed,
            "thresholds": self.thresholds,
        }

    @property
    def hash(self):
        """SHA-256 of the canonical JSON, independent of key order and output dir."""
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def model(self):
        return dyn.model_from_spec(self.model_spec)


def load_config(path):
    """Read and validate a JSON config; relative output dirs resolve next to it."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass(eq=False)
class RunManifest:
    config_hash: str
    code_version: str
    seeds: dict
    wall_clock: dict
    files: list
    tasks: dict
    thresholds: dict
    verdicts: list
    gamma: float
    path: Optional[str] = None

    @property
    def exit_code(self):
        for name in sorted(self.tasks, key=lambda t: TASKS.index(t)):
            st = self.tasks[name]
            if st["status"] != "ok":
                return st["exit_code"]
        return 0

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "gamma": self.gamma,
            "seeds": self.seeds,
            "wall_clock": self.wall_clock,
            "files": self.files,
            "tasks": self.tasks,
            "thresholds": self.thresholds,
            "verdicts": self.verdicts,
        }


def _lyapunov_rows(sol):
    dim = sol.matrices.shape[1]
    header = ["t"] + [f"entry_{i}{j}" for i in range(dim) for j in range(dim)]
    return header, [(t, *M.ravel()) for t, M in zip(sol.times, sol.matrices)]


def _cell_jobs(cfg, model):
    """``(task, file, index_in_task, callable(seed) -> (header, rows, extra))`` per cell."""
    jobs = []
    s = cfg.solver
    x0 = np.array(cfg.x0)
    t_end = s["t_end"]
    if t_end is None:
        t_end = 20.0 / model.delta
    for task in cfg.tasks:
        if task in ("profile", "fp", "kde", "rotating"):
            fname = "profile.csv" if task == "profile" else f"profile_{task}.csv"
            for k, eps in enumerate(cfg.epsilons):
                def job(seed, eps=eps, task=task):
                    if task == "profile":
                        cv = linearized_distance_curve(model, eps, x0, cfg.c_grid, gamma=cfg.gamma)
                        vd = cutoff_verdict(model, eps, x0, cfg.thresholds["pre"], cfg.thresholds["post"])
                        extra = {"epsilon": eps, "pre_distance": vd.pre_distance,
                                 "post_distance": vd.post_distance, "passed": vd.passed}
                    elif task == "rotating":
                        rot = s["rotation"]
                        cv = rotating_frame_curve(rot["a"], rot["b"], x0, eps, cfg.c_grid)
                        extra = None
                    else:
                        method = "fokker-planck" if task == "fp" else "kde"
                        cv = nonlinear_distance_curve(model, eps, x0, cfg.c_grid, method=method,
                                                      gamma=cfg.gamma, cells=s["fp_cells"],
                                                      n_paths=s["n_paths"], seed=seed,
                                                      bootstrap=s["bootstrap"])
                        extra = None
                    return CURVE_HEADER, cv.rows(), extra
                jobs.append((task, fname, job))
        elif task == "lyapunov":
            for k, eps in enumerate(cfg.epsilons):
                def job(seed, eps=eps):
                    sol = dyn.integrate_lyapunov(model, eps, t_end, mode=s["lyapunov_mode"], x0=x0,
                                                 n_out=s["n_out"])
                    h, rows = _lyapunov_rows(sol)
                    return h, rows, None
                jobs.append((task, f"lyapunov_{k}.csv", job))
        elif task == "moments":
            for k, eps in enumerate(cfg.epsilons):
                def job(seed, eps=eps):
                    grid = np.linspace(0.0, t_end, s["n_out"])
                    ens = sde_sim.simulate_coupled_linearization(model, eps, x0, grid, s["moment_paths"], seed)
                    rep = sde_sim.moment_report(ens)
                    return ("t", "n", "estimate", "stderr", "bound", "pass"), rep.rows(), None
                jobs.append((task, f"moments_{k}.csv", job))
        elif task == "semiflow":
            def job(seed):
                res = dyn.integrate_semiflow(model, x0, t_end, n_out=s["n_out"])
                header = ["t"] + [f"x_{i}" for i in range(model.dim)]
                return header, [(t, *x) for t, x in zip(res.times, res.states)], None
            jobs.append((task, "semiflow.csv", job))
        elif task == "truncation":
            for k, eps in enumerate(cfg.epsilons):
                def job(seed, eps=eps):
                    rep = truncation_comparison(model, s["M_list"], eps, x0, b=s["b"],
                                                n_paths=s["moment_paths"], seed=seed, gamma=cfg.gamma)
                    return ("epsilon",) + TruncationReport.HEADER, \
                        [(eps,) + r for r in rep.csv_rows()], None
                jobs.append((task, "truncation.csv", job))
    return jobs


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def run_experiment(config, workers=1, output_dir=None):
    """Execute every task of ``config``, write CSVs and ``manifest.json``.

    Cells (one task at one ``epsilon``) run concurrently on ``workers``
    threads.  Cell ``i`` draws its randomness from ``derive_seed(seed, i)``
    and results are gathered by index, so the CSV bytes do not depend on
    ``workers``.  A failing cell marks its task as failed and suppresses that
    task's files; the other tasks still run.

    Returns
    -------
    RunManifest
        ``exit_code`` is 0 when every task succeeded.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    out = output_dir or config.output_dir
    os.makedirs(out, exist_ok=True)
    start = time.time()
    model = config.model()
    jobs = _cell_jobs(config, model)
    seeds = {f"{i}:{task}:{fname}": derive_seed(config.seed, i) for i, (task, fname, _) in enumerate(jobs)}

    def run_cell(i):
        t0 = time.time()
        task, _, fn = jobs[i]
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                header, rows, extra = fn(derive_seed(config.seed, i))
            msgs = [str(w.message) for w in caught]
            return ("ok", header, rows, extra, msgs, None, time.time() - t0)
        except CutoffLabError as exc:
            return ("error", None, None, None, [], exc, time.time() - t0)

    if workers and workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            results = list(pool.map(run_cell, range(len(jobs))))
    else:
        results = [run_cell(i) for i in range(len(jobs))]

    task_status = {}
    per_file = {}
    verdicts = []
    for (task, fname, _), res in zip(jobs, results):
        st = task_status.setdefault(task, {"status": "ok", "exit_code": 0, "error": None,
                                           "warnings": [], "elapsed_s": 0.0})
        st["elapsed_s"] += res[6]
        if res[0] == "error":
            if st["status"] == "ok":
                st.update(status="error", exit_code=res[5].exit_code,
                          error=f"{type(res[5]).__name__}: {res[5]}")
            continue
        st["warnings"].extend(res[4])
        header, rows = res[1], res[2]
        if fname in per_file:
            per_file[fname][1].extend(rows)
        else:
            per_file[fname] = (tuple(header), list(rows), task)
        if res[3] is not None:
            verdicts.append(res[3])

    files = []
    for fname, (header, rows, task) in per_file.items():
        if task_status[task]["status"] != "ok":
            continue
        path = os.path.join(out, fname)
        with open(path, "w", newline="") as fh:
            fh.write(_csv_text(header, rows))
        files.append({"name": fname, "task": task, "rows": len(rows), "bytes": os.path.getsize(path),
                      "sha256": _sha256(path)})

    manifest = RunManifest(
        config_hash=config.hash,
        code_version=__version__,
        seeds=seeds,
        wall_clock={"started_unix": start, "elapsed_s": time.time() - start, "workers": int(workers or 1)},
        files=files,
        tasks=task_status,
        thresholds=dict(config.thresholds),
        verdicts=verdicts,
        gamma=config.gamma,
    )
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump({**manifest.to_dict(), "config": config.canonical()}, fh, indent=2, sort_keys=True)
    manifest.path = path
    return manifest
