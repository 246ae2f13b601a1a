"""Monte-Carlo simulation of ``dx = -F(x) dt + sqrt(eps) dW``.

Randomness
----------
Path ``p`` draws its Brownian increments from its own counter-based stream,
``Philox`` keyed through ``SeedSequence([seed, p])``.  Paths are simulated in
fixed-size blocks and the drift is evaluated row by row without BLAS
reductions, so an ensemble is a pure function of ``(model, eps, x0, grid,
n_paths, seed)`` regardless of how many worker threads share the blocks.

Time stepping
-------------
Euler-Maruyama with internal step ``h = min(0.01, 0.1 / Delta_local,
0.1 sqrt(eps))``, shrunk so that every output interval holds a whole number of
steps.  The noise is additive, so Euler-Maruyama already has strong order 1.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import default_step, local_hessian_bound, _matvec
from .errors import (
    ConfigError,
    DivergenceError,
    InsufficientSampleError,
    PreconditionError,
    StepSizeError,
)

__all__ = [
    "TrajectoryEnsemble",
    "MomentReport",
    "ResidualScaling",
    "path_generator",
    "sde_step",
    "simulate_paths",
    "simulate_coupled_linearization",
    "moment_constant",
    "moment_report",
    "coupling_residual_scaling",
    "sample_stationary",
    "export_binary",
    "read_binary",
    "summary_csv",
]

BLOCK = 512
TIME_CHUNK = 1024
BLOWUP = 1e6
MAGIC = b"CLTRAJ01"


def path_generator(seed, p):
    """Independent counter-based generator for path ``p``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(p)])))


def sde_step(model, epsilon, x0, dt_grid):
    """Internal Euler step that divides the output spacing evenly."""
    h = max_step(model, epsilon, x0)
    n_sub = max(1, int(math.ceil(dt_grid / h - 1e-9)))
    return dt_grid / n_sub, n_sub


def max_step(model, epsilon, x0):
    """Largest internal step: ``min(0.01, 0.1/Delta_local, 0.1 sqrt(eps))``."""
    h = default_step(model, x0)
    if epsilon > 0:
        h = min(h, 0.1 * math.sqrt(epsilon))
    return h


def _check_grid(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ConfigError("t_grid must contain at least two points")
    if abs(t[0]) > 0:
        raise ConfigError("t_grid must start at 0")
    if np.any(np.diff(t) <= 0):
        raise ConfigError("t_grid must be strictly increasing")
    return t


def _substeps(t, h):
    """Per-interval step counts and sizes covering each output interval evenly."""
    d = np.diff(t)
    counts = np.maximum(1, np.ceil(d / h - 1e-9).astype(int))
    return counts, d / counts


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Simulated paths on a shared time grid.

    ``paths`` has shape ``(n_paths, n_times, dim)``.  For ``kind ==
    'coupled-pair'`` the linearised process ``psi + sqrt(eps) y`` driven by
    the same increments is stored in ``linear`` and the Euler semiflow in
    ``psi``.  ``sup_norm`` holds ``sup_t |x(t)|`` over all internal steps.
    """

    times: np.ndarray
    paths: np.ndarray
    kind: str
    epsilon: float
    seed: int
    model_id: str
    x0: np.ndarray
    step: float
    linear: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    sup_norm: Optional[np.ndarray] = None

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def dim(self):
        return self.paths.shape[2]


# blow-up is caught by the explicit divergence check below
@np.errstate(over="ignore", invalid="ignore")
def _simulate_block(model, epsilon, x0, counts, sizes, seed, start, stop, coupled):
    nb = stop - start
    dim = x0.shape[0]
    gens = [path_generator(seed, p) for p in range(start, stop)]
    n_rec = counts.size + 1
    rec = np.empty((nb, n_rec, dim))
    x = np.broadcast_to(x0, (nb, dim)).copy()
    rec[:, 0] = x
    sup = np.full(nb, float(np.linalg.norm(x0)))
    limit = BLOWUP * max(1.0, float(np.linalg.norm(x0)))
    # step index -> output interval; the last step of an interval records
    interval = np.repeat(np.arange(counts.size), counts)
    ends = np.cumsum(counts)
    if coupled:
        lin = np.empty((nb, n_rec, dim))
        lin[:, 0] = x
        psi_rec = np.empty((n_rec, dim))
        psi_rec[0] = x0
        psi = x0.copy()
        y = np.zeros((nb, dim))
    total = int(ends[-1])
    done = 0
    while done < total:
        m = min(TIME_CHUNK, total - done)
        if epsilon > 0:
            noise = np.stack([g.standard_normal((m, dim)) for g in gens], axis=1)
        else:
            noise = np.zeros((m, nb, dim))
        for i in range(m):
            dW = noise[i]
            j = interval[done + i]
            h = sizes[j]
            sq_h = math.sqrt(h)
            sq_eps_h = math.sqrt(epsilon * h)
            if coupled:
                J = model.jacobian(psi)
                y = y - h * _matvec(J, y) + sq_h * dW
                psi = psi - h * model.field(psi)
            x = x - h * model.field(x) + sq_eps_h * dW
            step = done + i + 1
            if step == ends[j]:
                k = j + 1
                rec[:, k] = x
                if coupled:
                    psi_rec[k] = psi
                    lin[:, k] = psi + math.sqrt(epsilon) * y
            nrm = np.sqrt(np.sum(x * x, axis=1))
            np.maximum(sup, nrm, out=sup)
        if not np.all(np.isfinite(x)) or np.max(sup) > limit:
            raise DivergenceError(
                f"a path exceeded {limit:.3g} in norm; the step is too large or the model is not coercive"
            )
        done += m
    if coupled:
        return rec, sup, lin, psi_rec
    return rec, sup, None, None


def _run(model, epsilon, x0, t_grid, n_paths, seed, workers, coupled, h=None):
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    if epsilon < 0:
        raise ConfigError("epsilon must be nonnegative")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.dim,):
        raise ConfigError(f"x0 must have dimension {model.dim}")
    t = _check_grid(t_grid)
    if h is None:
        h = max_step(model, epsilon, x0)
    elif h <= 0:
        raise ConfigError("h must be positive")
    counts, sizes = _substeps(t, float(h))
    h = float(np.max(sizes))
    bounds = [(s, min(s + BLOCK, n_paths)) for s in range(0, n_paths, BLOCK)]

    def job(b):
        return _simulate_block(model, float(epsilon), x0, counts, sizes, seed, b[0], b[1], coupled)

    if workers is None or workers <= 1 or len(bounds) == 1:
        parts = [job(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(job, bounds))
    paths = np.concatenate([p[0] for p in parts])
    sup = np.concatenate([p[1] for p in parts])
    lin = np.concatenate([p[2] for p in parts]) if coupled else None
    psi = parts[0][3] if coupled else None
    return t, paths, sup, lin, psi, h, x0


def _model_id(model):
    return f"{model.kind}:{model.describe()}"


def simulate_paths(model, epsilon, x0, t_grid, n_paths, seed, workers=1, h=None):
    """Euler-Maruyama ensemble of the nonlinear diffusion.

    Parameters
    ----------
    model : PotentialModel or VectorFieldModel
    epsilon : float
        Noise intensity; 0 gives the Euler semiflow.
    x0 : array_like
    t_grid : array_like
        Increasing output grid starting at 0.  Each interval is split into
        equal internal steps no larger than the stability limit.
    n_paths, seed : int
    workers : int
        Threads sharing the path blocks; does not affect the output.
    h : float, optional
        Internal step override.

    Raises
    ------
    DivergenceError
        When a path leaves the ball of radius ``1e6 max(1, |x0|)``.
    """
    t, paths, sup, _, _, h, x0 = _run(model, epsilon, x0, t_grid, n_paths, seed, workers, False, h)
    return TrajectoryEnsemble(t, paths, "nonlinear", float(epsilon), int(seed), _model_id(model),
                              x0, h, sup_norm=sup)


def simulate_coupled_linearization(model, epsilon, x0, t_grid, n_paths, seed, workers=1, h=None):
    """Nonlinear paths together with ``psi + sqrt(eps) y`` on the same noise.

    ``y`` solves ``dy = -DF(psi) y dt + dW`` and ``psi`` is advanced by the
    same Euler scheme, so for quadratic models both processes agree to
    rounding error.
    """
    t, paths, sup, lin, psi, h, x0 = _run(model, epsilon, x0, t_grid, n_paths, seed, workers, True, h)
    return TrajectoryEnsemble(t, paths, "coupled-pair", float(epsilon), int(seed), _model_id(model),
                              x0, h, linear=lin, psi=psi, sup_norm=sup)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

def moment_constant(m, n):
    """``c_n = prod_{j < n} (m + 2 j)``: the ``2n``-th moment of ``|N(0, I_m)|``."""
    return math.prod(m + 2 * j for j in range(n))


@dataclass
class MomentReport:
    """Per-time moment estimates with bounds and verdicts.

    ``estimates[n]`` etc. are arrays over ``times``.  The coupling residual
    ``E|x - psi - sqrt(eps) y|^2`` is reported with the bound
    ``C eps^(3/2) t^(5/2)`` where ``C`` is the smallest constant making the
    bound hold at every time of this ensemble (see :func:`coupling_residual_scaling`).
    """

    times: np.ndarray
    epsilon: float
    dim: int
    n_paths: int
    orders: tuple
    estimates: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)
    residual: Optional[np.ndarray] = None
    residual_stderr: Optional[np.ndarray] = None
    residual_C: float = float("nan")

    @property
    def all_passed(self):
        return all(bool(np.all(v)) for v in self.passed.values())

    def confidence_band(self, n, level_z=2.576):
        """99% normal confidence band for order ``n``."""
        e, s = self.estimates[n], self.stderr[n]
        return e - level_z * s, e + level_z * s

    def rows(self):
        for n in self.orders:
            for k, t in enumerate(self.times):
                yield (float(t), n, float(self.estimates[n][k]), float(self.stderr[n][k]),
                       float(self.bounds[n][k]), bool(self.passed[n][k]))


def _mean_se(samples):
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def moment_report(ensemble, semiflow=None, orders=(1, 2)):
    """Check ``E|x - psi|^(2n) <= c_n eps^n t^n`` at every grid time.

    Parameters
    ----------
    ensemble : TrajectoryEnsemble
        A coupled pair.
    semiflow : array_like, optional
        ``psi`` on the ensemble grid; defaults to the Euler semiflow stored
        in the ensemble (the discretisation that matches the paths).
    orders : iterable of int
        Subset of ``{1, 2}``.

    The verdict at ``(n, t)`` passes when ``estimate - 3 SE <= bound``.
    """
    if ensemble.kind != "coupled-pair":
        raise ConfigError("moment_report needs a coupled-pair ensemble")
    orders = tuple(sorted(set(int(n) for n in orders)))
    if not orders or not set(orders) <= {1, 2}:
        raise ConfigError("orders must be a non-empty subset of {1, 2}")
    if ensemble.n_paths < 100:
        raise InsufficientSampleError(f"need at least 100 paths, got {ensemble.n_paths}")
    psi = ensemble.psi if semiflow is None else np.asarray(semiflow, dtype=float).reshape(ensemble.psi.shape)
    eps, m, t = ensemble.epsilon, ensemble.dim, ensemble.times
    dev2 = np.sum((ensemble.paths - psi[None]) ** 2, axis=2)
    rep = MomentReport(t, eps, m, ensemble.n_paths, orders)
    for n in orders:
        est, se = _mean_se(dev2 ** n)
        bound = moment_constant(m, n) * eps ** n * t ** n
        rep.estimates[n], rep.stderr[n], rep.bounds[n] = est, se, bound
        rep.passed[n] = est - 3.0 * se <= bound
    res2 = np.sum((ensemble.paths - ensemble.linear) ** 2, axis=2)
    rep.residual, rep.residual_stderr = _mean_se(res2)
    pos = t > 0
    if eps > 0 and np.any(pos):
        rep.residual_C = float(np.max(rep.residual[pos] / (eps ** 1.5 * t[pos] ** 2.5)))
    return rep


@dataclass
class ResidualScaling:
    epsilons: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    slope: float
    intercept: float
    t: float
    C_fit: float
    consistent: np.ndarray


def coupling_residual_scaling(model, x0, t, epsilons, n_paths, seed, workers=1):
    """Log-log slope of ``E|x - psi - sqrt(eps) y|^2`` against ``eps`` at time ``t``.

    All noise levels reuse the same seed (common random numbers), which
    removes most of the sampling noise from the slope.  ``C`` is fitted at
    the largest ``eps`` from ``C eps^(3/2) t^(5/2)``, and ``consistent``
    records whether the smaller noise levels stay below that bound.
    """
    eps = np.sort(np.asarray(epsilons, dtype=float))[::-1]
    if eps.size < 2 or np.any(eps <= 0):
        raise ConfigError("need at least two positive noise levels")
    grid = np.array([0.0, float(t)])
    est, se = [], []
    for e in eps:
        ens = simulate_coupled_linearization(model, e, x0, grid, n_paths, seed, workers)
        r2 = np.sum((ens.paths[:, -1] - ens.linear[:, -1]) ** 2, axis=1)
        mu, s = _mean_se(r2)
        est.append(float(mu))
        se.append(float(s))
    est, se = np.array(est), np.array(se)
    slope, intercept = np.polyfit(np.log(eps), np.log(est), 1)
    C = est[0] / (eps[0] ** 1.5 * t ** 2.5)
    consistent = est - 3 * se <= C * eps ** 1.5 * t ** 2.5 * (1 + 1e-12)
    return ResidualScaling(eps, est, se, float(slope), float(intercept), float(t), float(C), consistent)


# ---------------------------------------------------------------------------
# stationary sampling
# ---------------------------------------------------------------------------

def sample_stationary(model, epsilon, n, seed, method="metropolis-adjusted", chains=64, thin=4,
                      workers=1):
    """Approximate samples from ``mu_eps(dx) ~ exp(-2 V(x) / eps) dx``.

    Methods
    -------
    exact-gaussian
        Quadratic and OU models only: ``N(0, (eps/2) H^{-1})``.
    metropolis-adjusted
        MALA on ``U = 2V/eps`` with ``chains`` parallel chains started at the
        minimum, step ``tau = 0.5 / max U''`` on the bulk of the measure,
        burn-in of 500 steps, every ``thin``-th state kept.
    long-run
        Euler-Maruyama from the origin up to ``t = 30 / delta``; the final
        states are the samples.

    Raises
    ------
    StepSizeError
        MALA acceptance rate below 0.1.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    n = int(n)
    dim = model.dim
    if n < 0:
        raise ConfigError("n must be >= 0")
    if n == 0:
        return np.empty((0, dim))
    if method == "exact-gaussian":
        if model.kind not in ("quadratic", "ou-diagonal"):
            raise PreconditionError("exact-gaussian sampling needs a quadratic model")
        cov = 0.5 * epsilon * np.linalg.inv(model.hess0)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
        return rng.multivariate_normal(np.zeros(dim), cov, size=n, method="eigh")
    if method == "long-run":
        T = 30.0 / model.delta
        ens = simulate_paths(model, epsilon, np.zeros(dim), [0.0, T], n, seed, workers)
        return ens.paths[:, -1].copy()
    if method != "metropolis-adjusted":
        raise ConfigError(f"unknown sampling method {method!r}")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
    spread = 10.0 * math.sqrt(epsilon / (2.0 * model.delta))
    curv = 2.0 * local_hessian_bound(model, spread) / epsilon
    tau = 0.5 / curv

    def U(x):
        return 2.0 * model.V(x) / epsilon

    def gradU(x):
        return 2.0 * model.grad(x) / epsilon

    burn = 500
    per_chain = int(math.ceil(n / chains))
    x = np.zeros((chains, dim))
    ux, gx = U(x), gradU(x)
    out = np.empty((per_chain, chains, dim))
    accepted = 0
    proposals = 0
    k = 0
    step = 0
    while k < per_chain:
        xi = rng.standard_normal((chains, dim))
        prop = x - tau * gx + math.sqrt(2.0 * tau) * xi
        up, gp = U(prop), gradU(prop)
        fwd = prop - x + tau * gx
        bwd = x - prop + tau * gp
        log_q_fwd = -np.sum(fwd * fwd, axis=1) / (4.0 * tau)
        log_q_bwd = -np.sum(bwd * bwd, axis=1) / (4.0 * tau)
        log_a = -(up - ux) + log_q_bwd - log_q_fwd
        acc = np.log(rng.uniform(size=chains)) < log_a
        x = np.where(acc[:, None], prop, x)
        ux = np.where(acc, up, ux)
        gx = np.where(acc[:, None], gp, gx)
        step += 1
        if step > burn:
            accepted += int(acc.sum())
            proposals += chains
            if (step - burn) % thin == 0:
                out[k] = x
                k += 1
    rate = accepted / max(proposals, 1)
    if rate < 0.1:
        raise StepSizeError(f"MALA acceptance rate {rate:.3f} below 0.1")
    return out.reshape(-1, dim)[:n].copy()


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_binary(ensemble, path):
    """Write an ensemble as a flat little-endian binary file.

    Layout: 8-byte magic, then ``<qqq`` (n_paths, n_times, dim), ``<Q``
    seed, ``<d`` epsilon, ``<q`` kind length and the UTF-8 kind, the time
    grid as ``n_times`` doubles, and finally the paths as row-major doubles.
    Coupled pairs append the linearised paths after the nonlinear ones.
    """
    kind = ensemble.kind.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqq", *ensemble.paths.shape))
        fh.write(struct.pack("<Q", ensemble.seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(struct.pack("<d", ensemble.epsilon))
        fh.write(struct.pack("<q", len(kind)))
        fh.write(kind)
        fh.write(np.ascontiguousarray(ensemble.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.paths, dtype="<f8").tobytes())
        if ensemble.linear is not None:
            fh.write(np.ascontiguousarray(ensemble.linear, dtype="<f8").tobytes())


def read_binary(path):
    """Inverse of :func:`export_binary`; returns a dict of header fields and arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path} is not a trajectory file")
    off = 8
    n_paths, n_times, dim = struct.unpack_from("<qqq", data, off)
    off += 24
    (seed,) = struct.unpack_from("<Q", data, off)
    off += 8
    (eps,) = struct.unpack_from("<d", data, off)
    off += 8
    (klen,) = struct.unpack_from("<q", data, off)
    off += 8
    kind = data[off:off + klen].decode()
    off += klen
    times = np.frombuffer(data, "<f8", n_times, off)
    off += 8 * n_times
    size = n_paths * n_times * dim
    paths = np.frombuffer(data, "<f8", size, off).reshape(n_paths, n_times, dim)
    off += 8 * size
    linear = None
    if kind == "coupled-pair":
        linear = np.frombuffer(data, "<f8", size, off).reshape(n_paths, n_times, dim)
    return {"seed": seed, "epsilon": eps, "kind": kind, "times": times, "paths": paths,
            "linear": linear}


def summary_csv(ensemble):
    """Per-time sample mean and variance of each coordinate as CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = ensemble.dim
    w.writerow(["t"] + [f"mean_{i}" for i in range(dim)] + [f"var_{i}" for i in range(dim)])
    mean = ensemble.paths.mean(axis=0)
    var = ensemble.paths.var(axis=0, ddof=1) if ensemble.n_paths > 1 else np.zeros_like(mean)
    for k, t in enumerate(ensemble.times):
        w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in mean[k]]
                   + [format(v, ".17g") for v in var[k]])
    return buf.getvalue()
