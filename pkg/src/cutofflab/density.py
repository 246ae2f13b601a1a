"""Grid densities: the Gibbs measure, its Gaussian approximation, a 1-D
Fokker-Planck solver and kernel density estimates.

All densities live on uniform node grids (at most two axes) and are
integrated with the trapezoidal rule.  Total variation between two grid
densities is half the trapezoidal integral of their absolute difference.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, ndimage
from scipy.linalg import lapack

from .errors import (
    BandwidthError,
    ConfigError,
    IncompatibleGridError,
    InsufficientSampleError,
    NumericalRangeError,
    ParameterError,
    PreconditionError,
)

__all__ = [
    "GridSpec",
    "DensityGrid",
    "FPSolution",
    "auto_grid",
    "stationary_density",
    "gaussian_density",
    "gaussian_approx_distance",
    "solve_fokker_planck_1d",
    "fp_time_step",
    "tv_between_grids",
    "kde_density",
    "scott_bandwidth",
    "to_csv",
]

DEFAULT_CELLS = 2048
DEFAULT_CELLS_2D = 256
SPREAD_SIGMAS = 10.0
TAIL_RATIO = 1e-16
CFL = 0.4
BALANCE_WINDOW = 40.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid ``linspace(lo, hi, n)`` on one axis."""

    lo: float
    hi: float
    n: int = DEFAULT_CELLS

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.hi > self.lo):
            raise ConfigError(f"grid needs finite lo < hi, got [{self.lo}, {self.hi}]")
        if self.n < 3:
            raise ConfigError("grid needs at least 3 points")

    @property
    def nodes(self):
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def step(self):
        return (self.hi - self.lo) / (self.n - 1)


def _trapz(values, axes):
    out = values
    for ax in reversed(axes):
        out = integrate.trapezoid(out, ax, axis=-1)
    return float(out)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Nonnegative density sampled on a tensor grid of at most two axes."""

    axes: tuple
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        vals = np.asarray(self.values, dtype=float)
        if not 1 <= len(axes) <= 2:
            raise ConfigError("density grids have one or two axes")
        if vals.shape != tuple(a.size for a in axes):
            raise ConfigError(f"values shape {vals.shape} does not match the axes")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ConfigError("density values must be finite and nonnegative")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self):
        return len(self.axes)

    def integral(self):
        return _trapz(self.values, self.axes)

    def normalized(self):
        return DensityGrid(self.axes, self.values / self.integral())

    def mean(self):
        out = []
        for i, ax in enumerate(self.axes):
            shape = [1] * self.dim
            shape[i] = ax.size
            out.append(_trapz(self.values * ax.reshape(shape), self.axes))
        return np.array(out) / self.integral()

    def same_axes(self, other):
        return self.dim == other.dim and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.axes, other.axes)
        )


@dataclass(frozen=True, eq=False)
class FPSolution:
    times: np.ndarray
    densities: list
    epsilon: float
    dx: float
    dt: float
    steps: int
    clipped_mass: float = 0.0
    mass_error: float = 0.0

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        return self.densities[k]


# ---------------------------------------------------------------------------
# stationary measure
# ---------------------------------------------------------------------------

def _gauss_sigmas(model, epsilon):
    cov = 0.5 * epsilon * np.linalg.inv(np.asarray(model.hess0, dtype=float))
    return np.sqrt(np.diag(cov))


def auto_grid(model, epsilon, n=None, include=None):
    """Grid covering ``+-10`` standard deviations of the Gaussian approximation.

    ``include`` adds points (e.g. an initial condition) that the grid must
    also cover with the same margin.
    """
    if model.dim > 2:
        raise PreconditionError("density grids support dimension <= 2")
    n = (DEFAULT_CELLS if model.dim == 1 else DEFAULT_CELLS_2D) if n is None else int(n)
    sig = _gauss_sigmas(model, epsilon)
    specs = []
    for i in range(model.dim):
        lo, hi = -SPREAD_SIGMAS * sig[i], SPREAD_SIGMAS * sig[i]
        if include is not None:
            c = np.atleast_1d(np.asarray(include, dtype=float))[i]
            lo, hi = min(lo, c - SPREAD_SIGMAS * sig[i]), max(hi, c + SPREAD_SIGMAS * sig[i])
        specs.append(GridSpec(lo, hi, n))
    return specs


def _mesh(axes):
    if len(axes) == 1:
        return axes[0][:, None]
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.stack([X, Y], axis=-1)


def _gibbs(model, epsilon, axes):
    logp = -2.0 * model.V(_mesh(axes)) / epsilon
    if not np.all(np.isfinite(logp)):
        raise NumericalRangeError("potential is not finite on the grid")
    logp = logp - np.max(logp)
    vals = np.exp(logp)
    Z = _trapz(vals, axes)
    if not (Z > 0 and math.isfinite(Z)):
        raise NumericalRangeError("normalising constant under/overflowed after rescaling")
    return vals / Z


def _boundary_max(vals):
    if vals.ndim == 1:
        return max(vals[0], vals[-1])
    return max(vals[0].max(), vals[-1].max(), vals[:, 0].max(), vals[:, -1].max())


def stationary_density(model, epsilon, grid=None, max_widen=20):
    """Gibbs density ``exp(-2 V / eps) / M_eps`` on a grid.

    The exponent is shifted by its maximum before exponentiating, so the
    normaliser never overflows.  With an automatic grid the box is widened
    by 50% until the boundary values fall below ``1e-16`` of the peak.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if model.dim > 2:
        raise PreconditionError("stationary_density supports dimension <= 2")
    auto = grid is None
    specs = auto_grid(model, epsilon) if auto else list(_as_specs(grid))
    for _ in range(max_widen):
        axes = tuple(s.nodes for s in specs)
        vals = _gibbs(model, epsilon, axes)
        if not auto or _boundary_max(vals) < TAIL_RATIO * vals.max():
            return DensityGrid(axes, vals)
        specs = [GridSpec(1.5 * s.lo, 1.5 * s.hi, s.n) for s in specs]
    raise NumericalRangeError("could not find a grid containing the stationary mass")


def _as_specs(grid):
    if isinstance(grid, GridSpec):
        return [grid]
    if isinstance(grid, DensityGrid):
        return [GridSpec(float(a[0]), float(a[-1]), a.size) for a in grid.axes]
    return list(grid)


def gaussian_density(mean, cov, axes):
    """``N(mean, cov)`` evaluated on the tensor grid ``axes``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    pts = _mesh(axes) - mean
    inv = np.linalg.inv(cov)
    q = np.einsum("...i,ij,...j->...", pts, inv, pts)
    _, logdet = np.linalg.slogdet(cov)
    vals = np.exp(-0.5 * q - 0.5 * (len(axes) * math.log(2 * math.pi) + logdet))
    return DensityGrid(tuple(axes), vals)


def gaussian_approx_distance(model, epsilon, grid=None):
    """TV between the Gibbs density and ``N(0, (eps/2) H(0)^{-1})`` on a grid."""
    mu = stationary_density(model, epsilon, grid)
    cov = 0.5 * epsilon * np.linalg.inv(np.asarray(model.hess0, dtype=float))
    g = gaussian_density(np.zeros(model.dim), cov, mu.axes)
    return tv_between_grids(mu, g)


def tv_between_grids(d1, d2):
    """``1/2 int |d1 - d2|`` by the trapezoidal rule on the shared grid."""
    if not d1.same_axes(d2):
        raise IncompatibleGridError("density grids have different axes")
    tv = 0.5 * _trapz(np.abs(d1.values - d2.values), d1.axes)
    return float(min(max(tv, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Fokker-Planck
# ---------------------------------------------------------------------------

def fp_time_step(model, epsilon, x, dx):
    """Largest stable step: diffusion, stiffness and advective CFL limits."""
    dVdx = np.abs(model.grad(x[:, None])[:, 0])
    d2V = np.abs(model.hess(x[:, None])[:, 0, 0])
    lims = [0.25 * dx * dx / epsilon, 0.1 / max(float(d2V.max()), 1e-300)]
    vmax = float(dVdx.max())
    if vmax > 0:
        lims.append(CFL * dx / vmax)
    return min(lims)


def _balanced_velocity(V, dx, epsilon, a_exact):
    """Face velocities for which the Gibbs weights ``exp(-2 V_i / eps)`` are
    an exact discrete equilibrium.

    At each interior face the velocity is chosen so that the upwind MUSCL
    flux of the Gibbs weights equals their discrete diffusive flux
    ``(eps/2) (pi_{i+1} - pi_i) / dx``.  Everything is written with ratios of
    neighbouring weights, so nothing underflows; faces where those ratios
    leave the floating-point range fall back to ``a_exact = -V'``.

    The tuned velocity differs from ``-V'`` at second order in the cell
    Peclet number, which is only small where the Gibbs weight itself is
    appreciable.  It is therefore used only where ``2 (V - min V) / eps <=
    BALANCE_WINDOW``; outside, the weights are below ``exp(-BALANCE_WINDOW)``
    of the peak and the exact velocity is kept.
    """
    n = V.size
    a = a_exact.copy()
    dVf = V[1:] - V[:-1]
    # flow runs towards lower V, so the upwind cell is the higher-V one
    up = np.where(dVf > 0, np.arange(1, n), np.arange(n - 1))
    ex = []
    for shift in (-1, 0, 1):
        j = np.clip(up + shift, 0, n - 1)
        ex.append(-2.0 * (V[j] - V[up]) / epsilon)
    e_lo = -2.0 * (V[:-1] - V[up]) / epsilon
    e_hi = -2.0 * (V[1:] - V[up]) / epsilon
    ok = np.all(np.abs(np.stack(ex + [e_lo, e_hi])) < 600.0, axis=0)
    with np.errstate(over="ignore", invalid="ignore"):
        rm, rp = np.exp(ex[0]), np.exp(ex[2])
        dm, dp = 1.0 - rm, rp - 1.0
        interior = (up > 0) & (up < n - 1)
        prod = dm * dp
        den = dm + dp
        slope = np.where(interior, 2.0 * np.maximum(prod, 0.0) / (den + (den == 0.0)), 0.0)
        sign = np.where(up == np.arange(n - 1), 1.0, -1.0)
        recon = 1.0 + 0.5 * sign * slope
        bal = 0.5 * epsilon * (np.exp(e_hi) - np.exp(e_lo)) / (dx * recon)
    near = 2.0 * (np.maximum(V[:-1], V[1:]) - V.min()) / epsilon <= BALANCE_WINDOW
    good = near & ok & np.isfinite(bal) & (recon > 0)
    a[good] = bal[good]
    return a


class _Stepper:
    """MUSCL advection with explicit Heun stages and Crank-Nicolson diffusion."""

    def __init__(self, a_face, dx, epsilon):
        self.ap = np.maximum(a_face, 0.0)
        self.am = np.minimum(a_face, 0.0)
        self.dx = dx
        self.eps = epsilon
        n = a_face.size + 1
        self.flux = np.zeros(n + 1)
        self.slope = np.zeros(n)
        self._lu = {}

    def rate(self, p):
        """``-d/dx (a p)`` with van Leer limited reconstruction, upwind fluxes
        at interior faces and zero flux through the boundary."""
        d = p[1:] - p[:-1]
        dm, dp = d[:-1], d[1:]
        prod = dm * dp
        den = dm + dp
        # the limited slope vanishes whenever prod <= 0, including den == 0
        self.slope[1:-1] = 2.0 * np.maximum(prod, 0.0) / (den + (den == 0.0))
        half = 0.5 * self.slope
        self.flux[1:-1] = self.ap * (p[:-1] + half[:-1]) + self.am * (p[1:] - half[1:])
        return (self.flux[:-1] - self.flux[1:]) / self.dx

    def _factor(self, h):
        if h not in self._lu:
            n = self.slope.size
            r = 0.5 * self.eps * h / (self.dx * self.dx)
            off = np.full(n - 1, -0.5 * r)
            diag = np.full(n, 1.0 + r)
            diag[0] = diag[-1] = 1.0 + 0.5 * r
            dl, d, du, du2, ipiv, info = lapack.dgttrf(off, diag, off)
            if info != 0:
                raise NumericalRangeError("Crank-Nicolson factorisation failed")
            self._lu[h] = (r, dl, d, du, du2, ipiv)
        return self._lu[h]

    @staticmethod
    def _half_lap(p, r):
        """``(r/2) L p`` for the zero-flux Laplacian ``L``."""
        out = np.empty_like(p)
        out[1:-1] = p[:-2] - 2.0 * p[1:-1] + p[2:]
        out[0] = p[1] - p[0]
        out[-1] = p[-2] - p[-1]
        return 0.5 * r * out

    def step(self, p, h):
        """Predictor-corrector IMEX step.

        ``p* = p + h A(p) + h/2 L (p + p*)`` followed by
        ``p' = p + h/2 (A(p) + A(p*)) + h/2 L (p + p')``: Heun for the
        advection, trapezoidal for the diffusion, second order overall, and
        any state with ``A(q) + L q = 0`` is reproduced exactly.
        """
        r, dl, d, du, du2, ipiv = self._factor(h)
        ap = self.rate(p)
        base = p + self._half_lap(p, r)
        pstar, _ = lapack.dgttrs(dl, d, du, du2, ipiv, base + h * ap)
        out, _ = lapack.dgttrs(dl, d, du, du2, ipiv, base + 0.5 * h * (ap + self.rate(pstar)))
        return out


def solve_fokker_planck_1d(model, epsilon, x0, t_end, grid=None, dt=None, record=None,
                           initial=None, balanced=False):
    """Law of the 1-D diffusion started near ``x0``, by finite volumes.

    Solves ``p_t = (V' p)_x + (eps/2) p_xx`` on the cell centres of ``grid``
    with zero-flux boundaries.  Advection uses MUSCL reconstruction with the
    van Leer limiter and upwind fluxes; diffusion is the three-point
    Laplacian.  Time stepping is an unsplit predictor-corrector: Heun for
    advection, Crank-Nicolson for diffusion.  All fluxes are conservative, so
    mass is preserved to rounding.

    Parameters
    ----------
    grid : GridSpec, optional
        Defaults to 2048 cells covering ``+-10`` stationary standard
        deviations around both the origin and ``x0``.
    dt : float, optional
        Defaults to :func:`fp_time_step`.  Larger values than the stability
        limits are rejected.
    record : sequence of float, optional
        Times at which the density is stored (``t_end`` is always stored).
        Steps are shortened to land on them exactly.
    initial : DensityGrid, optional
        Replaces the default initial condition, a Gaussian of standard
        deviation one cell centred at ``x0``.
    balanced : bool
        Tune the face velocities in the bulk of the Gibbs measure so that it
        is an exact discrete equilibrium (:func:`_balanced_velocity`).  This
        removes the slow stationary drift of the scheme but perturbs the
        transport velocity at second order in the cell Peclet number, which
        costs accuracy for narrow packets in transit; off by default.

    Raises
    ------
    ParameterError
        If ``dt`` violates ``dt <= 0.25 dx^2 / eps``, ``dt <= 0.1 / max|V''|``
        or the advective CFL limit.
    """
    if model.dim != 1:
        raise PreconditionError("the Fokker-Planck solver is one-dimensional")
    if not epsilon > 0 or not t_end > 0:
        raise ConfigError("epsilon and t_end must be positive")
    x0 = float(np.atleast_1d(np.asarray(x0, dtype=float))[0])
    spec = auto_grid(model, epsilon, include=[x0])[0] if grid is None else _as_specs(grid)[0]
    x = spec.nodes
    dx = spec.step
    limit = fp_time_step(model, epsilon, x, dx)
    if dt is None:
        dt = limit
    elif dt > limit * (1 + 1e-12):
        raise ParameterError(f"dt={dt:.4g} exceeds the stability limit {limit:.4g}")
    dt = float(dt)

    if initial is None:
        p = np.exp(-0.5 * ((x - x0) / dx) ** 2)
    else:
        if not np.array_equal(initial.axes[0], x):
            raise IncompatibleGridError("initial density is on a different grid")
        p = np.array(initial.values, dtype=float)
    p /= p.sum() * dx

    faces = 0.5 * (x[:-1] + x[1:])
    a_face = -model.grad(faces[:, None])[:, 0]
    if balanced:
        a_face = _balanced_velocity(model.V(x[:, None]), dx, float(epsilon), a_face)
    stepper = _Stepper(a_face, dx, float(epsilon))
    marks = sorted({float(t) for t in (record or []) if 0 < t < t_end} | {float(t_end)})
    times, dens = [], []
    if record is not None and any(t == 0 for t in record):
        times.append(0.0)
        dens.append(DensityGrid((x,), p.copy()))

    t = 0.0
    steps = 0
    clipped = 0.0
    for mark in marks:
        span = mark - t
        if span <= 1e-12 * max(1.0, mark):
            times.append(mark)
            dens.append(DensityGrid((x,), p.copy()))
            continue
        k = max(1, int(math.ceil(span / dt - 1e-9)))
        h = span / k
        for i in range(k):
            p = stepper.step(p, h)
            if i % 64 == 63 or i == k - 1:
                neg = p < 0
                if np.any(neg):
                    clipped += float(-p[neg].sum() * dx)
                    p[neg] = 0.0
        steps += k
        t = mark
        times.append(mark)
        dens.append(DensityGrid((x,), p.copy()))
    mass_err = abs(float(p.sum() * dx) - 1.0)
    return FPSolution(np.array(times), dens, float(epsilon), dx, dt, steps, clipped, mass_err)


# ---------------------------------------------------------------------------
# kernel density estimation
# ---------------------------------------------------------------------------

def scott_bandwidth(samples):
    """Per-axis Scott bandwidth ``sigma_i n^(-1/(d+4))``."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n, d = s.shape
    sig = s.std(axis=0, ddof=1)
    if np.any(~np.isfinite(sig)) or np.any(sig <= 0):
        raise BandwidthError("sample variance is degenerate; Scott bandwidth undefined")
    return sig * n ** (-1.0 / (d + 4))


def _linear_binning(s, axes):
    """Linear-binning weights of the samples onto the tensor grid."""
    shape = tuple(a.size for a in axes)
    idx, frac = [], []
    for j, ax in enumerate(axes):
        u = (s[:, j] - ax[0]) / (ax[1] - ax[0])
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        inside = (i0 >= 0) & (i0 < ax.size - 1)
        idx.append(np.where(inside, i0, 0))
        frac.append(np.where(inside, f, 0.0))
        if j == 0:
            keep = inside
        else:
            keep = keep & inside
    counts = np.zeros(int(np.prod(shape)))
    corners = [(0,), (1,)] if len(axes) == 1 else [(0, 0), (0, 1), (1, 0), (1, 1)]
    for c in corners:
        w = np.where(keep, 1.0, 0.0)
        flat = np.zeros(s.shape[0], dtype=np.int64)
        for j, cj in enumerate(c):
            w = w * (frac[j] if cj else 1.0 - frac[j])
            flat = flat * shape[j] + idx[j] + cj
        counts += np.bincount(flat, weights=w, minlength=counts.size)
    return counts.reshape(shape)


def kde_density(samples, bandwidth="scott", grid=None):
    """Gaussian kernel density estimate on a grid.

    Samples are linearly binned onto the grid and the binned counts are
    smoothed with a separable Gaussian filter of standard deviation
    ``h_i / dx_i`` cells per axis; the result is renormalised on the grid.

    Parameters
    ----------
    samples : array_like, shape (n,) or (n, d)
    bandwidth : {"scott"} or float or sequence of float
    grid : GridSpec or sequence of GridSpec, optional
        Defaults to the sample range padded by 6 bandwidths, 512 points per
        axis in 1-D and 256 in 2-D.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n, d = s.shape
    if d > 2:
        raise PreconditionError("kde_density supports dimension <= 2")
    if n < 100:
        raise InsufficientSampleError(f"need at least 100 samples, got {n}")
    if isinstance(bandwidth, str):
        if bandwidth != "scott":
            raise ConfigError(f"unknown bandwidth rule {bandwidth!r}")
        h = scott_bandwidth(s)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,)).copy()
        if np.any(~(h > 0)):
            raise BandwidthError("bandwidth must be positive")
    if grid is None:
        npts = 512 if d == 1 else DEFAULT_CELLS_2D
        specs = [GridSpec(float(s[:, j].min() - 6 * h[j]), float(s[:, j].max() + 6 * h[j]), npts)
                 for j in range(d)]
    else:
        specs = _as_specs(grid)
        if len(specs) != d:
            raise IncompatibleGridError("grid dimension differs from the samples")
    axes = tuple(sp.nodes for sp in specs)
    counts = _linear_binning(s, axes)
    sig_cells = [h[j] / specs[j].step for j in range(d)]
    smooth = ndimage.gaussian_filter(counts, sig_cells, mode="constant", truncate=8.0)
    smooth = np.maximum(smooth, 0.0)
    total = _trapz(smooth, axes)
    if not total > 0:
        raise BandwidthError("kernel estimate has no mass on the grid")
    return DensityGrid(axes, smooth / total)


def to_csv(grid):
    """CSV text with the axis column(s) followed by ``density``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = ["x"] if grid.dim == 1 else ["x", "y"]
    w.writerow(names + ["density"])
    if grid.dim == 1:
        for xv, pv in zip(grid.axes[0], grid.values):
            w.writerow([format(xv, ".17g"), format(pv, ".17g")])
    else:
        for i, xv in enumerate(grid.axes[0]):
            for j, yv in enumerate(grid.axes[1]):
                w.writerow([format(xv, ".17g"), format(yv, ".17g"), format(grid.values[i, j], ".17g")])
    return buf.getvalue()
