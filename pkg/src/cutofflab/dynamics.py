"""Deterministic dynamics: potentials, gradient semiflows and Lyapunov ODEs.

The stochastic model throughout the package is

    dx = -F(x) dt + sqrt(eps) dW,        F = grad V for potential models,

whose noiseless part ``psi`` (the semiflow) contracts to the origin.  This
module evaluates models, integrates ``psi`` with classical RK4, extracts the
spectral data of the linearisation at the origin and the asymptotic direction
``v(x0) = lim exp(alpha1 t) psi(t)``, and integrates the covariance equation

    dS/dt = -J S - S J^T + eps I

either with ``J`` frozen at the origin or along the flow ``J = DF(psi(t))``.

All batch evaluations are written as elementwise arithmetic over the last axis
instead of BLAS products, so the value for a given state never depends on how
many states are evaluated together.  The stochastic simulator relies on this
for worker-count independent output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    CoercivityViolation,
    ConfigError,
    ExceptionalInitialConditionError,
    IntegratorError,
    ModelError,
    NumericalRangeError,
    PreconditionError,
    StiffnessError,
)
from .gaussian_tv import as_spd

__all__ = [
    "PotentialModel",
    "VectorFieldModel",
    "ModelEval",
    "SemiflowResult",
    "SpectralData",
    "AsymptoticDirection",
    "LyapunovSolution",
    "CoercivityReport",
    "RotatingFrameResult",
    "ou_diagonal",
    "quadratic",
    "quartic_1d",
    "custom_polynomial",
    "linear_field",
    "gradient_field",
    "build_truncated_model",
    "model_from_spec",
    "evaluate_model",
    "check_coercivity",
    "local_hessian_bound",
    "default_step",
    "integrate_semiflow",
    "spectral_at_origin",
    "asymptotic_direction",
    "integrate_lyapunov",
    "linear_law_at",
    "rotating_frame_semiflow",
    "rotation",
    "quarter_turn_rotation",
]

MAX_STEP = 0.01
MIN_STEP = 1e-8
NEAR_ZERO_REL = 1e-8


# ---------------------------------------------------------------------------
# batched linear algebra without BLAS
# ---------------------------------------------------------------------------

def _matvec(A, x):
    """``A @ x`` over the last axis of ``x``, summed in a fixed order."""
    out = np.zeros(x.shape[:-1] + (A.shape[0],))
    for j in range(A.shape[1]):
        out += A[:, j] * x[..., j, None]
    return out


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dim:
        raise ConfigError(f"state has dimension {x.shape[-1]}, model expects {dim}")
    return x


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PotentialModel:
    """A potential ``V`` with its gradient and Hessian.

    Parameters
    ----------
    kind : str
        One of ``ou-diagonal``, ``quadratic``, ``quartic-1d``, ``truncated``,
        ``custom-polynomial``.
    dim : int
    delta : float
        Declared lower bound of the Hessian spectrum.
    Delta : float or None
        Declared upper bound of the Hessian spectrum, if any.
    params : dict
        Construction parameters, kept for serialisation and reporting.

    The callables take points of shape ``(..., dim)`` and return arrays of
    shape ``(...)``, ``(..., dim)`` and ``(..., dim, dim)``.
    """

    kind: str
    dim: int
    delta: float
    Delta: Optional[float]
    params: dict
    _V: Callable = field(repr=False)
    _grad: Callable = field(repr=False)
    _hess: Callable = field(repr=False)
    base: Optional["PotentialModel"] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise ModelError(f"declared delta must be positive, got {self.delta}")
        if self.Delta is not None and not self.delta <= self.Delta:
            raise ModelError(f"declared delta {self.delta} exceeds Delta {self.Delta}")
        zero = np.zeros(self.dim)
        if abs(float(self._V(zero))) > 1e-14 or np.max(np.abs(self._grad(zero))) > 1e-14:
            raise ModelError("potential must satisfy V(0) = 0 and grad V(0) = 0")

    def V(self, x):
        return self._V(_as_points(x, self.dim))

    def grad(self, x):
        return self._grad(_as_points(x, self.dim))

    def hess(self, x):
        return self._hess(_as_points(x, self.dim))

    # common interface with VectorFieldModel
    def field(self, x):
        return self.grad(x)

    def jacobian(self, x):
        return self.hess(x)

    @property
    def hess0(self):
        return self.hess(np.zeros(self.dim))

    def describe(self):
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True, eq=False)
class VectorFieldModel:
    """A coercive vector field ``F`` with Jacobian ``DF``.

    ``F(0) = 0`` and ``DF(0)`` symmetric are checked on construction.
    """

    dim: int
    _F: Callable = field(repr=False)
    _DF: Callable = field(repr=False)
    delta: float = 1.0
    Delta: Optional[float] = None
    kind: str = "vector-field"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.delta > 0:
            raise ModelError(f"declared delta must be positive, got {self.delta}")
        zero = np.zeros(self.dim)
        if np.max(np.abs(self._F(zero))) > 1e-14:
            raise ModelError("vector field must vanish at the origin")
        J = np.asarray(self._DF(zero), dtype=float)
        if np.max(np.abs(J - J.T)) > 1e-10 * max(1.0, np.max(np.abs(J))):
            raise ModelError("DF(0) must be symmetric")

    def field(self, x):
        return self._F(_as_points(x, self.dim))

    def jacobian(self, x):
        return self._DF(_as_points(x, self.dim))

    @property
    def hess0(self):
        return self.jacobian(np.zeros(self.dim))

    def describe(self):
        return {"kind": self.kind, **self.params}


def ou_diagonal(rates):
    """``V(x) = 1/2 sum_i r_i x_i^2``: independent OU coordinates."""
    r = np.atleast_1d(np.asarray(rates, dtype=float))
    if r.ndim != 1 or not np.all(r > 0):
        raise ModelError(f"OU rates must be a positive vector, got {rates}")
    r = r.copy()
    r.setflags(write=False)
    dim = r.shape[0]

    def hess(x):
        return np.broadcast_to(np.diag(r), x.shape[:-1] + (dim, dim)).copy()

    return PotentialModel(
        "ou-diagonal", dim, float(r.min()), float(r.max()), {"rates": r.tolist()},
        lambda x: 0.5 * np.sum(r * x * x, axis=-1), lambda x: r * x, hess,
    )


def quadratic(A):
    """``V(x) = 1/2 x^T A x`` for symmetric positive-definite ``A``."""
    try:
        A = as_spd(A, "A").copy()
    except ConfigError as exc:
        raise ModelError(str(exc)) from exc
    A.setflags(write=False)
    dim = A.shape[0]
    w = np.linalg.eigvalsh(A)

    def grad(x):
        return _matvec(A, x)

    def V(x):
        return 0.5 * np.sum(x * grad(x), axis=-1)

    def hess(x):
        return np.broadcast_to(A, x.shape[:-1] + (dim, dim)).copy()

    return PotentialModel("quadratic", dim, float(w[0]), float(w[-1]), {"A": A.tolist()}, V, grad, hess)


def quartic_1d(a=1.0, beta=1.0):
    """``V(x) = a x^2 / 2 + beta x^4 / 4`` on the line.

    Coercive with ``delta = a``; the Hessian ``a + 3 beta x^2`` is unbounded
    above, so no ``Delta`` is declared.
    """
    a = float(a)
    beta = float(beta)
    if not a > 0 or beta < 0:
        raise ModelError(f"quartic needs a > 0 and beta >= 0, got a={a}, beta={beta}")
    return PotentialModel(
        "quartic-1d", 1, a, a if beta == 0 else None, {"a": a, "beta": beta},
        lambda x: 0.5 * a * x[..., 0] ** 2 + 0.25 * beta * x[..., 0] ** 4,
        lambda x: a * x + beta * x ** 3,
        lambda x: (a + 3.0 * beta * x * x)[..., None],
    )


def custom_polynomial(coefficients, delta, Delta=None):
    """One-dimensional ``V(x) = sum_k c_k x^k`` with ``coefficients = [c_2, c_3, ...]``.

    The constant and linear terms are absent by construction.  The declared
    ``delta`` (and ``Delta``) are taken on trust here; use
    :func:`check_coercivity` to test them.
    """
    c = np.asarray(coefficients, dtype=float)
    if c.ndim != 1 or c.size == 0 or not np.all(np.isfinite(c)):
        raise ModelError("coefficients must be a non-empty finite list [c2, c3, ...]")
    full = np.concatenate([[0.0, 0.0], c])
    P = np.polynomial.Polynomial(full)
    dP, d2P = P.deriv(1), P.deriv(2)
    return PotentialModel(
        "custom-polynomial", 1, float(delta), None if Delta is None else float(Delta),
        {"coefficients": c.tolist(), "delta": float(delta), "Delta": Delta},
        lambda x: P(x[..., 0]), lambda x: dP(x), lambda x: d2P(x)[..., None],
    )


def linear_field(A, delta=None):
    """``F(x) = A x`` with symmetric ``A``; coercive when ``A`` is positive definite."""
    A = np.asarray(A, dtype=float).copy()
    A.setflags(write=False)
    dim = A.shape[0]
    w = np.linalg.eigvalsh(0.5 * (A + A.T))
    if delta is None:
        delta = float(w[0])
    return VectorFieldModel(
        dim, lambda x: _matvec(A, x),
        lambda x: np.broadcast_to(A, x.shape[:-1] + (dim, dim)).copy(),
        delta=delta, Delta=float(w[-1]), kind="linear-field", params={"A": A.tolist()},
    )


def gradient_field(model):
    """View a potential model as the vector field ``grad V``."""
    return VectorFieldModel(
        model.dim, model._grad, model._hess, delta=model.delta, Delta=model.Delta,
        kind="gradient-field", params={"potential": model.describe()},
    )


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def build_truncated_model(base, M, samples=4001):
    """Globally Hessian-bounded modification ``V_M`` of a 1-D potential.

    The second derivative is prescribed and integrated twice:

    * ``|x| <= M``: ``V_M'' = V''``, so ``V_M = V`` there;
    * ``M < |x| < M + 1``: ``(1 - s) V'' + s Delta_M`` with the quintic
      smoothstep ``s(|x| - M)``, so ``V_M`` is C^4 across both seams;
    * ``|x| >= M + 1``: the constant ``Delta_M = max V''(+-M)``, i.e.
      ``V_M`` is ``Delta_M x^2 / 2`` plus an affine part.

    The blend is a convex combination of two values that are both at least
    ``delta``, so coercivity is preserved.  The declared ``Delta`` is the
    maximum of ``V_M''`` sampled on ``[-(M+1), M+1]`` with a small safety
    margin.

    Raises
    ------
    PreconditionError
        For non 1-D bases or ``M <= 0``.
    ModelError
        If the base Hessian falls below ``delta`` inside the ball.
    """
    if base.dim != 1:
        raise PreconditionError("truncation is implemented for one-dimensional potentials")
    M = float(M)
    if not M > 0:
        raise PreconditionError(f"truncation radius must be positive, got {M}")
    grid = np.linspace(-M, M, samples)[:, None]
    hb = base.hess(grid)[:, 0, 0]
    if np.min(hb) < base.delta * (1.0 - 1e-12):
        raise ModelError(
            f"base Hessian drops to {np.min(hb):.6g} < delta={base.delta} inside |x| <= {M}"
        )
    DM = float(max(base.hess(np.array([M]))[0, 0], base.hess(np.array([-M]))[0, 0]))

    def f_side(t, sgn):
        """Base potential along ``x = sgn * t`` (t >= 0) with t-derivatives."""
        x = (sgn * t)[..., None]
        return base.V(x), sgn * base.grad(x)[..., 0], base.hess(x)[..., 0, 0]

    def h_side(t, sgn):
        s = _smoothstep(t - M)
        return (1.0 - s) * f_side(t, sgn)[2] + s * DM

    def extend(t, sgn):
        """``F, F', F''`` of the extension at ``t >= M`` along one side."""
        V0, g0, _ = f_side(np.array(M), sgn)
        tb = np.minimum(t, M + 1.0)
        # int_M^tb h(u) du and int_M^tb (tb - u) h(u) du, Gauss-Legendre on [M, tb]
        half = 0.5 * (tb - M)
        u = M + half[..., None] * (_GL_X + 1.0)
        hu = h_side(u, sgn)
        Ih = half * np.sum(_GL_W * hu, axis=-1)
        Ixh = half * np.sum(_GL_W * (tb[..., None] - u) * hu, axis=-1)
        g_b = g0 + Ih
        F_b = V0 + g0 * (tb - M) + Ixh
        r = t - tb
        F = F_b + g_b * r + 0.5 * DM * r * r
        Fp = g_b + DM * r
        Fpp = np.where(t > M + 1.0, DM, h_side(tb, sgn))
        return F, Fp, Fpp

    base_parts = (
        lambda x: base.V(x),
        lambda x: base.grad(x)[..., 0],
        lambda x: base.hess(x)[..., 0, 0],
    )

    def evaluate(x, which):
        x1 = x[..., 0]
        t = np.abs(x1)
        out = np.array(base_parts[which](x), dtype=float)
        outside = t > M
        if not np.any(outside):
            return out
        for side in (1.0, -1.0):
            sel = outside & ((x1 < 0) == (side < 0))
            if np.any(sel):
                val = extend(t[sel], side)[which]
                out[sel] = side * val if which == 1 else val
        return out

    tb = np.linspace(M, M + 1.0, samples)
    h_blend = np.concatenate([h_side(tb, 1.0), h_side(tb, -1.0), hb])
    Delta = float(np.max(h_blend)) * (1.0 + 1e-9)

    return PotentialModel(
        "truncated", 1, base.delta, Delta,
        {"base": base.describe(), "M": M, "Delta_M": DM},
        lambda x: evaluate(x, 0),
        lambda x: evaluate(x, 1)[..., None],
        lambda x: evaluate(x, 2)[..., None, None],
        base=base,
    )


def model_from_spec(spec):
    """Build a model from a JSON-style dictionary.

    Recognised kinds: ``ou-diagonal`` (``rates``), ``quadratic`` (``A``),
    ``quartic-1d`` (``a``, ``beta``), ``custom-polynomial`` (``coefficients``,
    ``delta``, optional ``Delta``) and ``truncated`` (``base``, ``M``).
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"model spec must be an object with a 'kind', got {spec!r}")
    kind = spec["kind"]
    allowed = {
        "ou-diagonal": {"rates"},
        "quadratic": {"A"},
        "quartic-1d": {"a", "beta"},
        "custom-polynomial": {"coefficients", "delta", "Delta"},
        "truncated": {"base", "M"},
    }
    if kind not in allowed:
        raise ConfigError(f"unknown model kind {kind!r}")
    extra = set(spec) - allowed[kind] - {"kind"}
    if extra:
        raise ConfigError(f"unknown keys for {kind}: {sorted(extra)}")
    try:
        if kind == "ou-diagonal":
            return ou_diagonal(spec["rates"])
        if kind == "quadratic":
            return quadratic(spec["A"])
        if kind == "quartic-1d":
            return quartic_1d(spec.get("a", 1.0), spec.get("beta", 1.0))
        if kind == "custom-polynomial":
            return custom_polynomial(spec["coefficients"], spec["delta"], spec.get("Delta"))
        return build_truncated_model(model_from_spec(spec["base"]), spec["M"])
    except KeyError as exc:
        raise ConfigError(f"model {kind} is missing key {exc}") from None


# ---------------------------------------------------------------------------
# evaluation and coercivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelEval:
    V: float
    grad: np.ndarray
    hess: np.ndarray


def evaluate_model(model, x):
    """Return ``V``, ``grad V`` and the (symmetrised) Hessian at a single point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.dim,):
        raise ConfigError(f"expected a point of dimension {model.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("point has non-finite entries")
    H = np.asarray(model.hess(x), dtype=float)
    return ModelEval(float(model.V(x)), np.asarray(model.grad(x), dtype=float), 0.5 * (H + H.T))


@dataclass
class CoercivityReport:
    passed: bool
    samples: int
    min_quadratic_form: float
    max_quadratic_form: float
    min_monotonicity: float
    counterexample: Optional[dict] = None


def check_coercivity(model, radius, count, seed, delta=None, Delta=None):
    """Sample-based test of ``delta |y|^2 <= y^T H(x) y <= Delta |y|^2``.

    Points ``x`` are uniform in the cube ``[-radius, radius]^dim`` and ``y``
    uniform on the unit sphere.  Monotonicity of the field,
    ``<F(x) - F(z), x - z> >= delta |x - z|^2``, is checked on the same
    number of random pairs.  The first violation is returned as a
    counterexample rather than raised.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    delta = model.delta if delta is None else float(delta)
    rng = np.random.default_rng(seed)
    dim = model.dim
    x = rng.uniform(-radius, radius, (count, dim))
    y = rng.standard_normal((count, dim))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    H = model.jacobian(x)
    qf = np.einsum("ni,nij,nj->n", y, H, y)
    z = rng.uniform(-radius, radius, (count, dim))
    dx = x - z
    nrm2 = np.sum(dx * dx, axis=1)
    mono = np.sum((model.field(x) - model.field(z)) * dx, axis=1) / np.where(nrm2 > 0, nrm2, 1.0)
    slack = 1e-12 * max(1.0, abs(delta))
    report = CoercivityReport(True, count, float(qf.min()), float(qf.max()), float(mono.min()))
    low = np.flatnonzero(qf < delta - slack)
    if low.size:
        i = int(low[0])
        report.passed = False
        report.counterexample = {"x": x[i].tolist(), "y": y[i].tolist(), "value": float(qf[i]),
                                 "violates": "lower"}
        return report
    if Delta is not None:
        high = np.flatnonzero(qf > Delta + 1e-12 * max(1.0, abs(Delta)))
        if high.size:
            i = int(high[0])
            report.passed = False
            report.counterexample = {"x": x[i].tolist(), "y": y[i].tolist(), "value": float(qf[i]),
                                     "violates": "upper"}
            return report
    bad = np.flatnonzero(mono < delta - 1e-9 * max(1.0, abs(delta)))
    if bad.size:
        i = int(bad[0])
        report.passed = False
        report.counterexample = {"x": x[i].tolist(), "z": z[i].tolist(), "value": float(mono[i]),
                                 "violates": "monotonicity"}
    return report


def require_coercive(model, radius, count=2000, seed=0):
    """Like :func:`check_coercivity` but raises :class:`CoercivityViolation`."""
    rep = check_coercivity(model, radius, count, seed, Delta=model.Delta)
    if not rep.passed:
        raise CoercivityViolation(f"coercivity check failed: {rep.counterexample}")
    return rep


# ---------------------------------------------------------------------------
# semiflow
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SemiflowResult:
    times: np.ndarray
    states: np.ndarray
    x0: np.ndarray
    step: float = float("nan")

    def at(self, t):
        """State at a grid time (nearest grid index)."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[k]


def local_hessian_bound(model, radius, count=257):
    """Largest Hessian eigenvalue seen on the ball of the given radius.

    Uses a deterministic sample: the axes in 1-D, plus random directions in
    higher dimensions, at radii ``linspace(0, radius)``.
    """
    if model.Delta is not None:
        return float(model.Delta)
    dim = model.dim
    r = np.linspace(0.0, max(radius, 0.0), count)
    dirs = np.vstack([np.eye(dim), -np.eye(dim)])
    if dim > 1:
        rng = np.random.default_rng(12345)
        extra = rng.standard_normal((16, dim))
        dirs = np.vstack([dirs, extra / np.linalg.norm(extra, axis=1, keepdims=True)])
    pts = (r[:, None, None] * dirs[None]).reshape(-1, dim)
    H = model.jacobian(pts)
    w = np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))
    return float(np.max(w))


def default_step(model, x0):
    """``h = min(0.01, 0.1 / Delta_local)`` with ``Delta_local`` on the ball ``|x| <= |x0|``."""
    D = local_hessian_bound(model, float(np.linalg.norm(x0)))
    return min(MAX_STEP, 0.1 / D)


def _rk4_step(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _uniform_schedule(t_end, h, n_out):
    """Internal step and stride so that the output grid is uniform."""
    if n_out is None:
        n_steps = max(1, int(math.ceil(t_end / h - 1e-9)))
        return t_end / n_steps, n_steps, 1
    n_out = int(n_out)
    if n_out < 1:
        raise ConfigError("n_out must be >= 1")
    stride = max(1, int(math.ceil((t_end / n_out) / h - 1e-9)))
    return t_end / (n_out * stride), n_out * stride, stride


def _integrate(f, y0, t_end, h, n_out):
    if not t_end > 0:
        raise ConfigError(f"t_end must be positive, got {t_end}")
    h, n_steps, stride = _uniform_schedule(float(t_end), float(h), n_out)
    if h < MIN_STEP:
        raise StiffnessError(f"step size {h:.3g} below {MIN_STEP:.0e}; the problem is too stiff")
    n_rec = n_steps // stride + 1
    out = np.empty((n_rec,) + y0.shape)
    out[0] = y0
    y = y0.copy()
    for i in range(1, n_steps + 1):
        y = _rk4_step(f, y, h)
        if i % stride == 0:
            if not np.all(np.isfinite(y)):
                raise StiffnessError("integration produced non-finite values; reduce the step")
            out[i // stride] = y
    times = np.arange(n_rec) * (h * stride)
    times[-1] = t_end
    return times, out, h


def integrate_semiflow(model, x0, t_end, h=None, n_out=None):
    """Classical RK4 integration of ``dx/dt = -F(x)`` from ``x0``.

    Parameters
    ----------
    model : PotentialModel or VectorFieldModel
    x0 : array_like
        Nonzero initial state.
    t_end : float
    h : float, optional
        Maximal step; defaults to :func:`default_step`.
    n_out : int, optional
        Number of output intervals of the uniform output grid; every step is
        recorded by default.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.dim,):
        raise ConfigError(f"x0 must have dimension {model.dim}")
    if not np.any(x0 != 0):
        raise PreconditionError("x0 must be nonzero")
    h = default_step(model, x0) if h is None else float(h)
    times, states, used = _integrate(lambda y: -model.field(y), x0, t_end, h, n_out)
    return SemiflowResult(times, states, x0, used)


# ---------------------------------------------------------------------------
# spectral data and asymptotic direction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralData:
    alpha1: float
    eigvecs: np.ndarray
    multiplicity: int
    hess0: np.ndarray
    spectrum: np.ndarray

    def project(self, v):
        """Orthogonal projection onto the bottom eigenspace."""
        return self.eigvecs @ (self.eigvecs.T @ v)


def spectral_at_origin(model, rtol=1e-9):
    """Bottom of the spectrum of ``DF(0)`` together with its eigenspace.

    Eigenvalues within ``rtol * max|lambda|`` of the smallest one are treated
    as equal, so degenerate bottoms are returned as a full basis.
    """
    H = np.asarray(model.hess0, dtype=float)
    if np.max(np.abs(H - H.T)) > 1e-10 * max(1.0, np.max(np.abs(H))):
        raise ModelError("the linearisation at the origin is not symmetric")
    w, Q = np.linalg.eigh(0.5 * (H + H.T))
    if not w[0] > 0:
        raise ModelError(f"the linearisation at the origin is not positive definite: {w}")
    tol = rtol * max(1.0, float(np.max(np.abs(w))))
    mult = int(np.sum(w <= w[0] + tol))
    return SpectralData(float(w[0]), Q[:, :mult].copy(), mult, H.copy(), w)


@dataclass(frozen=True, eq=False)
class AsymptoticDirection:
    v: np.ndarray
    converged: bool
    residual: float
    near_zero: bool
    norm: float
    t_max: float
    window_change: float
    extrapolated: np.ndarray

    def require_nonzero(self):
        if self.near_zero:
            raise ExceptionalInitialConditionError(
                "v(x0) vanishes: x0 lies in the exceptional set and the profile is undefined"
            )
        return self


def asymptotic_direction(model, x0, spectral=None, t_max=None, window=None, tol=1e-7, h=None):
    """Estimate ``v(x0) = lim exp(alpha1 t) psi(t)``.

    ``r(t) = exp(alpha1 t) psi(t)`` is monitored on ``[0, t_max]``.  The
    estimate is ``r(t_max)``; it is flagged converged when the means of ``r``
    over the last two windows differ by less than ``tol * max(1, |x0|)``.
    An Aitken extrapolation through ``r(t_max/2), r(3 t_max/4), r(t_max)`` is
    reported as a cross-check.

    Raises
    ------
    NumericalRangeError
        When ``alpha1 * t_max`` would overflow the exponential.
    """
    spectral = spectral_at_origin(model) if spectral is None else spectral
    a1 = spectral.alpha1
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    t_max = 40.0 / a1 if t_max is None else float(t_max)
    window = 2.0 / a1 if window is None else float(window)
    if a1 * t_max > 700.0:
        raise NumericalRangeError(
            f"exp(alpha1 * t_max) = exp({a1 * t_max:.1f}) overflows; lower t_max"
        )
    if not 0 < 2 * window < t_max:
        raise ConfigError("window must satisfy 0 < 2 * window < t_max")
    n_out = 400
    sf = integrate_semiflow(model, x0, t_max, h=h, n_out=n_out)
    r = np.exp(a1 * sf.times)[:, None] * sf.states
    if not np.all(np.isfinite(r)):
        raise NumericalRangeError("exp(alpha1 t) psi(t) left the floating-point range")
    t = sf.times
    last = t >= t_max - window
    prev = (t >= t_max - 2 * window) & (t < t_max - window)
    change = float(np.linalg.norm(r[last].mean(axis=0) - r[prev].mean(axis=0)))
    scale = max(1.0, float(np.linalg.norm(x0)))
    v = r[-1].copy()
    residual = float(np.linalg.norm(v - spectral.project(v)))
    norm = float(np.linalg.norm(v))
    near_zero = norm < NEAR_ZERO_REL * float(np.linalg.norm(x0))
    i2, i3 = n_out // 2, (3 * n_out) // 4
    r1, r2, r3 = r[i2], r[i3], r[-1]
    den = r3 - 2.0 * r2 + r1
    # once r has settled to rounding level the differences are pure noise
    usable = np.abs(den) > 1e-10 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        ext = np.where(usable, r3 - (r3 - r2) ** 2 / den, r3)
    ext = np.where(np.isfinite(ext), ext, r3)
    return AsymptoticDirection(
        v=v,
        converged=bool(change < tol * scale),
        residual=residual,
        near_zero=bool(near_zero),
        norm=norm,
        t_max=t_max,
        window_change=change,
        extrapolated=ext,
    )


# ---------------------------------------------------------------------------
# Lyapunov equations
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LyapunovSolution:
    times: np.ndarray
    matrices: np.ndarray
    mode: str
    epsilon: float
    flow: Optional[np.ndarray] = None

    @property
    def terminal(self):
        return self.matrices[-1]

    def limit(self, hess0):
        return 0.5 * self.epsilon * np.linalg.inv(hess0)


def integrate_lyapunov(model, epsilon, t_end, mode="frozen", x0=None, h=None, n_out=None,
                       initial=None):
    """Integrate ``dS = -(J S + S J^T) + eps I`` with RK4.

    ``mode='frozen'`` uses ``J = DF(0)``; ``mode='along-flow'`` uses
    ``J = DF(psi(t))`` and integrates ``psi`` jointly with ``S`` on the same
    steps.  The right-hand side is formed as ``-(P + P^T) + eps I`` with
    ``P = J S``, which is exactly symmetric in floating point.

    Parameters
    ----------
    initial : array_like, optional
        ``S(0)``; zero by default.

    Raises
    ------
    IntegratorError
        If the trajectory loses symmetry by more than ``1e-9 |S|``.
    """
    if mode not in ("frozen", "along-flow"):
        raise ConfigError(f"unknown Lyapunov mode {mode!r}")
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    dim = model.dim
    S0 = np.zeros((dim, dim)) if initial is None else np.array(initial, dtype=float).reshape(dim, dim)
    eye = float(epsilon) * np.eye(dim)
    if mode == "frozen":
        J0 = np.asarray(model.hess0, dtype=float)
        hh = min(MAX_STEP, 0.1 / float(np.max(np.abs(np.linalg.eigvals(J0))))) if h is None else h

        def f(y):
            P = J0 @ y
            return -(P + P.T) + eye

        times, mats, _ = _integrate(f, S0, t_end, hh, n_out)
        flow = None
    else:
        if x0 is None:
            raise PreconditionError("along-flow mode needs x0")
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        hh = default_step(model, x0) if h is None else h
        # pack psi into an extra row so both advance on identical RK4 stages
        y0 = np.vstack([S0, x0[None, :]])

        def f(y):
            S, x = y[:dim], y[dim]
            J = model.jacobian(x)
            P = J @ S
            return np.vstack([-(P + P.T) + eye, -model.field(x)[None, :]])

        times, packed, _ = _integrate(f, y0, t_end, hh, n_out)
        mats, flow = packed[:, :dim], packed[:, dim]
    asym = np.max(np.abs(mats - np.swapaxes(mats, 1, 2)), axis=(1, 2))
    size = np.max(np.abs(mats), axis=(1, 2))
    if np.any(asym > 1e-9 * np.maximum(size, np.finfo(float).tiny)):
        raise IntegratorError("Lyapunov trajectory lost symmetry")
    return LyapunovSolution(times, mats, mode, float(epsilon), flow)


def _integrate_marks(f, y0, marks, h):
    """RK4 from ``t = 0`` landing exactly on each of the increasing ``marks``."""
    out = np.empty((len(marks),) + y0.shape)
    y = y0.copy()
    t = 0.0
    for i, mark in enumerate(marks):
        span = mark - t
        if span < 0:
            raise ConfigError("times must be nonnegative and increasing")
        if span > 0:
            n = max(1, int(math.ceil(span / h - 1e-9)))
            hs = span / n
            for _ in range(n):
                y = _rk4_step(f, y, hs)
        out[i] = y
        t = mark
    return out


def linear_law_at(model, epsilon, x0, times, h=None):
    """Mean ``psi(t)`` and covariance ``Delta_eps(t)`` of the linearised process.

    Integrates the semiflow and the along-flow Lyapunov equation jointly
    (same RK4 stages) and returns both at the requested increasing times.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dim = model.dim
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ConfigError("times must be a nonnegative nondecreasing sequence")
    hh = default_step(model, x0) if h is None else float(h)
    eye = float(epsilon) * np.eye(dim)

    def f(y):
        S, x = y[:dim], y[dim]
        P = model.jacobian(x) @ S
        return np.vstack([-(P + P.T) + eye, -model.field(x)[None, :]])

    packed = _integrate_marks(f, np.vstack([np.zeros((dim, dim)), x0[None, :]]), times, hh)
    return packed[:, dim].copy(), packed[:, :dim].copy()


# ---------------------------------------------------------------------------
# rotating linear system
# ---------------------------------------------------------------------------

def rotation(theta):
    """Standard counter-clockwise planar rotation by ``theta``."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def quarter_turn_rotation(theta):
    """The matrix ``[[sin, cos], [-cos, sin]](theta)``.

    It equals ``rotation(theta - pi/2)``; kept only to report how the stated
    frame identity fares with it.
    """
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[s, c], [-c, s]])


@dataclass(frozen=True, eq=False)
class RotatingFrameResult:
    times: np.ndarray
    states: np.ndarray
    x0: np.ndarray
    corrected: np.ndarray
    deviation: float
    corrected_literal: np.ndarray
    deviation_literal: float
    A: np.ndarray

    @property
    def semiflow(self):
        return SemiflowResult(self.times, self.states, self.x0)


def rotating_frame_semiflow(a, b, x0, t_grid, h=1e-3):
    """Flow of ``dx/dt = -A x`` with ``A = [[a, b], [-b, a]]`` and its frame correction.

    The flow is integrated with RK4 (step at most ``h``) between the grid
    points.  The corrected trajectory ``exp(a t) R(-b t) psi(t)`` uses the
    standard rotation ``R``; the same quantity with the literal matrix of
    :func:`quarter_turn_rotation` is returned alongside.
    """
    a = float(a)
    b = float(b)
    if not a > 0:
        raise ModelError(f"rotating model requires a > 0, got {a}")
    x0 = np.asarray(x0, dtype=float).reshape(2)
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or t[0] < 0 or np.any(np.diff(t) <= 0):
        raise ConfigError("t_grid must be a non-empty increasing grid starting at t >= 0")
    A = np.array([[a, b], [-b, a]])

    def f(y):
        return -(A @ y)

    states = np.empty((t.size, 2))
    y = x0.copy()
    tc = 0.0
    for i, tk in enumerate(t):
        span = tk - tc
        if span > 0:
            n = max(1, int(math.ceil(span / h - 1e-9)))
            hs = span / n
            for _ in range(n):
                y = _rk4_step(f, y, hs)
        states[i] = y
        tc = tk
    corr = np.array([math.exp(a * tk) * (rotation(-b * tk) @ s) for tk, s in zip(t, states)])
    lit = np.array([math.exp(a * tk) * (quarter_turn_rotation(-b * tk) @ s) for tk, s in zip(t, states)])
    dev = float(np.max(np.linalg.norm(corr - x0, axis=1)))
    dev_lit = float(np.max(np.linalg.norm(lit - x0, axis=1)))
    return RotatingFrameResult(t, states, x0, corr, dev, lit, dev_lit, A)
