"""Command-line interface.

Every subcommand writes CSV (header row first) to stdout or ``--out``.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import experiments as ex
from . import sde_sim
from .errors import ConfigError, CutoffLabError, IdentityViolationError
from .gaussian_tv import verify_gaussian_identities

PRESETS = {
    "ou": {"kind": "ou-diagonal", "rates": [1.0]},
    "quadratic-2d": {"kind": "quadratic", "A": [[1.0, 0.0], [0.0, 2.0]]},
    "quartic": {"kind": "quartic-1d"},
    "truncated-quartic": {"kind": "truncated", "base": {"kind": "quartic-1d"}, "M": 3.0},
}


def _model(text):
    if text in PRESETS:
        return dyn.model_from_spec(PRESETS[text])
    try:
        spec = json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(f"--model must be a preset {sorted(PRESETS)} or a JSON object") from None
    return dyn.model_from_spec(spec)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _emit(text, out):
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _c_grid(args):
    return ex.DEFAULT_C_GRID if args.c_grid is None else _floats(args.c_grid)


def cmd_validate_lemmas(args):
    rep = verify_gaussian_identities(args.seed, args.cases, tolerance=args.tol)
    rows = [(name, dev) for name, dev in rep.max_deviation.items()]
    _emit(ex._csv_text(("identity", "max_deviation"), rows), args.out)
    if not rep.passed:
        raise IdentityViolationError(f"identity check failed; worst case {rep.worst_case}")
    return 0


def cmd_semiflow(args):
    model = _model(args.model)
    res = dyn.integrate_semiflow(model, _floats(args.x0), args.t_end, n_out=args.n_out)
    header = ["t"] + [f"x_{i}" for i in range(model.dim)]
    _emit(ex._csv_text(header, [(t, *x) for t, x in zip(res.times, res.states)]), args.out)
    return 0


def cmd_lyapunov(args):
    model = _model(args.model)
    x0 = _floats(args.x0) if args.x0 else None
    t_end = args.t_end if args.t_end is not None else 20.0 / model.delta
    sol = dyn.integrate_lyapunov(model, args.epsilon, t_end, mode=args.mode, x0=x0, n_out=args.n_out)
    header, rows = ex._lyapunov_rows(sol)
    _emit(ex._csv_text(header, rows), args.out)
    return 0


def cmd_profile(args):
    cv = ex.profile_curve(_model(args.model), _floats(args.x0), _c_grid(args))
    _emit(ex._csv_text(("c", "G"), [(p.c, p.G) for p in cv.points]), args.out)
    return 0


def cmd_curve(args):
    model = _model(args.model)
    x0 = _floats(args.x0)
    curves = []
    for eps in _floats(args.epsilon):
        if args.method == "exact":
            curves.append(ex.linearized_distance_curve(model, eps, x0, _c_grid(args), gamma=args.gamma))
        else:
            method = "fokker-planck" if args.method == "fp" else "kde"
            curves.append(ex.nonlinear_distance_curve(
                model, eps, x0, _c_grid(args), method=method, gamma=args.gamma, cells=args.cells,
                n_paths=args.n_paths, seed=args.seed, bootstrap=args.bootstrap, workers=args.workers))
    _emit(ex.curve_csv(curves), args.out)
    return 0


def cmd_moments(args):
    model = _model(args.model)
    grid = np.linspace(0.0, args.t_end, args.n_out)
    ens = sde_sim.simulate_coupled_linearization(model, args.epsilon, _floats(args.x0), grid,
                                                 args.n_paths, args.seed, workers=args.workers)
    rep = sde_sim.moment_report(ens)
    _emit(ex._csv_text(("t", "n", "estimate", "stderr", "bound", "pass"), rep.rows()), args.out)
    return 0


def cmd_truncation(args):
    rep = ex.truncation_comparison(_model(args.model), _floats(args.M), args.epsilon,
                                   _floats(args.x0), b=args.b, n_paths=args.n_paths,
                                   seed=args.seed, gamma=args.gamma, workers=args.workers)
    _emit(ex._csv_text(ex.TruncationReport.HEADER, rep.csv_rows()), args.out)
    return 0


def cmd_rotating(args):
    curves = [ex.rotating_frame_curve(args.a, args.b, _floats(args.x0), eps, _c_grid(args))
              for eps in _floats(args.epsilon)]
    rows = []
    for cv in curves:
        for p, g2, dev in zip(cv.points, cv.extras["G_principal"], cv.extras["frame_deviation"]):
            rows.append((cv.epsilon, p.c, p.t, p.distance, p.stderr, p.G, g2, dev))
    header = ex.CURVE_HEADER + ("G_principal", "frame_deviation")
    _emit(ex._csv_text(header, rows), args.out)
    return 0


def cmd_run(args):
    cfg = ex.load_config(args.config)
    man = ex.run_experiment(cfg, workers=args.workers, output_dir=args.output_dir)
    for name, st in man.tasks.items():
        line = f"{name}: {st['status']}"
        if st["error"]:
            line += f" ({st['error']})"
        print(line, file=sys.stderr)
    print(man.path)
    return man.exit_code


def build_parser():
    p = argparse.ArgumentParser(prog="cutofflab", description="Cutoff experiments for small-noise diffusions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, x0=True):
        if model:
            sp.add_argument("--model", default="ou",
                            help=f"preset ({', '.join(sorted(PRESETS))}) or JSON model spec")
        if x0:
            sp.add_argument("--x0", default="1", help="comma-separated initial point")
        sp.add_argument("--out", help="write CSV here instead of stdout")

    sp = sub.add_parser("validate-lemmas", help="randomised Gaussian TV identity suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cases", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-6)
    common(sp, model=False, x0=False)
    sp.set_defaults(func=cmd_validate_lemmas)

    sp = sub.add_parser("semiflow", help="deterministic gradient flow")
    common(sp)
    sp.add_argument("--t-end", type=float, default=10.0)
    sp.add_argument("--n-out", type=int, default=101)
    sp.set_defaults(func=cmd_semiflow)

    sp = sub.add_parser("lyapunov", help="covariance ODE of the linearised process")
    common(sp)
    sp.set_defaults(x0=None)
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--t-end", type=float)
    sp.add_argument("--mode", choices=("frozen", "along-flow"), default="frozen")
    sp.add_argument("--n-out", type=int, default=101)
    sp.set_defaults(func=cmd_lyapunov)

    sp = sub.add_parser("profile", help="limiting profile G(c)")
    common(sp)
    sp.add_argument("--c-grid")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("curve", help="distance to equilibrium along the cutoff window")
    common(sp)
    sp.add_argument("--method", choices=("exact", "fp", "kde"), default="exact")
    sp.add_argument("--epsilon", required=True, help="comma-separated noise levels")
    sp.add_argument("--c-grid")
    sp.add_argument("--gamma", type=float, default=ex.DEFAULT_GAMMA)
    sp.add_argument("--cells", type=int)
    sp.add_argument("--n-paths", type=int, default=ex.MIN_KDE_PATHS)
    sp.add_argument("--bootstrap", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("moments", help="moment bounds for the linearisation error")
    common(sp)
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--t-end", type=float, default=3.0)
    sp.add_argument("--n-out", type=int, default=7)
    sp.add_argument("--n-paths", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("truncation", help="stationary TV and exit probabilities under truncation")
    common(sp)
    sp.set_defaults(model="quartic")
    sp.add_argument("--M", default="3,5", help="comma-separated truncation levels")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--b", type=float, default=0.0)
    sp.add_argument("--gamma", type=float, default=ex.DEFAULT_GAMMA)
    sp.add_argument("--n-paths", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_truncation)

    sp = sub.add_parser("rotating", help="exact curve of the rotating linear system")
    common(sp, model=False)
    sp.set_defaults(x0="1,0")
    sp.add_argument("--a", type=float, default=1.0)
    sp.add_argument("--b", type=float, default=1.0)
    sp.add_argument("--epsilon", required=True)
    sp.add_argument("--c-grid")
    sp.set_defaults(func=cmd_rotating)

    sp = sub.add_parser("run", help="execute a JSON experiment config")
    sp.add_argument("config")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--output-dir")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args)
    except CutoffLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
