"""Command-line interface.

Subcommands:

* ``run CONFIG``       -- full pulse-design experiment from a config file
* ``increment-check``  -- verify the increment representation on a named toy
* ``toy``              -- 1-D translation descent benchmark
* ``report RUN_DIR``   -- re-render figures from an existing output directory

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import plots
from .bloch import ExperimentConfig, run_experiment
from .core import ControlSet, ControlSignal, ParametricField, ParticleMeasure, TimePartition
from .descent import DescentConfig, run_descent
from .errors import ConfigurationError, DivergenceError, DomainError
from .functionals import targeting_functional
from .increment import evaluate_increment, write_report_csv


def _translation_problem(n_intervals: int):
    """1-D benchmark: pure translation x' = u toward the point 1 from 0."""
    field = ParametricField(
        eval=lambda x, u: np.broadcast_to(float(np.atleast_1d(u)[0]), np.shape(x)).copy(),
        jacobian_x=lambda x, u: np.zeros(np.shape(x) + (1,)),
        affine_decomposition=(
            lambda x: np.ones(np.shape(x) + (1,)),
            lambda x: np.zeros(np.shape(x)),
        ),
        growth_bound=2.0,
    )
    partition = TimePartition.uniform(1.0, n_intervals)
    bounds = ControlSet(
        np.array([0.0]), np.array([2.0]), candidates=np.array([[0.0], [1.0], [2.0]])
    )
    ell = targeting_functional(np.array([1.0]))
    initial = ParticleMeasure.dirac(np.array([0.0]))
    return field, partition, bounds, ell, initial


def _random_smooth_field(rng) -> ParametricField:
    """A bounded smooth planar field, affine in a 2-D control."""
    coef = rng.uniform(-1.0, 1.0, size=(3, 2, 3))
    freq = rng.uniform(0.5, 1.5, size=(3, 2, 2))
    phase = rng.uniform(0.0, 2 * np.pi, size=(3, 2))

    def _basis(x, j):
        arg = x @ freq[j].T + phase[j]
        return coef[j, :, 0] + coef[j, :, 1] * np.sin(arg) + coef[j, :, 2] * np.cos(arg)

    def evaluate(x, u):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(u)
        return _basis(x, 0) * u[0] + _basis(x, 1) * u[1] + _basis(x, 2)

    def jacobian(x, u):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(u)
        out = np.zeros(x.shape[:-1] + (2, 2))
        for j, scale in ((0, u[0]), (1, u[1]), (2, 1.0)):
            arg = x @ freq[j].T + phase[j]
            trig = coef[j, :, 1] * np.cos(arg) - coef[j, :, 2] * np.sin(arg)
            out += scale * np.einsum("...n,nk->...nk", trig, freq[j])
        return out

    def a_fn(x):
        x = np.asarray(x, dtype=float)
        return np.stack([_basis(x, 0), _basis(x, 1)], axis=-1)

    def b_fn(x):
        return _basis(np.asarray(x, dtype=float), 2)

    return ParametricField(evaluate, jacobian, (a_fn, b_fn))


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    result = run_experiment(config, render_figures=not args.no_figures)
    costs = ", ".join(f"{c:.6g}" for c in result.trace.costs)
    print(f"cost trace: {costs}")
    print(f"outputs in {result.output_dir}")
    return 0


def _cmd_increment_check(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.toy == "translation":
        field, partition, bounds, ell, initial = _translation_problem(args.intervals)
        reference = ControlSignal.constant(partition, [0.0], bounds)
        target = ControlSignal.constant(partition, [1.0], bounds)
    else:
        rng = np.random.default_rng(args.seed)
        field = _random_smooth_field(rng)
        partition = TimePartition.uniform(1.0, args.intervals)
        bounds = ControlSet(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        reference = ControlSignal(
            partition, rng.uniform(-1.0, 1.0, size=(args.intervals, 2)), bounds
        )
        target = ControlSignal(
            partition, rng.uniform(-1.0, 1.0, size=(args.intervals, 2)), bounds
        )
        initial = ParticleMeasure(
            rng.normal(0.0, 0.7, size=(50, 2)), np.full(50, 1.0 / 50)
        )
        ell = targeting_functional(np.array([0.5, -0.25]))
    report = evaluate_increment(field, ell, initial, reference, target, substeps=args.substeps)
    path = out / "increment_report.csv"
    write_report_csv(report, path)
    plots.plot_increment_profile(
        report.times, report.per_node_integrand, out / "increment_profile.png"
    )
    print(f"formula value: {report.formula_value:.12g}")
    print(f"direct value:  {report.direct_value:.12g}")
    print(f"relative gap:  {report.relative_gap:.3e}")
    print(f"report written to {path}")
    return 0


def _cmd_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field, partition, bounds, ell, initial = _translation_problem(args.intervals)
    u0 = ControlSignal.constant(partition, [0.0], bounds)
    config = DescentConfig(
        max_iterations=args.iterations, stagnation_tolerance=1e-6, substeps=50
    )
    trace = run_descent(field, ell, initial, u0, config)
    trace.write_csv(out / "trace.csv")
    control_csvs = trace.write_controls_csv(out)
    plots.plot_trace(out / "trace.csv", out / "trace.png")
    plots.plot_controls(control_csvs, out / "controls.png")
    costs = ", ".join(f"{c:.6g}" for c in trace.costs)
    print(f"cost trace: {costs}")
    print(f"outputs in {out}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigurationError(f"{run_dir} is not a directory")
    written = plots.render_run_report(run_dir)
    if not written:
        raise ConfigurationError(f"no renderable outputs found in {run_dir}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfdescent",
        description="Exact-increment descent for ensemble control, with a Bloch "
        "pulse-design application.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a pulse-design experiment from a config file")
    p_run.add_argument("config", help="flat key = value configuration file")
    p_run.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_run.set_defaults(func=_cmd_run)

    p_inc = sub.add_parser("increment-check", help="verify the increment representation")
    p_inc.add_argument("--toy", choices=("translation", "random2d"), default="translation")
    p_inc.add_argument("--out", default="increment_out")
    p_inc.add_argument("--intervals", type=int, default=20)
    p_inc.add_argument("--substeps", type=int, default=50)
    p_inc.add_argument("--seed", type=int, default=0)
    p_inc.set_defaults(func=_cmd_increment_check)

    p_toy = sub.add_parser("toy", help="1-D translation descent benchmark")
    p_toy.add_argument("--out", default="toy_out")
    p_toy.add_argument("--intervals", type=int, default=8)
    p_toy.add_argument("--iterations", type=int, default=5)
    p_toy.set_defaults(func=_cmd_toy)

    p_rep = sub.add_parser("report", help="re-render figures from an output directory")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
