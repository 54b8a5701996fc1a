"""Command line front end.

Subcommands:

* ``solve``     deconvolve one observation volume with a given PSF
* ``simulate``  generate a synthetic truth measure + observation from a config
* ``bench``     run the full benchmark sweep described by a config file
* ``plot``      turn a records CSV into relative time/criterion figures

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import experiment
from .measures import save_measure
from .solvers import BSFW, SFW, SolverOptions, bsfw, sfw
from .volumes import GridGeometry, Volume, read_volume, write_volume

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="sfw3d", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_solve = sub.add_parser("solve", help="deconvolve one observation volume")
    p_solve.add_argument("--observation", required=True, help="input volume file")
    p_solve.add_argument("--psf", required=True, help="kernel volume file (centered)")
    p_solve.add_argument("--lam", type=float, default=0.2,
                         help="regularization weight (default 0.2)")
    p_solve.add_argument("--algorithm", choices=[SFW, BSFW], default=SFW)
    p_solve.add_argument("--out", required=True, help="output measure file")
    p_solve.add_argument("--trace", help="optional per-iteration trace CSV")
    p_solve.add_argument("--sigma-min", type=float, default=0.7)
    p_solve.add_argument("--sigma-max", type=float, default=1.3)
    p_solve.add_argument("--shape-min", type=float, default=1.6)
    p_solve.add_argument("--shape-max", type=float, default=2.4)
    p_solve.add_argument("--margin", type=float, default=None,
                         help="position margin from faces (default 3*sigma-max)")
    p_solve.add_argument("--max-iterations", type=int, default=50)
    p_solve.add_argument("--n-sigma", type=int, default=8)
    p_solve.add_argument("--n-shape", type=int, default=6)
    p_solve.add_argument("--workers", type=int, default=None)

    p_sim = sub.add_parser("simulate", help="generate a synthetic instance")
    p_sim.add_argument("--config", required=True, help="experiment config file")
    p_sim.add_argument("--out-dir", required=True)
    p_sim.add_argument("--size", type=int, default=None,
                       help="volume side (default: first size in the config)")
    p_sim.add_argument("--count", type=int, default=None,
                       help="atom count (default: first count in the config)")
    p_sim.add_argument("--trial", type=int, default=0, help="trial index for the RNG")

    p_bench = sub.add_parser("bench", help="run the benchmark sweep")
    p_bench.add_argument("--config", required=True, help="experiment config file")
    p_bench.add_argument("--out-dir", default=None, help="override config out_dir")
    p_bench.add_argument("--quiet", action="store_true")

    p_plot = sub.add_parser("plot", help="plot a records CSV")
    p_plot.add_argument("--csv", required=True, help="records.csv from bench")
    p_plot.add_argument("--out-dir", required=True)
    return parser


def _cmd_solve(args) -> int:
    y = read_volume(args.observation)
    psf_kernel = read_volume(args.psf)
    if y.dims != psf_kernel.dims:
        raise ValueError(f"observation dims {y.dims} != PSF dims {psf_kernel.dims}")
    from .forward import Psf

    psf = Psf(psf_kernel)
    bounds = experiment.default_domain(
        y.dims, (args.sigma_min, args.sigma_max), (args.shape_min, args.shape_max),
        args.margin)
    opts = SolverOptions(lam=args.lam, max_outer_iterations=args.max_iterations,
                         n_sigma=args.n_sigma, n_shape=args.n_shape,
                         workers=args.workers)
    solver = sfw if args.algorithm == SFW else bsfw
    result = solver(y, psf, opts, bounds)
    save_measure(result.measure, args.out)
    if args.trace:
        _write_trace_csv(result, args.trace)
    print(f"{args.algorithm}: {len(result.measure)} atoms, "
          f"criterion {result.criterion:.9g}, stopped by {result.termination} "
          f"after {len(result.trace.records)} iterations "
          f"({result.trace.t_total:.2f}s)")
    return 0


def _write_trace_csv(result, path) -> None:
    cols = ("iteration", "eta_max", "criterion_before", "criterion_after_lasso",
            "criterion_after_descent", "atom_count", "t_certificate", "t_lasso",
            "t_descent")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in result.trace.records:
            writer.writerow([
                rec.index, repr(rec.eta_max), repr(rec.criterion_before),
                "" if rec.criterion_after_lasso is None else repr(rec.criterion_after_lasso),
                "" if rec.criterion_after_descent is None else repr(rec.criterion_after_descent),
                rec.atom_count, repr(rec.t_certificate), repr(rec.t_lasso),
                repr(rec.t_descent),
            ])


def _cmd_simulate(args) -> int:
    config = experiment.config_from_file(args.config)
    size = args.size if args.size is not None else config.sizes[0]
    count = args.count if args.count is not None else config.atom_counts[0]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    from .forward import forward

    geom = GridGeometry((size,) * 3)
    psf = experiment.make_surrogate_psf(geom, config.psf_lateral_sigma,
                                        config.psf_axial_sigma)
    rng = experiment._trial_rng(config, size, count, args.trial)
    truth = experiment.sample_ground_truth(config, size, count, rng)
    clean = forward(truth, psf)
    noise_sigma = experiment._noise_sigma_for(config, clean)
    y = experiment.synthesize_observation(truth, psf, noise_sigma, rng)

    save_measure(truth, out / "truth.txt")
    write_volume(y, out / "observation.vol")
    write_volume(psf.kernel, out / "psf.vol")
    print(f"simulated {count} atoms in {size}^3 (noise sigma {noise_sigma:.6g}) "
          f"into {out}")
    return 0


def _cmd_bench(args) -> int:
    config = experiment.config_from_file(args.config)
    progress = None if args.quiet else lambda msg: print(msg, flush=True)
    records = experiment.run_benchmark(config, out_dir=args.out_dir,
                                       progress=progress)
    out = Path(args.out_dir if args.out_dir is not None else config.out_dir)
    print(f"{len(records)} records -> {out / 'records.csv'}")
    return 0


def _cmd_plot(args) -> int:
    paths = experiment.emit_plots(args.csv, args.out_dir)
    for p in paths:
        print(p)
    return 0


_COMMANDS = {
    "solve": _cmd_solve,
    "simulate": _cmd_simulate,
    "bench": _cmd_bench,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        return RUNTIME_ERROR
    except Exception as exc:
        print(f"sfw3d {args.command}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
