"""Command line entry point ``geomorse``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .curve import read_curve_csv, write_curve_csv
from .errors import GeomorseError
from .fermi import build_chart, foliation_report, write_chart_json
from .flow import FlowBudget, evolve, write_trace_csv
from .minmax import WidthBudget, plane_sweepout, width_estimate, write_width_json
from .report import PipelineConfig, run_morse_pipeline
from .spectrum import stability_spectrum
from .surface import MetricSurface


def load_surface(arg):
    """A surface from a JSON file, or the shorthands ``round[:r]`` and ``ellipsoid:a,b,c``."""
    if os.path.exists(arg):
        with open(arg) as fh:
            return MetricSurface.from_dict(json.load(fh))
    name, _, rest = arg.partition(":")
    if name == "round":
        return MetricSurface.round(float(rest) if rest else 1.0)
    if name == "ellipsoid" and rest:
        return MetricSurface.ellipsoid(*(float(v) for v in rest.split(",")))
    raise argparse.ArgumentTypeError(f"cannot read surface {arg!r}")


def _emit(payload, out):
    text = json.dumps(payload, sort_keys=True, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_flow(args):
    surface = load_surface(args.surface)
    curve = read_curve_csv(args.curve, surface)
    state = evolve(curve, surface, FlowBudget(max_steps=args.max_steps, t_max=args.t_max, dt=args.dt))
    write_trace_csv(args.out, state)
    if args.curve_out:
        write_curve_csv(args.curve_out, state.curve)
    print(f"{state.status} t={state.time:.6g} length={state.length:.12g} steps={state.step_count}")


def cmd_fermi(args):
    surface = load_surface(args.surface)
    core = read_curve_csv(args.geodesic, surface)
    nx, ny = (int(v) for v in args.grid.split(","))
    chart = build_chart(core, surface, h=args.half_width, nx=nx, ny=ny)
    write_chart_json(args.out, chart)
    print(json.dumps(foliation_report(chart), sort_keys=True, indent=1))


def cmd_spectrum(args):
    surface = load_surface(args.surface)
    curve = read_curve_csv(args.curve, surface)
    spec = stability_spectrum(curve, surface, m=args.num_eigs)
    d = spec.to_dict()
    _emit({k: d[k] for k in ("eigenvalues", "index", "nullity", "tol")}, args.out)


def cmd_minmax(args):
    surface = load_surface(args.surface)
    sw = plane_sweepout(surface, args.mode, args.lattice, args.n)
    est = width_estimate(sw, surface, WidthBudget(t_target=args.t_max))
    os.makedirs(args.out_dir, exist_ok=True)
    write_width_json(os.path.join(args.out_dir, "width.json"), est)
    if est.limit_curve is not None:
        write_curve_csv(os.path.join(args.out_dir, "limit_curve.csv"), est.limit_curve)
    print(f"width={est.value:.12g} status={est.limit_status} parameter={list(est.parameter)}")


def cmd_morse(args):
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    report, _ = run_morse_pipeline(config, args.out_dir)
    d = report.to_dict()
    print(json.dumps({k: d[k] for k in ("counts", "weak", "strong", "all_pass", "warnings")}, sort_keys=True))
    return 0 if report.all_pass else 1


def build_parser():
    p = argparse.ArgumentParser(prog="geomorse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flow", help="curve shortening flow of one curve")
    f.add_argument("--surface", required=True)
    f.add_argument("--curve", required=True)
    f.add_argument("--dt", type=float, default=None)
    f.add_argument("--t-max", type=float, default=float("inf"))
    f.add_argument("--max-steps", type=int, default=200_000)
    f.add_argument("--out", required=True, help="trace CSV (time,length,max_curvature)")
    f.add_argument("--curve-out", default=None)
    f.set_defaults(func=cmd_flow)

    c = sub.add_parser("fermi", help="Fermi chart and foliation report around a geodesic")
    c.add_argument("--surface", required=True)
    c.add_argument("--geodesic", required=True)
    c.add_argument("--half-width", type=float, default=0.2)
    c.add_argument("--grid", default="256,61", help="nx,ny")
    c.add_argument("--out", default="chart.json")
    c.set_defaults(func=cmd_fermi)

    s = sub.add_parser("spectrum", help="Jacobi spectrum of a closed geodesic")
    s.add_argument("--surface", required=True)
    s.add_argument("--curve", required=True)
    s.add_argument("--num-eigs", type=int, default=8)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_spectrum)

    m = sub.add_parser("minmax", help="width of a plane-section sweepout")
    m.add_argument("--surface", required=True)
    m.add_argument("--mode", type=int, choices=(1, 2, 3), required=True)
    m.add_argument("--lattice", type=int, default=16)
    m.add_argument("--n", type=int, default=128)
    m.add_argument("--t-max", type=float, default=0.5)
    m.add_argument("--out-dir", default=".")
    m.set_defaults(func=cmd_minmax)

    r = sub.add_parser("morse", help="full pipeline: catalog and Morse inequalities")
    r.add_argument("--config", default=None)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_morse)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except GeomorseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
