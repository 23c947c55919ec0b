"""Experiment harness: coefficient fields, configuration, strategy comparisons.

The built-in generators reproduce the qualitative structure of the benchmark
media: a background of 1 with contrast-valued features, either a meandering
high-conductivity band crossing the domain diagonally between the inflow and
outflow boxes plus scattered inclusions ('channel'), or the same inclusions
without the band ('inclusions').  Geometry is seeded-deterministic; exact
rasters can be supplied through the field file format instead.
"""

import argparse
import os
import sys

import numpy as np

from .adapt import (
    AdaptFailure,
    MarkingConfig,
    STRATEGIES,
    adapt_loop,
    build_problem,
    write_trace_csv,
)
from .fine_fem import CoefficientField
from .indicators import dump_indicators
from .mesh import build_grids
from .ms_space import dump_spectra

__all__ = [
    "ExperimentConfig",
    "generate_field",
    "read_field",
    "write_field",
    "box_fraction",
    "run_experiment",
    "main",
]

# Benchmark geometry: inflow box K1, outflow box K2 = goal region.
K1_BOX = (0.1, 0.2, 0.8, 0.9)
K2_BOX = (0.8, 0.9, 0.1, 0.2)

MIN_FIELD_NF = 20


class ExperimentConfig:
    """Validated configuration of one experiment run."""

    def __init__(
        self,
        nc=10,
        r=10,
        field="channel",
        contrast=1e4,
        strategies=STRATEGIES,
        theta=0.5,
        marking="full_sort",
        s=1,
        m_enrich=2,
        max_iterations=15,
        dof_cap=2000,
        goal_tol=0.0,
        dual_norm_mode="exact",
        seed=0,
        out_dir="out",
        k1_box=K1_BOX,
        k2_box=K2_BOX,
        goal_box=None,
        goal_scale="integral",
        dump_indicator_csv=False,
        dump_spectra_csv=False,
        initial_count=1,
    ):
        self.nc = int(nc)
        self.r = int(r)
        self.field = field
        self.contrast = float(contrast)
        if self.contrast < 1.0:
            raise ValueError(f"contrast must be >= 1, got {self.contrast}")
        strategies = list(strategies)
        for name in strategies:
            if name not in STRATEGIES:
                raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
        self.strategies = strategies
        self.marking = MarkingConfig(
            theta=float(theta),
            strategy=marking,
            s=int(s),
            max_iterations=int(max_iterations),
            dof_cap=int(dof_cap),
            goal_tol=float(goal_tol),
            m_enrich=int(m_enrich),
            dual_norm_mode=dual_norm_mode,
        )
        self.seed = int(seed)
        self.out_dir = out_dir
        self.k1_box = _check_box(k1_box, "K1")
        self.k2_box = _check_box(k2_box, "K2")
        self.goal_box = _check_box(goal_box, "goal") if goal_box else self.k2_box
        if goal_scale not in ("integral", "mean"):
            raise ValueError(f"goal_scale must be 'integral' or 'mean', got {goal_scale!r}")
        self.goal_scale = goal_scale
        self.dump_indicator_csv = bool(dump_indicator_csv)
        self.dump_spectra_csv = bool(dump_spectra_csv)
        self.initial_count = int(initial_count)
        if self.initial_count < 1:
            raise ValueError(f"initial basis count must be >= 1, got {self.initial_count}")


def _check_box(box, name):
    x0, x1, y0, y1 = (float(v) for v in box)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ValueError(f"{name} box {box} must be a nonempty rectangle inside (0,1)^2")
    return (x0, x1, y0, y1)


def box_fraction(grid, box):
    """Per-cell overlap fraction of an axis-aligned box, exact for any nf.

    The total of fraction * cell area equals the box area exactly, so loads
    built from it integrate box indicators without alignment error.
    """
    x0, x1, y0, y1 = box
    h = grid.h
    edges = np.arange(grid.nf + 1) * h
    ox = np.clip((np.minimum(x1, edges[1:]) - np.maximum(x0, edges[:-1])) / h, 0.0, 1.0)
    oy = np.clip((np.minimum(y1, edges[1:]) - np.maximum(y0, edges[:-1])) / h, 0.0, 1.0)
    return np.outer(oy, ox)


def _scatter_inclusions(mask, rng):
    """Stamp small high-value rectangles; identical draws for both field kinds."""
    nf = mask.shape[0]
    count = 14
    for _ in range(count):
        w = int(rng.integers(2, max(3, nf // 12) + 1))
        ht = int(rng.integers(2, max(3, nf // 12) + 1))
        x0 = int(rng.integers(0, nf - w))
        y0 = int(rng.integers(0, nf - ht))
        mask[y0 : y0 + ht, x0 : x0 + w] = True


def _diagonal_band(mask, rng):
    """A 4-connected meandering band from the x=0 side to the x=1 side."""
    nf = mask.shape[0]
    width = max(2, nf // 33)
    amplitude = nf / 8.0
    phase = rng.uniform(0.0, 2.0 * np.pi)
    x = np.arange(nf + 1, dtype=float)
    center = x + amplitude * np.sin(2.0 * np.pi * 2.0 * x / nf + phase)
    center = np.clip(center, 1.0, nf - 2.0)
    for cx in range(nf):
        lo = int(np.floor(min(center[cx], center[cx + 1]))) - width // 2
        hi = int(np.ceil(max(center[cx], center[cx + 1]))) + width // 2
        mask[max(lo, 0) : min(hi, nf - 1) + 1, cx] = True


def generate_field(kind, contrast, nf, seed):
    """Seeded synthetic coefficient field: background 1, features at `contrast`."""
    if nf < MIN_FIELD_NF:
        raise ValueError(f"nf={nf} too small to host the generated geometry (need >= {MIN_FIELD_NF})")
    if kind not in ("channel", "inclusions"):
        raise ValueError(f"unknown field kind {kind!r}")
    if contrast < 1.0:
        raise ValueError(f"contrast must be >= 1, got {contrast}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((nf, nf), dtype=bool)
    _scatter_inclusions(mask, rng)
    if kind == "channel":
        _diagonal_band(mask, rng)
    values = np.ones((nf, nf))
    values[mask] = float(contrast)
    return CoefficientField(values)


def write_field(field, path):
    """Write a field as text: first line nf, then nf rows from y=0 upward."""
    with open(path, "w") as fh:
        fh.write(f"{field.nf}\n")
        for row in field.values:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_field(path):
    """Read a field file, rejecting malformed or non-positive entries."""
    with open(path) as fh:
        first = fh.readline().strip()
        try:
            nf = int(first)
        except ValueError:
            raise ValueError(f"{path}: first line must be the cell count, got {first!r}")
        values = np.empty((nf, nf))
        for iy in range(nf):
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: expected {nf} data rows, file ended at row {iy}")
            parts = line.split()
            if len(parts) != nf:
                raise ValueError(f"{path}: row {iy} has {len(parts)} values, expected {nf}")
            row = np.array([float(v) for v in parts])
            bad = np.flatnonzero(row <= 0.0)
            if bad.size:
                raise ValueError(
                    f"{path}: non-positive value {row[bad[0]]} at row {iy}, column {bad[0]}"
                )
            values[iy] = row
    return CoefficientField(values)


def _load_field(config, grid):
    if config.field.startswith("file:"):
        field = read_field(config.field[len("file:") :])
        if field.nf != grid.nf:
            raise ValueError(
                f"field file has nf={field.nf} but the grid needs nf={grid.nf}"
            )
        return field
    return generate_field(config.field, config.contrast, grid.nf, config.seed)


def _goal_density(config, grid):
    density = box_fraction(grid, config.goal_box)
    if config.goal_scale == "mean":
        x0, x1, y0, y1 = config.goal_box
        density = density / ((x1 - x0) * (y1 - y0))
    return density


def run_experiment(config, verbose=True):
    """Run all requested strategies against one shared fine reference.

    Writes one trace CSV per strategy plus a combined comparison CSV into
    ``config.out_dir`` and prints a dofs-per-goal-error-decade summary.
    Returns the traces keyed by strategy.
    """
    grid = build_grids(config.nc, config.r)
    field = _load_field(config, grid)
    f_density = box_fraction(grid, config.k1_box) - box_fraction(grid, config.k2_box)
    problem = build_problem(
        grid, field, f_density, _goal_density(config, grid), initial_count=config.initial_count
    )

    os.makedirs(config.out_dir, exist_ok=True)
    if config.dump_spectra_csv:
        dump_spectra(problem.space.spectra, os.path.join(config.out_dir, "spectra.csv"))

    extra = {
        "theta": config.marking.theta,
        "s": config.marking.s,
        "m_enrich": config.marking.m_enrich,
        "contrast": config.contrast,
    }
    traces = {}
    for strategy in config.strategies:
        reports = [] if config.dump_indicator_csv else None
        trace = adapt_loop(problem, strategy, config.marking, collect_reports=reports)
        traces[strategy] = trace
        write_trace_csv(trace, os.path.join(config.out_dir, f"trace_{strategy}.csv"))
        if reports is not None:
            dump_indicators(
                reports, os.path.join(config.out_dir, f"indicators_{strategy}.csv")
            )
        if verbose:
            last = trace.rows[-1]
            print(
                f"{strategy}: {len(trace.rows)} iterations, {last.dofs} dofs, "
                f"goal error {last.goal_error:.3e}, energy error {last.energy_error:.3e} "
                f"({trace.stop_reason})"
            )

    _write_comparison(traces, config, extra)
    if verbose:
        _print_summary(traces)
    return traces


def _write_comparison(traces, config, extra):
    path = os.path.join(config.out_dir, "comparison.csv")
    header = (
        "strategy,iteration,dofs,energy_error,goal_error,sum_eta_sq,marked_count,"
        + ",".join(extra)
    )
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for strategy in config.strategies:
            trace = traces[strategy]
            for row in trace.rows:
                fh.write(
                    f"{strategy},{row.iteration},{row.dofs},{row.energy_error!r},"
                    f"{row.goal_error!r},{row.sum_eta_sq!r},{row.marked_count},"
                    + ",".join(str(v) for v in extra.values())
                    + "\n"
                )


def _print_summary(traces):
    """Dofs needed to reach each goal-error decade below the initial error."""
    print("\ndofs to reach goal error <= initial / 10^d")
    print(f"{'strategy':>12} " + " ".join(f"{'d=' + str(d):>8}" for d in range(1, 5)))
    for strategy, trace in traces.items():
        g0 = trace.rows[0].goal_error
        cells = []
        for d in range(1, 5):
            threshold = g0 * 10.0 ** (-d)
            hit = next((row.dofs for row in trace.rows if row.goal_error <= threshold), None)
            cells.append(f"{hit:>8}" if hit is not None else f"{'-':>8}")
        print(f"{strategy:>12} " + " ".join(cells))


def _parse_box(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("box must be x0,x1,y0,y1")
    return tuple(parts)


def _read_config_file(path):
    """Plain key = value lines; '#' starts a comment."""
    options = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            options[key.replace("-", "_")] = value
    return options


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gmsfem",
        description="Adaptive multiscale strategy comparison on high-contrast elliptic problems",
    )
    parser.add_argument("--config", help="key = value configuration file; flags override it")
    parser.add_argument("--nc", type=int, default=10, help="coarse cells per side")
    parser.add_argument("--r", type=int, default=10, help="fine cells per coarse cell per side")
    parser.add_argument(
        "--field",
        default="channel",
        help="coefficient field: channel, inclusions, or file:PATH",
    )
    parser.add_argument("--contrast", type=float, default=1e4)
    parser.add_argument("--theta", type=float, default=0.5, help="bulk marking fraction")
    parser.add_argument(
        "--strategy",
        action="append",
        dest="strategies",
        choices=STRATEGIES,
        help="strategy to run (repeatable; default: all three)",
    )
    parser.add_argument("--marking", choices=("full_sort", "binning"), default="full_sort")
    parser.add_argument("--s", type=int, default=1, help="basis functions added per marked neighborhood")
    parser.add_argument("--m-enrich", type=int, default=2, help="extra dual basis width for goal_dwr")
    parser.add_argument("--max-iters", type=int, default=15)
    parser.add_argument("--dof-cap", type=int, default=2000)
    parser.add_argument("--goal-tol", type=float, default=0.0)
    parser.add_argument("--dual-norm", choices=("exact", "snapshot"), default="exact")
    parser.add_argument("--initial-count", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory for CSV traces")
    parser.add_argument("--k1-box", type=_parse_box, default=K1_BOX)
    parser.add_argument("--k2-box", type=_parse_box, default=K2_BOX)
    parser.add_argument("--goal-box", type=_parse_box, default=None)
    parser.add_argument(
        "--goal-scale",
        choices=("integral", "mean"),
        default="integral",
        help="goal functional: plain integral over the goal box, or its mean value",
    )
    parser.add_argument("--dump-indicators", action="store_true")
    parser.add_argument("--dump-spectra", action="store_true")
    parser.add_argument("--quiet", action="store_true")
    return parser


def config_from_args(args):
    return ExperimentConfig(
        nc=args.nc,
        r=args.r,
        field=args.field,
        contrast=args.contrast,
        strategies=args.strategies or list(STRATEGIES),
        theta=args.theta,
        marking=args.marking,
        s=args.s,
        m_enrich=args.m_enrich,
        max_iterations=args.max_iters,
        dof_cap=args.dof_cap,
        goal_tol=args.goal_tol,
        dual_norm_mode=args.dual_norm,
        seed=args.seed,
        out_dir=args.out,
        k1_box=args.k1_box,
        k2_box=args.k2_box,
        goal_box=args.goal_box,
        goal_scale=args.goal_scale,
        dump_indicator_csv=args.dump_indicators,
        dump_spectra_csv=args.dump_spectra,
        initial_count=args.initial_count,
    )


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        file_options = _read_config_file(args.config)
        actions = {action.dest: action for action in parser._actions}
        unknown = set(file_options) - set(actions)
        if unknown:
            parser.error(f"unknown config file keys: {sorted(unknown)}")
        defaults = {}
        for key, value in file_options.items():
            action = actions[key]
            if key == "strategies":
                defaults[key] = [v.strip() for v in value.split(",")]
            elif isinstance(action.const, bool):
                defaults[key] = value.strip().lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[key] = action.type(value)
            else:
                defaults[key] = value
        parser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        run_experiment(config, verbose=not args.quiet)
    except (ValueError, OSError, AdaptFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
