"""Batch command-line interface.

Angles cross this boundary in degrees and are converted to radians here.
Every command writes ``config.json`` (the fully resolved settings, which can
be fed back with ``--config``) and ``metadata.json`` (timestamps and wall
time, kept apart so the other outputs are reproducible byte for byte).

Exit codes: 0 success, 2 non-convergence or integrator abort, 3 input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .chain import (BandConfig, band_path_energy, build_chain_model, build_replica_band,
                    parse_sequence, relax_band, write_band_report_csv, write_band_snapshot)
from .errors import (ConfigurationError, ConstraintViolationError, ConvergenceError, DegeneratePathError,
                     DomainError, InputError, NonFiniteError, SingularSystemError)
from .landscape import (ChainLandscape, PropensityLibrary, build_library, read_pair_samples,
                        read_single_samples, torus_integral)
from .mep import (NEBConfig, evaluate, init_path_convex, relax, write_final_metrics_csv, write_path_csv,
                  write_report_csv)
from .multibody import (AugmentedLagrangian, Baumgarte, DIAOptions, load_system, run_dynamics, sample_row,
                        write_trajectory_csv)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_INPUT = 3

_INPUT_ERRORS = (InputError, ConfigurationError, DomainError, DegeneratePathError, FileNotFoundError,
                 IsADirectoryError, ValueError, KeyError)
_RUN_ERRORS = (ConvergenceError, ConstraintViolationError, NonFiniteError, SingularSystemError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# validation helpers


def _positive(name, value):
    if not value > 0:
        raise DomainError(f"--{name} must be positive, got {value}")


def _check_common(args):
    for name in ("dt", "tol", "kt", "kappa", "k", "time"):
        v = getattr(args, name.replace("-", "_"), None)
        if v is not None:
            _positive(name, v)
    if getattr(args, "max_iters", None) is not None and args.max_iters < 0:
        raise DomainError("--max-iters must be >= 0")
    if getattr(args, "bins", None) is not None and (args.bins < 8):
        raise DomainError(f"--bins must be >= 8, got {args.bins}")
    if getattr(args, "replicas", None) is not None and args.replicas < 3:
        raise DomainError(f"--replicas must be >= 3, got {args.replicas}")


def read_endpoints(path, dim: int):
    """CSV ``endpoint,angle_1_deg,...``: rows A then B; returned in radians."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "endpoint":
            raise InputError(f"{path}: expected header starting with 'endpoint'", line=1)
        if len(header) - 1 != dim:
            raise InputError(f"{path}: {len(header) - 1} angles per endpoint, sequence needs {dim}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != dim + 1:
                raise InputError(f"{path}: expected {dim + 1} fields, got {len(row)}", line=lineno)
            try:
                rows.append((row[0].strip(), np.radians([float(c) for c in row[1:]])))
            except ValueError:
                raise InputError(f"{path}: non-numeric angle", line=lineno) from None
    if len(rows) != 2:
        raise InputError(f"{path}: need exactly two endpoint rows (A, B), got {len(rows)}")
    return rows[0][1], rows[1][1]


def _config_dict(args) -> dict:
    skip = {"func", "config"}
    out = {k: v for k, v in vars(args).items() if k not in skip}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(out.items())}


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(_config_dict(args), indent=2, sort_keys=True) + "\n")
    return out


def _write_metadata(out: Path, started: float, extra: dict | None = None):
    meta = {"started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "wall_time_s": time.time() - started, "version": __version__}
    meta.update(extra or {})
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _chain_landscape(args):
    library = PropensityLibrary.load(args.library)
    sequence = parse_sequence(args.sequence)
    return sequence, ChainLandscape(library, sequence)


# ---------------------------------------------------------------------------
# commands


def cmd_library_build(args) -> int:
    _check_common(args)
    singles = read_single_samples(args.samples)
    pairs = read_pair_samples(args.pairs) if args.pairs else {}
    for a, b, _ in pairs:
        for kind in (a, b):
            if kind not in singles:
                raise ConfigurationError(f"residue class {kind!r} has pair samples but no single samples")
    out = _prepare_out(args)
    started = time.time()
    library = build_library(singles, pairs, bins=args.bins, kappa=args.kappa, kT=args.kt)
    path = library.save(out / "library.npz")
    checks = {}
    for kind, view in library.single_views.items():
        checks[f"single {kind}"] = torus_integral(view.density.values)
    for (a, b, ax), view in library.pair_views.items():
        checks[f"pair {a} {b} {ax}"] = torus_integral(view.density.values)
    for name, value in checks.items():
        print(f"{name}: density integral {value:.6f}")
    _write_json(out / "normalization.json", checks)
    _write_metadata(out, started, {"library": str(path)})
    return EXIT_OK


def cmd_mep_run(args) -> int:
    _check_common(args)
    sequence, landscape = _chain_landscape(args)
    A, B = read_endpoints(args.endpoints_file, landscape.dim)
    path0 = init_path_convex(A, B, args.replicas)
    cfg = NEBConfig(k=args.k, step_size=args.dt, tol=args.tol, max_iters=args.max_iters)
    out = _prepare_out(args)
    started = time.time()
    path, report = relax(path0, landscape, cfg, args.method)
    E, _ = evaluate(path, landscape)
    write_path_csv(path, E, out / "path.csv")
    write_report_csv(report, out / "report.csv")
    write_final_metrics_csv(report.final, out / "final_metrics.csv")
    _write_json(out / "summary.json", {"converged": report.converged, "criterion": report.criterion,
                                       "iterations": report.iterations, "step_size": report.step_size,
                                       "method": args.method, "sequence": sequence})
    _write_metadata(out, started)
    if not report.converged:
        print(f"not converged after {report.iterations} iterations (criterion {report.criterion:.3g})",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _dia_options(args) -> DIAOptions:
    if args.stabilizer == "auglag":
        al = AugmentedLagrangian(alpha=args.alpha if args.alpha is not None else 1e7,
                                 beta=args.beta if args.beta is not None else 1.0,
                                 omega=args.omega, epsilon=args.epsilon)
        return DIAOptions(stabilizer="auglag", solver=args.solver, auglag=al)
    bg = Baumgarte(alpha=args.alpha if args.alpha is not None else 5.0,
                   beta=args.beta if args.beta is not None else 5.0)
    return DIAOptions(stabilizer=args.stabilizer, solver=args.solver, baumgarte=bg)


def cmd_dynamics_run(args) -> int:
    _check_common(args)
    system = load_system(args.system_file)
    if system.langevin is not None:
        system.langevin.seed = args.seed
        system.rng = np.random.default_rng(args.seed)
    options = _dia_options(args)
    out = _prepare_out(args)
    started = time.time()
    status = EXIT_OK
    try:
        rows, summary = run_dynamics(system, args.time, args.dt, options)
    except _RUN_ERRORS as exc:
        status = EXIT_NOT_CONVERGED
        rows = getattr(exc, "rows", None) or [sample_row(system)]
        summary = {"aborted": True, "error": str(exc), "t": system.t}
        print(f"integration aborted: {exc}", file=sys.stderr)
    write_trajectory_csv(rows, system, out / "trajectory.csv")
    summary.update({"stabilizer": args.stabilizer, "solver": args.solver,
                    "max_phi_inf": max(r.phi_inf for r in rows), "steps_written": len(rows) - 1})
    _write_json(out / "summary.json", summary)
    _write_metadata(out, started)
    return status


def cmd_band_relax(args) -> int:
    _check_common(args)
    sequence, landscape = _chain_landscape(args)
    A, B = read_endpoints(args.endpoints_file, landscape.dim)
    path0 = init_path_convex(A, B, args.replicas)
    model = build_chain_model(sequence, args.joint)
    band = build_replica_band(model, list(path0.nodes), args.k)
    cfg = BandConfig(dt=args.dt, tol=args.tol, max_iters=args.max_iters, options=_dia_options(args))
    out = _prepare_out(args)
    started = time.time()
    write_band_snapshot(band, out / "band_initial.csv")
    status = EXIT_OK
    try:
        report = relax_band(band, landscape, cfg)
    except _RUN_ERRORS as exc:
        print(f"band relaxation aborted: {exc}", file=sys.stderr)
        write_band_snapshot(band, out / "band_final.csv")
        _write_metadata(out, started)
        return EXIT_NOT_CONVERGED
    write_band_snapshot(band, out / "band_final.csv")
    write_report_csv(report, out / "report.csv")
    write_band_report_csv(report, out / "band_trace.csv")
    _write_json(out / "summary.json", {"converged": report.converged, "criterion": report.criterion,
                                       "iterations": report.iterations, "joint": args.joint,
                                       "final_path_energy": band_path_energy(band, landscape),
                                       "band_springs": band.n_band_springs})
    _write_metadata(out, started)
    if not report.converged:
        status = EXIT_NOT_CONVERGED
    return status


# ---------------------------------------------------------------------------
# parser


def _add_common(p, *, solver=False):
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    p.add_argument("--config", type=Path, help="echoed config.json to take settings from")
    if solver:
        p.add_argument("--stabilizer", choices=("none", "baumgarte", "auglag"), default="baumgarte")
        p.add_argument("--solver", choices=("lu", "pinv"), default="lu")
        p.add_argument("--alpha", type=float, default=None,
                       help="Baumgarte velocity gain (default 5) or penalty factor for auglag (default 1e7)")
        p.add_argument("--beta", type=float, default=None,
                       help="Baumgarte position gain (default 5) or auglag damping ratio (default 1)")
        p.add_argument("--omega", type=float, default=10.0, help="auglag natural frequency")
        p.add_argument("--epsilon", type=float, default=1e-9, help="auglag inner stopping threshold")


def _add_path(p):
    p.add_argument("--library", type=Path, required=True)
    p.add_argument("--sequence", required=True, help="three-letter codes joined by dashes, e.g. GLY-TYR")
    p.add_argument("--endpoints-file", type=Path, required=True,
                   help="CSV 'endpoint,angle_1_deg,...' with rows A and B (degrees)")
    p.add_argument("--k", type=float, default=1.0, help="band spring stiffness")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="torsionmep", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("library-build", help="bake a propensity library from angle samples")
    p.add_argument("--samples", type=Path, required=True, help="CSV kind,phi_deg,psi_deg")
    p.add_argument("--pairs", type=Path, help="CSV kind_a,kind_b,axis,angle1_deg,angle2_deg")
    p.add_argument("--bins", type=int, default=180)
    p.add_argument("--kappa", type=float, default=50.0)
    p.add_argument("--kt", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_library_build)

    p = sub.add_parser("mep-run", help="string method or NEB on a chain landscape")
    _add_path(p)
    p.add_argument("--method", choices=("string", "neb"), default="string")
    p.add_argument("--replicas", type=int, default=20, help="number of path nodes")
    p.add_argument("--dt", type=float, default=None, help="step size (default: scaled from the gradient)")
    p.add_argument("--tol", type=float, default=3e-4)
    p.add_argument("--max-iters", type=int, default=100_000)
    _add_common(p)
    p.set_defaults(func=cmd_mep_run)

    p = sub.add_parser("dynamics-run", help="integrate a multibody system description")
    p.add_argument("system_file", type=Path)
    p.add_argument("--time", type=float, default=1.0, help="final time T")
    p.add_argument("--dt", type=float, default=1e-3)
    _add_common(p, solver=True)
    p.set_defaults(func=cmd_dynamics_run)

    p = sub.add_parser("band-relax", help="relax a replica band of chain models")
    _add_path(p)
    p.add_argument("--replicas", type=int, default=5)
    p.add_argument("--joint", choices=("revolute", "cylindrical"), default="revolute")
    p.add_argument("--dt", type=float, default=0.15, help="pseudo-time of each rest-start dynamics step")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iters", type=int, default=20_000)
    _add_common(p, solver=True)
    p.set_defaults(func=cmd_band_relax)
    return parser


def _parse(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is not None:
        try:
            data = json.loads(Path(known.config).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{known.config}: invalid JSON ({exc.msg})", line=exc.lineno) from None
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        command = data.get("command")
        if command not in subparsers.choices:
            raise ConfigurationError(f"{known.config}: unknown command {command!r}")
        if command not in argv:
            argv = [command] + argv
        sub = subparsers.choices[command]
        dests = {a.dest for a in sub._actions}
        # values from the file become defaults; explicit flags still win
        sub.set_defaults(**{k: v for k, v in data.items() if k in dests and k != "config"})
        for action in sub._actions:
            if action.dest in data:
                action.required = False
                if not action.option_strings:
                    action.nargs = "?"
    args = parser.parse_args(argv)
    if getattr(args, "system_file", "") is None:
        parser.error("the following arguments are required: system_file")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _RUN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
