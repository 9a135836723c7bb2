"""Command-line front end.

Every subcommand that takes ``--out`` writes a ``manifest.json`` next to
its outputs; ``refloat replay DIR/manifest.json`` reruns it.

Exit status: 0 success (or a converged solve), 1 input or I/O error,
2 usage error, 3 solve hit the iteration cap, 4 solver breakdown.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

from .cost_model import HardwareConfig, schedule_blocks, schedule_escma, schedule_spmv
from .format import ReFloatConfig, convert_matrix
from .matrix_io import RHS_MODES, MatrixMarketError, generate_rhs, read_matrix_market
from .solvers import BACKENDS, METHODS, SolverSettings, Status, solve, truncation_study
from .streaming import ContainerError, deserialize, serialize

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MAX_ITER = 3
EXIT_BREAKDOWN = 4

_STATUS_EXIT = {Status.CONVERGED: EXIT_OK, Status.MAX_ITER: EXIT_MAX_ITER, Status.BREAKDOWN: EXIT_BREAKDOWN}

MANIFEST_NAME = "manifest.json"
CONTAINER_NAME = "matrix.rfc"


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _format_args(p: argparse.ArgumentParser):
    d = ReFloatConfig()
    p.add_argument("--block-bits", type=int, default=d.b, help="b: blocks are 2^b x 2^b")
    p.add_argument("--mat-exp", type=int, default=d.e, help="matrix exponent offset bits")
    p.add_argument("--mat-frac", type=int, default=d.f, help="matrix fraction bits")
    p.add_argument("--vec-exp", type=int, default=d.e_v, help="vector exponent offset bits")
    p.add_argument("--vec-frac", type=int, default=d.f_v, help="vector fraction bits")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refloat", description="ReFloat format emulator and cost model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a Matrix Market file to a ReFloat container")
    p.add_argument("--matrix", required=True)
    _format_args(p)
    p.add_argument("--out")

    p = sub.add_parser("solve", help="run CG or BiCGSTAB")
    p.add_argument("--matrix", required=True)
    _format_args(p)
    p.add_argument("--method", choices=METHODS, default="cg")
    p.add_argument("--backend", choices=BACKENDS, default="exact")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.add_argument("--rhs", choices=RHS_MODES, default="ones-solution")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("cost", help="report crossbars, cycles, rounds and latency")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--matrix", help="Matrix Market file or ReFloat container")
    src.add_argument("--blocks", type=int, help="number of non-empty blocks, instead of a matrix")
    _format_args(p)
    p.add_argument("--compare-escma", action="store_true", help="add a (6,52)(6,52) column")
    p.add_argument("--out")

    p = sub.add_parser("study", help="CG iterations under global exponent/fraction truncation")
    p.add_argument("--matrix", required=True)
    p.add_argument("--exp-bits", type=_int_list, default=[11], help="comma list, e.g. 11,10,9")
    p.add_argument("--frac-bits", type=_int_list, default=[52], help="comma list, e.g. 52,40,30")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.add_argument("--rhs", choices=RHS_MODES, default="ones-solution")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    return parser


def _config(args) -> ReFloatConfig:
    return ReFloatConfig(args.block_bits, args.mat_exp, args.mat_frac, args.vec_exp, args.vec_frac)


def _write_csv(path: str, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_manifest(args, outputs: dict, extra: dict | None = None):
    if not args.out:
        return
    data = {
        "command": args.command,
        "argv": _argv_of(args),
        "input": getattr(args, "matrix", None),
        "outputs": outputs,
    }
    if hasattr(args, "block_bits"):
        data["refloat"] = asdict(_config(args))
    data["hardware"] = asdict(HardwareConfig())
    if extra:
        data.update(extra)
    with open(os.path.join(args.out, MANIFEST_NAME), "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _argv_of(args) -> list[str]:
    """Flags that reproduce ``args`` (``--out`` excluded)."""
    argv = [args.command]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "out", "func") or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if key == "matrix":
            value = os.path.abspath(value)
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            argv += [flag, ",".join(str(v) for v in value)]
        else:
            argv += [flag, repr(value) if isinstance(value, float) else str(value)]
    return argv


def _prepare_out(args):
    if args.out:
        os.makedirs(args.out, exist_ok=True)


def cmd_convert(args) -> int:
    _prepare_out(args)
    matrix = read_matrix_market(args.matrix)
    blocked = convert_matrix(matrix, _config(args))
    ratio = blocked.memory_ratio()
    lines = [
        f"nnz            {blocked.nnz}",
        f"blocks         {blocked.n_blocks}",
        f"refloat_bits   {blocked.footprint_bits()}",
        f"coo_bits       {blocked.coo_bits()}",
        f"ratio          {'n/a' if ratio is None else f'{ratio:.4f}'}",
        f"saturations    {blocked.matrix_saturations}",
    ]
    print("\n".join(lines))
    outputs = {}
    if args.out:
        path = os.path.join(args.out, CONTAINER_NAME)
        serialize(blocked, path)
        _write_csv(
            os.path.join(args.out, "footprint.csv"),
            ["nnz", "blocks", "refloat_bits", "coo_bits", "ratio"],
            [[blocked.nnz, blocked.n_blocks, blocked.footprint_bits(), blocked.coo_bits(),
              "n/a" if ratio is None else ratio]],
        )
        outputs = {"container": CONTAINER_NAME, "footprint": "footprint.csv"}
    _write_manifest(args, outputs)
    return EXIT_OK


def cmd_solve(args) -> int:
    _prepare_out(args)
    matrix = read_matrix_market(args.matrix)
    settings = SolverSettings(
        method=args.method,
        tolerance=args.tol,
        max_iterations=args.max_iter,
        backend=args.backend,
        refloat=_config(args),
        threads=args.threads,
    )
    b = generate_rhs(matrix, args.rhs, args.seed)
    result = solve(matrix, b, settings)
    tr = result.trace
    print(
        f"status={tr.status.value} iterations={result.iterations_used} "
        f"spmv_calls={result.spmv_calls} final_residual={tr.records[-1][1]!r} "
        f"true_residual={tr.final_true_residual!r} saturations={result.saturations}"
    )
    outputs = {}
    if args.out:
        _write_csv(os.path.join(args.out, "trace.csv"), ["iteration", "residual_norm"], tr.records)
        _write_csv(
            os.path.join(args.out, "summary.csv"),
            ["status", "iterations", "spmv_calls", "final_true_residual", "saturations"],
            [[tr.status.value, result.iterations_used, result.spmv_calls,
              tr.final_true_residual, result.saturations]],
        )
        outputs = {"trace": "trace.csv", "summary": "summary.csv"}
    extra = {"solver": {k: v for k, v in asdict(settings).items() if k != "refloat"},
             "rhs": args.rhs, "seed": args.seed}
    _write_manifest(args, outputs, extra)
    return _STATUS_EXIT[tr.status]


def _load_blocked(path: str, config: ReFloatConfig):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"RFLT":
        return deserialize(path)
    return convert_matrix(read_matrix_market(path), config)


def cmd_cost(args) -> int:
    _prepare_out(args)
    cfg = _config(args)
    fmt = (cfg.e, cfg.f, cfg.e_v, cfg.f_v)
    if args.matrix:
        blocked = _load_blocked(args.matrix, cfg)
        fmt = (blocked.config.e, blocked.config.f, blocked.config.e_v, blocked.config.f_v)
        report = schedule_spmv(blocked)
        blocks = blocked.n_blocks
    else:
        blocks = args.blocks if args.blocks is not None else 1
        report = schedule_blocks(blocks, *fmt)
    other = schedule_escma(blocks) if args.compare_escma else None
    print(report.format_table(other))
    outputs = {}
    if args.out:
        header = ["quantity", "refloat"] + (["escma"] if other else [])
        other_rows = dict(other.to_rows()) if other else {}
        rows = [
            [k, "n/a" if v is None else v] + (["n/a" if other_rows[k] is None else other_rows[k]] if other else [])
            for k, v in report.to_rows()
        ]
        _write_csv(os.path.join(args.out, "cost.csv"), header, rows)
        outputs = {"cost": "cost.csv"}
    _write_manifest(args, outputs)
    return EXIT_OK


def cmd_study(args) -> int:
    _prepare_out(args)
    matrix = read_matrix_market(args.matrix)
    b = generate_rhs(matrix, args.rhs, args.seed)
    rows = []
    for e_bits in args.exp_bits:
        for f_bits in args.frac_bits:
            pt = truncation_study(matrix, b, e_bits, f_bits, args.tol, args.max_iter)
            rows.append([pt.exponent_bits, pt.fraction_bits, pt.label])
            print(f"exp={pt.exponent_bits:2d} frac={pt.fraction_bits:2d} iterations={pt.label}", flush=True)
    outputs = {}
    if args.out:
        _write_csv(os.path.join(args.out, "study.csv"), ["exponent_bits", "fraction_bits", "iterations"], rows)
        outputs = {"study": "study.csv"}
    _write_manifest(args, outputs, {"rhs": args.rhs, "seed": args.seed})
    return EXIT_OK


def cmd_replay(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    out = args.out or os.path.dirname(os.path.abspath(args.manifest))
    return main(list(manifest["argv"]) + ["--out", out])


_COMMANDS = {
    "convert": cmd_convert,
    "solve": cmd_solve,
    "cost": cmd_cost,
    "study": cmd_study,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MatrixMarketError, ContainerError, OSError, ValueError, KeyError) as exc:
        print(f"refloat: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
