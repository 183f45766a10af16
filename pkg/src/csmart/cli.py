"""Command-line entry point: ``csmart analyze | simulate | validate``.

Exit codes: 0 success, 1 usage error, 2 data or validation failure,
3 numerical failure (or a flagged simulation design point).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import oracles
from . import sandwich as sw
from .data import DataFormatError, load_csv, validate_design
from .gee import ConvergenceError, DesignError, FitConfig, RankDeficiencyError, fit
from .harness import emit_table, run_experiment
from .inference import report
from .simgen import FeasibilityError, SimulationDesign, spec_from_design
from .weights import DegenerateWeightsError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_model_flags(p: argparse.ArgumentParser, defaults: bool = True) -> None:
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--fsa", action="append", choices=[*sw.PRESETS, "custom"],
                   help="FSA preset; repeat for several blocks (default: minimal)")
    p.add_argument("--fsa-dof", action="store_true", help="custom: scale by n/(n-p-q) (FSA3)")
    p.add_argument("--fsa-bias", action="store_true", help="custom: leverage bias correction (FSA4)")
    p.add_argument("--fsa-t", action="store_true", help="custom: t reference with n-p-q df (FSA2)")
    p.add_argument("--weights", choices=["known", "estimated"], default=d("known"))
    p.add_argument("--cov", choices=["independence", "exchangeable"], default=d("exchangeable"))
    p.add_argument("--var", choices=["homogeneous", "per-regimen"], default=d("per-regimen"))
    p.add_argument("--icc", choices=["shared", "per-regimen"], default=d("per-regimen"))
    p.add_argument("--level", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csmart", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="fit a trial CSV and report coefficients and effects")
    a.add_argument("data", type=Path)
    a.add_argument("-o", "--output", type=Path, help="output prefix for .csv and .txt reports")
    _add_model_flags(a)

    s = sub.add_parser("simulate", help="run a Monte Carlo design")
    s.add_argument("design", type=Path, help="design JSON, or a bundled name (table2, table3)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--replications", type=int)
    s.add_argument("-o", "--output", type=Path, help="CSV path (default: stdout)")
    s.add_argument("--text", type=Path, help="also write an aligned-text table")
    _add_model_flags(s, defaults=False)

    v = sub.add_parser("validate", help="run the oracle suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--instances", type=int, default=5)
    return parser


def _fsa_variants(args) -> list[tuple[str, sw.FsaConfig]]:
    names = args.fsa or ["minimal"]
    out = []
    for name in names:
        if name == "custom":
            fsa = sw.FsaConfig(args.fsa_dof, args.fsa_bias, "t" if args.fsa_t else "normal")
            out.append((sw.variant_name(fsa), fsa))
        else:
            out.append((name, sw.PRESETS[name]))
    if (args.fsa_dof or args.fsa_bias or args.fsa_t) and "custom" not in names:
        raise _UsageError("--fsa-dof/--fsa-bias/--fsa-t require --fsa custom")
    return out


class _UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _analyze(args) -> int:
    try:
        ds = load_csv(args.data)
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rep = validate_design(ds)
    if not rep.ok:
        print(str(rep), file=sys.stderr)
        return EXIT_INVALID
    variants = _fsa_variants(args)
    config = FitConfig(args.cov, args.var.replace("-", "_"), args.icc.replace("-", "_"), args.weights)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            f = fit(ds, config)
            blocks = [(name, report(f, sw.sandwich(f, fsa), fsa=fsa, level=args.level)) for name, fsa in variants]
    except (RankDeficiencyError, ConvergenceError, DegenerateWeightsError, sw.SingularLeverageError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DesignError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["preset", "fsa", "kind", "term", "estimate", "se", "ci_low", "ci_high", "p_value"])
    text = [f"n = {ds.n} clusters, N = {ds.N} members; weights {args.weights}; "
            f"{args.cov} working covariance ({f.iterations} iterations)"]
    for name, rpt in blocks:
        for kind, rows in (("coefficient", rpt.parameters), ("effect", rpt.contrasts)):
            for r in rows:
                wr.writerow([name, rpt.fsa.label, kind, r.label,
                             *(_fmt(v) for v in (r.estimate, r.se, r.low, r.high, r.p_value))])
        text += ["", f"[{name}]", rpt.format()]
    text_out = "\n".join(text) + "\n"
    if args.output:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{args.output}.csv").write_text(buf.getvalue(), encoding="utf-8")
        Path(f"{args.output}.txt").write_text(text_out, encoding="utf-8")
    sys.stdout.write(text_out)
    return EXIT_OK


def _read_design(path: Path) -> str:
    if not path.exists():
        bundled = files("csmart") / "designs" / f"{path.stem}.json"
        if path.parent == Path(".") and bundled.is_file():
            return bundled.read_text(encoding="utf-8")
    return path.read_text(encoding="utf-8")


def _simulate(args) -> int:
    try:
        design = SimulationDesign.from_json(_read_design(args.design))
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: cannot read design: {exc}", file=sys.stderr)
        return EXIT_INVALID
    changes = {"base_seed": args.seed}
    if args.replications is not None:
        changes["replications"] = args.replications
    if args.fsa:
        changes["presets"] = tuple(name for name, _ in _fsa_variants(args))
    for flag, field_name in (("weights", "weights"), ("cov", "structure"), ("var", "variance_mode"),
                             ("icc", "icc_mode")):
        val = getattr(args, flag)
        if val is not None:
            changes[field_name] = val.replace("-", "_")
    try:
        design = replace(design, **changes)
        for name in design.presets:
            sw.resolve_fsa(name)
        for point in design.points():
            spec_from_design(point, design)
    except FeasibilityError as exc:
        print(f"infeasible design: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    result = run_experiment(design, workers=max(1, args.workers), level=args.level)
    table = emit_table(result, args.output)
    if args.text:
        emit_table(result, args.text, format="text")
    if args.output is None:
        sys.stdout.write(table)
    if result.flagged:
        bad = [p.point.label() for p in result.points if p.flagged]
        print(f"flagged design points (>5% failed replications): {json.dumps(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _validate(args) -> int:
    reports = oracles.run_all(seed=args.seed, instances=args.instances)
    for r in reports:
        print(r)
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_INVALID if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            return _analyze(args)
        if args.command == "simulate":
            return _simulate(args)
        return _validate(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"csmart: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
