"""Command line entry point: ``sadvi run | sweep | validate | project-rate``.

Exit codes: 0 success, 1 validation failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Sequence

from scipy import stats

from . import __version__
from .config import KEYS, ConfigError, RunConfig, load_config, parse_config_text
from .models import dataset_csv, get_model
from .evaluation import MISSING, RESULTS_COLUMNS, EvalReport, projection_rate_study, run_report
from .train import SWEEP_AXES, run_replicates, sweep, training_data
from .validate import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
METHOD_CHOICES = ("sadvi", "gaussian", "truncated-gaussian", "baseline", "both")


# -- output helpers ---------------------------------------------------------------

def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_csv(reports: Sequence[EvalReport], timing: bool, prefix: Sequence[str] = (),
                prefix_values: Sequence[Sequence[str]] | None = None) -> str:
    rows = []
    for i, r in enumerate(reports):
        lead = list(prefix_values[i]) if prefix_values is not None else []
        rows.append(lead + r.row(timing))
    return csv_text(list(prefix) + list(RESULTS_COLUMNS), rows)


def trace_csv(reports: Sequence[EvalReport], seed_base: int) -> str:
    rows, seen = [], set()
    for r in reports:
        key = (r.method, r.seed)
        if key in seen:
            continue
        seen.add(key)
        for epoch, v in enumerate(r.trace):
            rows.append([r.case, r.method, r.seed - seed_base, epoch, repr(float(v))])
    return csv_text(["case", "method", "replicate", "epoch", "objective"], rows)


def summary_csv(reports: Sequence[EvalReport]) -> str:
    """Per-x cells plus per-case cells at the case's reference x."""
    per_x = run_report(reports, by=("case", "method", "x"))
    ref_x = {}
    for r in reports:
        ref_x.setdefault(r.case, get_model(r.case).reference_x)
    ref = run_report([r for r in reports if r.x == ref_x[r.case]], by=("case", "method"))
    rows = []
    for rec in per_x:
        rows.append(_summary_row(rec, "x", rec["x"]))
    for rec in ref:
        rows.append(_summary_row(rec, "reference", ref_x[rec["case"]]))
    return csv_text(["case", "method", "scope", "x", "n", "rise_mean", "rise_sd", "kl_mean", "kl_sd"], rows)


def datasets_csv(cfg: RunConfig, seeds: Sequence[int]) -> str:
    """Training observations (and hidden latents) of every replicate."""
    model = get_model(cfg["case.id"], cfg["case5.as_variance"])
    parts = []
    for i, s in enumerate(seeds):
        text = dataset_csv(*training_data(cfg, model, s), seed=s)
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    return "".join(parts)


def _summary_row(rec: dict, scope: str, x) -> list:
    def fmt(v):
        return v if v == MISSING else repr(float(v))

    return [rec["case"], rec["method"], scope, repr(float(x)), rec["n"],
            fmt(rec["rise_mean"]), fmt(rec["rise_sd"]), fmt(rec["kl_mean"]), fmt(rec["kl_sd"])]


def manifest_record(cfg: RunConfig, command: str, methods: Sequence[str], seeds: Sequence[int],
                    wall_clock: float, reports: Sequence[EvalReport], outputs: dict, extra: dict | None = None) -> dict:
    traces = {}
    for r in reports:
        traces.setdefault(f"{r.method}/seed{r.seed}", [float(v) for v in r.trace])
    rec = {
        "command": command,
        "version": __version__,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "config_text": cfg.to_text(),
        "config_hash": cfg.content_hash(),
        "methods": list(methods),
        "seeds": list(seeds),
        "wall_clock_s": round(wall_clock, 3),
        "unstable_runs": sorted({f"{r.method}/seed{r.seed}" for r in reports if r.unstable}),
        "skipped_steps": {f"{r.method}/seed{r.seed}": r.skipped_steps for r in reports},
        "traces": traces,
        "outputs": outputs,
    }
    if extra:
        rec.update(extra)
    return rec


# -- config resolution --------------------------------------------------------------

def resolve_config(args) -> tuple[RunConfig, dict]:
    """Config file (INI text or a previous manifest.json) plus flag overrides."""
    manifest = {}
    if args.config is None:
        cfg = RunConfig()
    elif str(args.config).endswith(".json"):
        try:
            manifest = json.loads(Path(args.config).read_text())
            cfg = parse_config_text(manifest["config_text"])
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot read manifest {args.config}: {e}") from None
    else:
        try:
            cfg = load_config(args.config)
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
    updates = {}
    if getattr(args, "case", None) is not None:
        updates["case.id"] = args.case
    if getattr(args, "seed", None) is not None:
        updates["seed.base"] = args.seed
    return (cfg.with_values(updates) if updates else cfg), manifest


def resolve_methods(arg: str | None, manifest: dict) -> list[str]:
    if arg is None:
        return list(manifest.get("methods", ["sadvi", "baseline"]))
    if arg not in METHOD_CHOICES:
        raise ConfigError(f"unknown method {arg!r}; expected one of {METHOD_CHOICES}")
    return ["sadvi", "baseline"] if arg == "both" else [arg]


def parse_axis_values(axis: str, raw: str) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    parse = KEYS[axis].parse
    out = []
    for tok in (t.strip() for t in raw.split(",")):
        if not tok:
            continue
        try:
            out.append(parse(tok))
        except ValueError as e:
            raise ConfigError(f"bad value for {axis}: {e}") from None
    return out


# -- subcommands ----------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg, manifest = resolve_config(args)
    methods = resolve_methods(args.method, manifest)
    seeds = [cfg["seed.base"] + r for r in range(cfg["train.replicates"])]
    out = Path(args.out)
    t0 = time.perf_counter()
    reports = run_replicates(cfg, methods, jobs=args.jobs, seeds=seeds)
    wall = time.perf_counter() - t0
    paths = {name: str(out / name) for name in ("results.csv", "trace.csv", "summary.csv", "dataset.csv")}
    atomic_write(out / "manifest.json", json.dumps(
        manifest_record(cfg, "run", methods, seeds, wall, reports, paths), indent=2, sort_keys=True) + "\n")
    atomic_write(out / "results.csv", results_csv(reports, cfg["report.timing"]))
    atomic_write(out / "trace.csv", trace_csv(reports, cfg["seed.base"]))
    atomic_write(out / "summary.csv", summary_csv(reports))
    atomic_write(out / "dataset.csv", datasets_csv(cfg, seeds))
    for line in _summary_lines(reports):
        print(line)
    n_unstable = sum(r.unstable for r in reports)
    if n_unstable:
        print(f"warning: {n_unstable} report rows come from runs flagged unstable", file=sys.stderr)
    print(f"wrote {out / 'results.csv'} ({len(reports)} rows) in {wall:.1f}s")
    return EXIT_OK


def _summary_lines(reports: Sequence[EvalReport]) -> list[str]:
    lines = []
    for rec in run_report(reports, by=("case", "method", "x")):
        sd = rec["rise_sd"]
        sd_s = sd if sd == MISSING else f"{sd:.3f}"
        lines.append(f"case {rec['case']} {rec['method']:<18} x={rec['x']:<6g} n={rec['n']:<3} "
                     f"RISE {rec['rise_mean']:.3f} ({sd_s})")
    return lines


def cmd_sweep(args) -> int:
    cfg, manifest = resolve_config(args)
    values = parse_axis_values(args.axis, args.values)
    methods = resolve_methods(args.method or "sadvi", manifest)
    seeds = [cfg["seed.base"] + r for r in range(cfg["train.replicates"])]
    out = Path(args.out)
    t0 = time.perf_counter()
    pairs = sweep(cfg, args.axis, values, methods, jobs=args.jobs)
    wall = time.perf_counter() - t0
    reports = [r for _, r in pairs]
    paths = {name: str(out / name) for name in ("results.csv", "trace.csv")}
    atomic_write(out / "manifest.json", json.dumps(
        manifest_record(cfg, "sweep", methods, seeds, wall, reports, paths,
                        {"axis": args.axis, "values": [str(v) for v in values]}),
        indent=2, sort_keys=True) + "\n")
    atomic_write(out / "results.csv", results_csv(
        reports, cfg["report.timing"], prefix=("axis", "value"),
        prefix_values=[(args.axis, str(v)) for v, _ in pairs]))
    trace_rows = []
    done = set()
    for v, r in pairs:
        if (str(v), r.method, r.seed) in done:
            continue
        done.add((str(v), r.method, r.seed))
        trace_rows.extend([args.axis, str(v), r.case, r.method, r.seed - cfg["seed.base"], e, repr(float(o))]
                          for e, o in enumerate(r.trace))
    atomic_write(out / "trace.csv", csv_text(
        ["axis", "value", "case", "method", "replicate", "epoch", "objective"], trace_rows))
    print(f"wrote {out / 'results.csv'} ({len(pairs)} rows, {len(values)} values) in {wall:.1f}s")
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.suite not in SUITES + ("all",):
        raise ConfigError(f"unknown suite {args.suite!r}; expected one of {SUITES + ('all',)}")
    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.ok for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def target_pdf(spec: str):
    """``beta:A,B`` or ``uniform`` on [0, 1]."""
    name, _, params = spec.partition(":")
    if name == "uniform" and not params:
        return stats.uniform(0, 1).pdf
    if name == "beta":
        try:
            a, b = (float(v) for v in params.split(","))
        except ValueError:
            raise ConfigError(f"bad beta target {spec!r}; expected beta:A,B") from None
        if a <= 0 or b <= 0:
            raise ConfigError("beta parameters must be positive")
        return stats.beta(a, b).pdf
    raise ConfigError(f"unknown target {spec!r}; expected beta:A,B or uniform")


def _int_list(raw: str, what: str) -> list[int]:
    try:
        return [int(t) for t in raw.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list {raw!r}") from None


def cmd_project_rate(args) -> int:
    pdf = target_pdf(args.target)
    degrees = _int_list(args.degrees, "degree")
    H_values = _int_list(args.H, "H")
    if any(d < 0 for d in degrees) or any(h < 0 for h in H_values):
        raise ConfigError("degrees and H must be nonnegative")
    cells = projection_rate_study(pdf, degrees, H_values)
    rows = [[c.degree, c.H, repr(c.error), c.iterations, str(c.converged).lower()] for c in cells]
    text = csv_text(["degree", "H", "l2_error", "iterations", "converged"], rows)
    if args.out:
        atomic_write(Path(args.out) / "projection.csv", text)
    sys.stdout.write(text)
    failed = [c for c in cells if not c.converged]
    for c in failed:
        print(f"FAIL  degree {c.degree} H {c.H}: no convergence in {c.iterations} iterations", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sadvi", description="Spline-based amortized variational inference experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, default_out):
        sp.add_argument("--config", help="INI config file, or a manifest.json from an earlier run")
        sp.add_argument("--case", type=int, help="benchmark case 1..5 (overrides case.id)")
        sp.add_argument("--method", help=f"one of {', '.join(METHOD_CHOICES)}")
        sp.add_argument("--out", default=default_out, help="output directory")
        sp.add_argument("--seed", type=int, help="base seed (overrides seed.base)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    run = sub.add_parser("run", help="train replicates and write results.csv")
    common(run, "runs/latest")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="repeat the replicate batch over values of one config key")
    common(sw, "runs/sweep")
    sw.add_argument("--axis", required=True, help=f"one of {', '.join(SWEEP_AXES)}")
    sw.add_argument("--values", required=True, help="comma-separated values (may be empty)")
    sw.set_defaults(func=cmd_sweep)

    va = sub.add_parser("validate", help="run property suites")
    va.add_argument("suite", nargs="?", default="all", help=f"one of {', '.join(SUITES + ('all',))}")
    va.set_defaults(func=cmd_validate)

    pr = sub.add_parser("project-rate", help="simplex-constrained L2 projection error versus H")
    pr.add_argument("--target", default="beta:7,3", help="beta:A,B or uniform")
    pr.add_argument("--degrees", default="3", help="comma-separated spline degrees")
    pr.add_argument("--H", default="2,4,8,16", help="comma-separated interior knot counts")
    pr.add_argument("--out", help="directory for projection.csv")
    pr.set_defaults(func=cmd_project_rate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
