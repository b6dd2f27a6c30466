"""Command-line entry point wiring the audit, fork and statistics workflows.

Every subcommand that writes into an output directory also writes a
``config.json`` echoing its resolved flags, so any run can be reconstructed
from its outputs alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import NON_REPRODUCIBILITY_STATEMENT, audit, quant, stats
from .evalset import load_evalset, perplexity
from .schedules import (CosineWarmup, OLISpec, PhaseTag, SGDRSpec, classify_step,
                        emit_curve, eta_max_of, lr_at, schedule_from_dict,
                        schedule_to_dict)
from .weightstore import QuantSelector, read_checkpoint


def _resolve_threads(requested: int | None) -> int:
    env = os.environ.get("QUANTAUDIT_THREADS")
    if env is not None:
        return max(1, int(env))
    if requested is not None:
        return max(1, requested)
    return os.cpu_count() or 1


def _apply_threads(n: int) -> None:
    try:
        import torch

        torch.set_num_threads(n)
    except ImportError:
        pass


def _echo_config(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: (str(v) if isinstance(v, Path) else v)
           for k, v in vars(args).items() if k != "func"}
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _selector_from_args(args) -> QuantSelector:
    sel = QuantSelector()
    if getattr(args, "include", None):
        sel.include_patterns = args.include.split(",")
    if getattr(args, "exclude", None):
        sel.exclude_patterns = args.exclude.split(",")
    return sel


def _int4_from_args(args) -> quant.Int4GroupScheme:
    return quant.Int4GroupScheme(group_size=args.group_size,
                                 scale_scope=args.scale_scope)


def _schedule_from_args(args, fork_step: int = 0):
    base = CosineWarmup(eta_max=args.eta_max, eta_min=args.eta_min,
                        warmup_steps=args.warmup_steps, total_steps=args.total_steps)
    if args.kind == "cosine":
        return base
    if args.kind == "sgdr":
        return SGDRSpec(eta_max=args.eta_max, eta_min=args.eta_min,
                        period=args.sgdr_period, fork_step=fork_step)
    if args.kind == "oli":
        return OLISpec(base=base, bump_multiplier=args.bump_multiplier,
                       bump_len=args.bump_len, cool_len=args.cool_len,
                       fork_step=fork_step)
    raise ValueError(f"unknown schedule kind {args.kind!r}")


def _add_schedule_flags(parser, with_kind=True):
    if with_kind:
        parser.add_argument("--kind", choices=["cosine", "sgdr", "oli"], default="cosine")
    parser.add_argument("--eta-max", type=float, default=6e-4)
    parser.add_argument("--eta-min", type=float, default=6e-5)
    parser.add_argument("--warmup-steps", type=int, default=1_430)
    parser.add_argument("--total-steps", type=int, default=143_000)
    parser.add_argument("--sgdr-period", type=int, default=10_000)
    parser.add_argument("--bump-multiplier", type=float, default=5.0)
    parser.add_argument("--bump-len", type=int, default=75)
    parser.add_argument("--cool-len", type=int, default=300)
    parser.add_argument("--fork-step", type=int, default=0)


def _add_scheme_flags(parser):
    parser.add_argument("--group-size", type=int, default=128)
    parser.add_argument("--scale-scope", choices=["per_block", "per_row_group"],
                        default="per_block")
    parser.add_argument("--include", help="comma-separated include name patterns")
    parser.add_argument("--exclude", help="comma-separated exclude name patterns")


def _emit(record: dict, fmt: str, output: str | None) -> None:
    if fmt == "json":
        text = json.dumps(record, indent=1, sort_keys=True) + "\n"
    else:
        keys = list(record)
        text = ",".join(keys) + "\n" + ",".join(repr(record[k]) if isinstance(record[k], float)
                                                else str(record[k]) for k in keys) + "\n"
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_probe(args) -> int:
    from .toylab.model import model_from_checkpoint

    es = load_evalset(args.evalset)
    manifest, tensors = read_checkpoint(args.ckpt)
    selector = _selector_from_args(args)
    scheme = _int4_from_args(args) if args.scheme == "int4" else quant.Int8ChannelScheme()

    ppl_fp = perplexity(model_from_checkpoint(manifest, tensors), es).ppl
    qtensors = quant.quantize_model(tensors, selector, scheme)
    ppl_q = perplexity(model_from_checkpoint(manifest, qtensors), es).ppl
    rec = quant.GapRecord(ppl_fp=ppl_fp, ppl_q=ppl_q)
    _emit({"step": manifest.step, "scheme": args.scheme, "ppl_fp": rec.ppl_fp,
           "ppl_q": rec.ppl_q, "gap_pct": rec.gap_pct}, args.format, args.output)
    return 0


def cmd_audit(args) -> int:
    out_dir = Path(args.out)
    _echo_config(out_dir, args)
    es = load_evalset(args.evalset)
    schedule = _schedule_from_args(args, fork_step=args.fork_step)
    traj, failures = audit.sweep(
        args.root, es, schedule,
        selector=_selector_from_args(args),
        int4_scheme=_int4_from_args(args),
        with_kurtosis=args.with_kurtosis,
        out_csv=out_dir / "trajectory.csv",
    )
    if args.format == "json":
        audit.export(traj, "json", out_dir / "trajectory.json")
    (out_dir / "failures.json").write_text(json.dumps(failures, indent=1) + "\n")
    print(f"audited {len(traj)} checkpoints ({len(failures)} failures) -> {out_dir}")
    return 0 if traj else 1


def cmd_phases(args) -> int:
    out_dir = Path(args.out)
    _echo_config(out_dir, args)
    traj = audit.import_trajectory_csv(args.trajectory)
    report = audit.segment_phases(traj, p1_rate=args.p1_rate, window=args.window,
                                  rel_tol=args.rel_tol)
    audit.export(traj, "csv", out_dir / "trajectory_labeled.csv")
    (out_dir / "phases.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_schedule(args) -> int:
    spec = _schedule_from_args(args, fork_step=args.fork_step)
    rows = []
    eta_max = eta_max_of(spec)
    for step, lr in emit_curve(spec, args.start, args.end, args.stride):
        row = {"step": step, "lr": lr, "lr_frac_of_eta_max": lr / eta_max}
        if isinstance(spec, OLISpec):
            row["phase_tag"] = classify_step(spec, step).value
        rows.append(row)
    out = Path(args.output) if args.output else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(rows[0].keys() if rows else ["step", "lr", "lr_frac_of_eta_max"])
        for row in rows:
            writer.writerow([v if isinstance(v, (int, str)) else repr(v)
                             for v in row.values()])
    finally:
        if out:
            fh.close()
    return 0


def cmd_fork(args) -> int:
    from .toylab.train import fork

    out_dir = Path(args.out)
    _echo_config(out_dir, args)
    es = load_evalset(args.evalset)
    manifest, _ = read_checkpoint(args.base_ckpt)
    base_sched = schedule_from_dict(json.loads(manifest.meta["schedule"]))
    if not isinstance(base_sched, CosineWarmup):
        print("base checkpoint was not trained with a cosine schedule", file=sys.stderr)
        return 1

    conditions = []
    for name in args.conditions.split(","):
        if name == "cosine":
            conditions.append((name, base_sched))
        elif name == "sgdr":
            conditions.append((name, SGDRSpec(eta_max=base_sched.eta_max,
                                              eta_min=base_sched.eta_min,
                                              period=args.sgdr_period,
                                              fork_step=manifest.step)))
        elif name == "oli":
            conditions.append((name, OLISpec(base=base_sched,
                                             bump_multiplier=args.bump_multiplier,
                                             bump_len=args.bump_len,
                                             cool_len=args.cool_len,
                                             fork_step=manifest.step)))
        else:
            print(f"unknown condition {name!r}", file=sys.stderr)
            return 1

    seeds = [int(s) for s in args.seeds.split(",")]
    result = fork(args.base_ckpt, conditions, args.steps, seeds, es, out_dir,
                  cadence=args.cadence, selector=_selector_from_args(args),
                  int4_scheme=_int4_from_args(args))
    print(f"fork matrix complete: {len(result.trajectories)} runs, "
          f"{len(result.failures)} failures -> {out_dir}")
    return 0 if not result.failures else 1


def _csv_column(path: str, column: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if column not in (reader.fieldnames or []):
            raise ValueError(f"column {column!r} not in {path}")
        values = [float(rec[column]) for rec in reader if rec[column] != ""]
    return np.asarray(values)


def cmd_stats(args) -> int:
    if args.stat == "kurtosis":
        manifest, tensors = read_checkpoint(args.ckpt)
        res = stats.pooled_weight_kurtosis(tensors, _selector_from_args(args),
                                           manifest=manifest)
        _emit(asdict(res), args.format, args.output)
    elif args.stat == "pearson":
        r = stats.pearson(_csv_column(args.csv, args.x), _csv_column(args.csv, args.y))
        _emit({"r": r}, args.format, args.output)
    elif args.stat == "welch":
        res = stats.welch_t(_csv_column(args.csv, args.a), _csv_column(args.csv, args.b))
        _emit(asdict(res), args.format, args.output)
    elif args.stat == "wins":
        rec = stats.pairwise_wins(_csv_column(args.csv, args.challenger),
                                  _csv_column(args.csv, args.baseline),
                                  lower_is_better=not args.higher_is_better)
        _emit({"wins": rec.wins, "ties": rec.ties, "losses": rec.losses,
               "total": rec.total}, args.format, args.output)
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    _echo_config(out_dir, args)

    if args.trajectory:
        traj = audit.import_trajectory_csv(args.trajectory)
        with open(out_dir / "trajectory_series.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "series", "value"])
            for p in traj:
                for series in ("ppl_fp32", "gap_int4_pct", "gap_int8_pct", "lr_frac"):
                    writer.writerow([p.step, series, repr(getattr(p, series))])
        kurt_rows = [p for p in traj if p.kurtosis is not None]
        if kurt_rows:
            with open(out_dir / "kurtosis_vs_gap.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "kurtosis", "gap_int4_pct"])
                for p in kurt_rows:
                    writer.writerow([p.step, repr(p.kurtosis), repr(p.gap_int4_pct)])

    if args.fork_dir:
        fork_dir = Path(args.fork_dir)
        summary = json.loads((fork_dir / "summary.json").read_text())
        with open(out_dir / "fork_comparison.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["condition", "seed", "step", "gap_int4_pct", "phase_tag"])
            for run_dir in sorted(fork_dir.iterdir()):
                traj_csv = run_dir / "trajectory.csv"
                if not traj_csv.is_file():
                    continue
                cond, _, seed = run_dir.name.rpartition("-seed")
                spec = _fork_condition_spec(summary, cond, fork_dir)
                for p in audit.import_trajectory_csv(traj_csv):
                    tag = ""
                    if isinstance(spec, OLISpec) and p.step >= spec.fork_step:
                        tag = classify_step(spec, p.step).value
                    writer.writerow([cond, seed, p.step, repr(p.gap_int4_pct), tag])

    (out_dir / "report_notes.txt").write_text(NON_REPRODUCIBILITY_STATEMENT + "\n")
    print(f"report series written to {out_dir}")
    return 0


def _fork_condition_spec(summary: dict, cond: str, fork_dir: Path):
    # reconstruct the condition schedule from one of its run configs
    for run_dir in sorted(fork_dir.glob(f"{cond}-seed*")):
        for ckpt in sorted(run_dir.glob("step-*")):
            manifest_path = ckpt / "manifest.json"
            if manifest_path.is_file():
                meta = json.loads(manifest_path.read_text())["meta"]
                return schedule_from_dict(json.loads(meta["schedule"]))
    return None


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantaudit",
        description="Quantization-robustness forensics across training checkpoints.",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (env QUANTAUDIT_THREADS overrides)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("probe", help="probe one checkpoint with a quantization scheme")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--evalset", required=True)
    p.add_argument("--scheme", choices=["int4", "int8"], default="int4")
    _add_scheme_flags(p)
    p.add_argument("--output")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("audit", help="sweep every checkpoint under a root")
    p.add_argument("--root", required=True)
    p.add_argument("--evalset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-kurtosis", action="store_true")
    p.add_argument("--format", choices=["json", "csv"], default="csv")
    _add_scheme_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("phases", help="segment a trajectory into its three phases")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p1-rate", type=float, default=0.05,
                   help="phase-1 boundary threshold (relative PPL improvement per 1k steps)")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--rel-tol", type=float, default=0.001)
    p.set_defaults(func=cmd_phases)

    p = sub.add_parser("schedule", help="emit an LR curve as CSV")
    _add_schedule_flags(p)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--end", type=int, required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--output")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("fork", help="fork a checkpoint under several schedules")
    p.add_argument("--base-ckpt", required=True)
    p.add_argument("--evalset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--cadence", type=int, default=100)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--conditions", default="cosine,sgdr,oli")
    p.add_argument("--sgdr-period", type=int, default=10_000)
    p.add_argument("--bump-multiplier", type=float, default=5.0)
    p.add_argument("--bump-len", type=int, default=75)
    p.add_argument("--cool-len", type=int, default=300)
    _add_scheme_flags(p)
    p.set_defaults(func=cmd_fork)

    p = sub.add_parser("stats", help="statistics over checkpoints and CSV columns")
    p.add_argument("stat", choices=["kurtosis", "pearson", "welch", "wins"])
    p.add_argument("--ckpt")
    p.add_argument("--csv")
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--challenger")
    p.add_argument("--baseline")
    p.add_argument("--higher-is-better", action="store_true")
    p.add_argument("--include")
    p.add_argument("--exclude")
    p.add_argument("--output")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="emit tidy plot-ready series")
    p.add_argument("--trajectory")
    p.add_argument("--fork-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(_resolve_threads(args.threads))
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # package-domain errors share the same exit convention
        if type(exc).__module__.startswith("quantaudit"):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
