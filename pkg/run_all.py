#!/usr/bin/env python3
"""
Pipeline runner for scaling-loss root-cause detection.

Usage:
    python3 run_all.py pipeline app.sk --scenario app.scenario.json --procs 4 8

Each step is also available on its own (build, simulate, assemble,
detect, backtrack, report); outputs of one step are the inputs of the
next.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import List, Optional

# Add scripts directory to path to allow imports
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scripts'))

from backtrack import find_root_causes, load_report, paths_to_dot, report_json
from config import ToolConfig, load_config
from detect import detect_problems, load_problems, problems_json
from errors import EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, ConfigError, ScalingLossError
from ppg import assemble_ppg, dump_ppg, load_ppg
from profiling import load_profiles, load_runs, store_profiles
from psg import build_psg, dump_psg, load_icall_records, load_psg
from report import FORMATS, export_xlsx, load_sources, print_tables, problems_table, render, summary_table
from run_manager import RunManager, setup_logging
from simulator import load_scenario, run_campaign
from sketch import parse_sketch

logger = logging.getLogger("run_all")

EPILOG = """
Examples:
  # Whole pipeline into a new run directory under runs/
  python3 run_all.py pipeline tests/fixtures/cg_ring.sk --scenario tests/fixtures/cg_ring.scenario.json --procs 4 8

  # Step by step
  python3 run_all.py build app.sk --out psg.json
  python3 run_all.py simulate psg.json --scenario app.scenario.json --procs 4 8 --out-dir profiles/
  python3 run_all.py assemble psg.json profiles/app-P8.jsonl --out ppg.json
  python3 run_all.py detect psg.json profiles/*.jsonl --out problems.json
  python3 run_all.py backtrack ppg.json problems.json --wait-threshold 100 --out paths.json --dot paths.dot
  python3 run_all.py report paths.json --format text --sketch app.sk

  # Past runs and their status
  python3 run_all.py runs
"""


def write_atomic(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def emit(text: str, out: Optional[str]):
    if out:
        write_atomic(Path(out), text)
        logger.info(f"Wrote {out}")
    else:
        sys.stdout.write(text)


def tool_config(args) -> ToolConfig:
    """Config file first, then flags on top."""
    flags = {name: getattr(args, name, None) for name in (
        "max_loop_depth", "abnorm_thd", "merge", "slope_threshold", "min_time_fraction", "top_k",
        "min_abs_us", "sampling_rate", "wait_threshold_us")}
    try:
        return load_config(getattr(args, "config", None)).merge(flags)
    except TypeError as e:
        raise ConfigError(str(e))


def read_sketch(path: str):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Sketch file not found: {p}")
    # locations carry the bare file name so scenarios and reports can name "file:line"
    return parse_sketch(p.read_bytes(), p.name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build(args) -> int:
    cfg = tool_config(args)
    program = read_sketch(args.sketch)
    records = load_icall_records(args.icall_records) if args.icall_records else ()
    psg, stats = build_psg(program, cfg.detection.max_loop_depth, records)
    out = args.out or str(Path(args.sketch).with_suffix(".psg.json"))
    dump_psg(psg, out)
    logger.info(f"PSG: {stats['before']} -> {stats['after']} vertices (reduction {stats['reduction']:.1%})")
    logger.info(f"Wrote {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = tool_config(args)
    psg = load_psg(args.psg)
    scales: List[int] = args.procs or []
    base = load_scenario(args.scenario, scales[0] if scales else None)
    if args.sampling_rate is not None:
        base = replace(base, sampling_rate=cfg.sampling_rate)
    out_dir = Path(args.out_dir)
    for profile in run_campaign(psg, base, scales or [base.nprocs]):
        path = out_dir / f"{profile.run_id}.jsonl"
        store_profiles(profile, path)
        logger.info(f"Wrote {path}")
    return EXIT_OK


def cmd_assemble(args) -> int:
    psg = load_psg(args.psg)
    ppg = assemble_ppg(psg, load_profiles(args.profiles), sender_side=not args.receiver_only)
    out = args.out or "ppg.json"
    dump_ppg(ppg, out)
    logger.info(f"Wrote {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = tool_config(args)
    psg = load_psg(args.psg)
    runs = [assemble_ppg(psg, profile) for profile in load_runs(args.profiles)]
    problems = detect_problems(runs, cfg.detection, single_run=args.single_run)
    emit(problems_json(problems), args.out)
    if not args.quiet:
        print_tables([problems_table(problems, cfg.detection.top_k)])
    return EXIT_OK


def cmd_backtrack(args) -> int:
    cfg = tool_config(args)
    ppg = load_ppg(args.ppg)
    problems = load_problems(args.problems)
    detection = cfg.detection if args.config or _detection_flags_given(args) else problems.config
    report = find_root_causes(ppg, problems, cfg.wait_threshold_us, detection)
    emit(report_json(report), args.out)
    if args.dot:
        write_atomic(Path(args.dot), paths_to_dot(ppg, report))
        logger.info(f"Wrote {args.dot}")
    if not args.quiet:
        print_tables([summary_table(report, detection.top_k)])
    return EXIT_OK


def _detection_flags_given(args) -> bool:
    return any(getattr(args, name, None) is not None for name in (
        "abnorm_thd", "merge", "slope_threshold", "min_time_fraction", "top_k", "min_abs_us"))


def cmd_report(args) -> int:
    report = load_report(args.paths)
    if args.format == "xlsx":
        if not args.out:
            raise ConfigError("xlsx output needs --out")
        problems = load_problems(args.problems) if args.problems else None
        export_xlsx(report, args.out, problems)
        logger.info(f"Wrote {args.out}")
        return EXIT_OK
    ppg = load_ppg(args.ppg) if args.ppg else None
    sources = load_sources(args.sketch or [])
    emit(render(report, args.format, sources, ppg, args.top), args.out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """build -> simulate campaign -> assemble -> detect -> backtrack -> report, in one run directory."""
    cfg = tool_config(args)
    name = Path(args.sketch).stem
    run_mgr = RunManager(name=name, base_dir=runs_dir(args, cfg), verbose=args.verbose)

    print("=" * 80)
    print(f"🔎 Scaling-loss analysis for: {args.sketch}")
    print(f"   Run directory: {run_mgr.run_dir}")
    print("=" * 80 + "\n")

    try:
        program = read_sketch(args.sketch)
        records = load_icall_records(args.icall_records) if args.icall_records else ()
        psg, stats = build_psg(program, cfg.detection.max_loop_depth, records)
        dump_psg(psg, run_mgr.path("psg", "psg.json"))

        scales = sorted(set(args.procs))
        base = load_scenario(args.scenario, scales[0])
        if args.sampling_rate is not None:
            base = replace(base, sampling_rate=cfg.sampling_rate)
        profiles = run_campaign(psg, base, scales)
        for profile in profiles:
            store_profiles(profile, run_mgr.path("profiles", f"{profile.run_id}.jsonl"))

        runs = [assemble_ppg(psg, profile) for profile in profiles]
        largest = runs[-1]
        dump_ppg(largest, run_mgr.path("ppg", f"{largest.run_id}.ppg.json"))

        problems = detect_problems(runs, cfg.detection, single_run=args.single_run)
        write_atomic(run_mgr.path("reports", "problems.json"), problems_json(problems))

        report = find_root_causes(largest, problems, cfg.wait_threshold_us, cfg.detection)
        write_atomic(run_mgr.path("reports", "paths.json"), report_json(report))
        write_atomic(run_mgr.path("reports", "paths.dot"), paths_to_dot(largest, report))
        text = render(report, "text", load_sources([args.sketch]))
        write_atomic(run_mgr.path("reports", "paths.txt"), text)
        export_xlsx(report, run_mgr.path("reports", "paths.xlsx"), problems)
    except ScalingLossError as e:
        run_mgr.update_status("failed", {"error": e.to_dict()})
        raise

    run_mgr.update_status("completed", {
        "psg_vertices": stats["after"],
        "psg_reduction": stats["reduction"],
        "scales": list(scales),
        "nonscalable": len(problems.nonscalable),
        "abnormal": len(problems.abnormal),
        "paths": len(report.paths),
    })

    print_tables([problems_table(problems, cfg.detection.top_k), summary_table(report, cfg.detection.top_k)])
    sys.stdout.write("\n" + text)
    print("\n" + "=" * 80)
    print("✅ All steps completed successfully!")
    print(f"   - Run directory: {run_mgr.run_dir}")
    print(f"   - Report: {run_mgr.path('reports', 'paths.txt')}")
    print("=" * 80)
    return EXIT_OK


def runs_dir(args, cfg: ToolConfig) -> str:
    return args.runs_dir or cfg.paths.get("runs_dir", "runs")


def format_timestamp(iso_timestamp: str) -> str:
    try:
        return datetime.fromisoformat(iso_timestamp).strftime("%Y-%m-%d %H:%M:%S")
    except (TypeError, ValueError):
        return iso_timestamp


def cmd_runs(args) -> int:
    """List pipeline runs, newest first, with the stats recorded at completion."""
    base = Path(runs_dir(args, tool_config(args)))
    runs = RunManager.list_all_runs(base)
    print("\n" + "=" * 80)
    print(" " * 30 + "SCALING-LOSS RUNS")
    print("=" * 80 + "\n")
    if not runs:
        print("No runs found. Create one with:")
        print("  python3 run_all.py pipeline app.sk --scenario app.scenario.json --procs 4 8\n")
        return EXIT_OK

    print(f"Found {len(runs)} run(s):\n")
    for i, run in enumerate(runs, 1):
        print(f"{i}. {run['run_name']}")
        print(f"   Sketch: {run['name']}")
        print(f"   Created: {format_timestamp(run['created_at'])}")
        print(f"   Status: {run['status']}")
        with open(base / run["run_name"] / "run_metadata.json", "r") as f:
            stats = json.load(f).get("stats", {})
        if "error" in stats:
            print(f"   Error: {stats['error'].get('message', '')}")
        elif stats:
            print("   Stats:")
            print(f"     - Scales: {' '.join(str(p) for p in stats.get('scales', []))}")
            print(f"     - Non-scalable: {stats.get('nonscalable', 0)}")
            print(f"     - Abnormal: {stats.get('abnormal', 0)}")
            print(f"     - Paths: {stats.get('paths', 0)}")
        print()
    print("=" * 80)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_detection_flags(p: argparse.ArgumentParser):
    p.add_argument('--config', type=str, help='JSON config file (flags override it)')
    p.add_argument('--max-loop-depth', dest='max_loop_depth', type=int, help='MaxLoopDepth for contraction')
    p.add_argument('--abnorm-thd', dest='abnorm_thd', type=float, help='abnormal ratio threshold (> 1)')
    p.add_argument('--merge', choices=("mean", "median", "max"), help='cross-rank merge strategy')
    p.add_argument('--slope-threshold', dest='slope_threshold', type=float,
                   help='log-log slope at or above which a vertex is non-scalable')
    p.add_argument('--min-time-fraction', dest='min_time_fraction', type=float,
                   help='minimum share of total time for a non-scalable vertex')
    p.add_argument('--top-k', dest='top_k', type=int, help='number of non-scalable vertices kept')
    p.add_argument('--min-abs-us', dest='min_abs_us', type=float, help='minimum excess for an abnormal vertex')
    p.add_argument('--wait-threshold', dest='wait_threshold_us', type=float,
                   help='CommDep edges with wait at or below this (us) are pruned')
    p.add_argument('--sampling-rate', dest='sampling_rate', type=float, help='comm event sampling rate in [0, 1]')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Detect the root causes of scaling loss in MPI program sketches",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument('--json-errors', action='store_true', help='print a JSON error object on stderr')
    parser.add_argument('--verbose', '-v', action='store_true', help='debug output on the console')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('build', help='parse, link and contract a sketch into psg.json')
    p.add_argument('sketch')
    p.add_argument('--icall-records', type=str, help='JSON list of {slot, rank, function} records')
    p.add_argument('--out', type=str, help='output PSG file (default: <sketch>.psg.json)')
    _add_detection_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser('simulate', help='run the simulator and write one profile file per P')
    p.add_argument('psg')
    p.add_argument('--scenario', required=True)
    p.add_argument('--procs', type=int, nargs='+', help='process counts (default: the scenario P)')
    p.add_argument('--out-dir', default='profiles')
    _add_detection_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('assemble', help='build the PPG of one run')
    p.add_argument('psg')
    p.add_argument('profiles', nargs='+')
    p.add_argument('--receiver-only', action='store_true', help='skip sender-side CommDep edges')
    p.add_argument('--out', type=str, help='output PPG file (default: ppg.json)')
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser('detect', help='non-scalable and abnormal vertex detection')
    p.add_argument('psg')
    p.add_argument('profiles', nargs='+')
    p.add_argument('--single-run', action='store_true', help='allow one scale; abnormal detection only')
    p.add_argument('--out', type=str)
    p.add_argument('--quiet', '-q', action='store_true')
    _add_detection_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser('backtrack', help='root-cause paths from a detection report')
    p.add_argument('ppg')
    p.add_argument('problems')
    p.add_argument('--out', type=str)
    p.add_argument('--dot', type=str, help='also write the PPG with the paths overlaid')
    p.add_argument('--quiet', '-q', action='store_true')
    _add_detection_flags(p)
    p.set_defaults(func=cmd_backtrack)

    p = sub.add_parser('report', help='render a path report')
    p.add_argument('paths')
    p.add_argument('--format', choices=FORMATS, default='text')
    p.add_argument('--sketch', nargs='*', help='sketch files for source lines in text mode')
    p.add_argument('--ppg', type=str, help='PPG, needed by --format dot')
    p.add_argument('--problems', type=str, help='detection report, added to the xlsx workbook')
    p.add_argument('--top', type=int)
    p.add_argument('--out', type=str)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('pipeline', help='all steps into a new run directory')
    p.add_argument('sketch')
    p.add_argument('--scenario', required=True)
    p.add_argument('--procs', type=int, nargs='+', required=True)
    p.add_argument('--icall-records', type=str)
    p.add_argument('--single-run', action='store_true')
    p.add_argument('--runs-dir', help='base directory for run folders (default: runs)')
    _add_detection_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser('runs', help='list pipeline runs')
    p.add_argument('--runs-dir', help='base directory for run folders (default: runs)')
    p.add_argument('--config', type=str)
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != 'pipeline':
        setup_logging(verbose=args.verbose)

    try:
        return args.func(args)
    except ScalingLossError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        if args.json_errors:
            print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\n⚠️  Interrupted by user", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"\n❌ Internal error: {e}", file=sys.stderr)
        logger.debug("Traceback", exc_info=True)
        if args.json_errors:
            print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
