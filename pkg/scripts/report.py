"""
Rendering of root-cause path reports

text  - one block per path: score line, the dependence chain and the
        sketch lines of the terminal vertex
json  - the path report document
dot   - the PPG with the top paths overlaid (needs the PPG)
xlsx  - a workbook with Paths, Steps, Non-scalable and Abnormal sheets
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd
from rich.console import Console
from rich.table import Table

from backtrack import PathReport, RootCausePath, paths_to_dot, report_json
from detect import ProblemSet
from errors import ConfigError, ProfileFormatError
from ppg import PPG, PpgVertexRef
from sketch import Location

logger = logging.getLogger(__name__)

FORMATS = ("text", "json", "dot", "xlsx")
ARROW = " ← "
SOURCE_CONTEXT = 0


def load_sources(paths: Iterable[Union[str, Path]]) -> Dict[str, List[str]]:
    """Sketch files keyed by file name, as they appear in vertex locations."""
    sources = {}
    for path in paths:
        path = Path(path)
        try:
            sources[path.name] = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ProfileFormatError(f"cannot read sketch source: {e}", path=str(path))
    return sources


def _where(ref: PpgVertexRef, report: PathReport) -> str:
    return f"r{ref.rank} {report.locations.get(ref.vid, '?')}"


def format_chain(path: RootCausePath, report: PathReport) -> str:
    """seed <- edge kind <- vertex <- ... <- terminal"""
    parts = [_where(path.seed, report)]
    for step in path.steps:
        if step.ref == path.seed and not step.kind:
            continue
        parts.append(step.kind or "start")
        parts.append(_where(step.ref, report))
    return ARROW.join(parts)


def source_lines(loc_text: str, sources: Dict[str, List[str]], context: int = SOURCE_CONTEXT) -> List[str]:
    if not loc_text:
        return []
    try:
        loc = Location.parse(loc_text)
    except ValueError:
        return []
    lines = sources.get(loc.file)
    if not lines:
        return []
    first = max(loc.line - context, 1)
    last = min(loc.last_line + context, len(lines))
    return [f"{n:5d} | {lines[n - 1]}" for n in range(first, last + 1)]


def render_text(report: PathReport, sources: Optional[Dict[str, List[str]]] = None,
                top: Optional[int] = None) -> str:
    sources = sources or {}
    out = [f"run {report.run_id}: {len(report.paths)} root-cause path(s), "
           f"CommDep wait threshold {report.wait_threshold_us:g} us"]
    out.extend(f"note: {n}" for n in report.notes)
    paths = report.paths if top is None else report.paths[:top]
    for i, p in enumerate(paths, 1):
        term = p.terminal
        out.append("")
        out.append(f"#{i} {report.kinds.get(term.vid, '')} {report.locations.get(term.vid, '?')} "
                   f"in rank {term.rank}  score={p.score:.6g} time={p.terminal_time_us:.6g}us "
                   f"imbalance={p.imbalance:.4g}  [{p.origin}, stop: {p.reason}]")
        out.append("   " + format_chain(p, report))
        for alt in p.alternates:
            out.append(f"   alternate at {_where(alt.at, report)}: {_where(alt.to, report)} "
                       f"(wait {alt.wait_us:.6g}us)")
        out.extend("   " + line for line in source_lines(report.locations.get(term.vid, ""), sources))
    return "\n".join(out) + "\n"


def render_dot(report: PathReport, ppg: Optional[PPG]) -> str:
    if ppg is None:
        raise ConfigError("dot output needs the PPG (--ppg)")
    if report.psg_hash and report.psg_hash != ppg.psg_hash:
        raise ProfileFormatError("path report and PPG come from different PSGs")
    return paths_to_dot(ppg, report)


def report_frames(report: PathReport, problems: Optional[ProblemSet] = None) -> Dict[str, pd.DataFrame]:
    """Tables behind the workbook, one DataFrame per sheet."""
    paths, steps = [], []
    for i, p in enumerate(report.paths, 1):
        term = p.terminal
        paths.append({
            'Rank Order': i,
            'Terminal': report.locations.get(term.vid, ''),
            'Terminal Kind': report.kinds.get(term.vid, ''),
            'Terminal Rank': term.rank,
            'Score': p.score,
            'Terminal Time (us)': p.terminal_time_us,
            'Imbalance': p.imbalance,
            'Seed': report.locations.get(p.seed.vid, ''),
            'Seed Rank': p.seed.rank,
            'Origin': p.origin,
            'Stop Reason': p.reason,
            'CommDep Hops': p.comm_hops,
            'Ranks': " ".join(str(r) for r in p.ranks),
            'Chain': format_chain(p, report),
        })
        for j, s in enumerate(p.steps):
            steps.append({
                'Path': i,
                'Step': j,
                'Rank': s.ref.rank,
                'Vertex': s.ref.vid,
                'Location': report.locations.get(s.ref.vid, ''),
                'Kind': report.kinds.get(s.ref.vid, ''),
                'Via': s.kind,
                'Role': s.role,
            })
    frames = {
        'Paths': pd.DataFrame(paths),
        'Steps': pd.DataFrame(steps),
    }
    if problems is not None:
        frames['Non-scalable'] = pd.DataFrame([
            {'Vertex': n.vid, 'Location': n.loc, 'Kind': n.kind, 'Slope': n.slope, 'Intercept': n.intercept,
             'R2': n.r2, 'Time Share': n.fraction, 'Flags': " ".join(n.flags)}
            for n in problems.nonscalable])
        frames['Abnormal'] = pd.DataFrame([
            {'Vertex': a.vid, 'Rank': a.rank, 'Location': a.loc, 'Kind': a.kind, 'Time (us)': a.time_us,
             'Median (us)': a.median_us, 'Ratio': a.ratio, 'Excess (us)': a.excess_us}
            for a in problems.abnormal])
    return frames


def export_xlsx(report: PathReport, output_file: Union[str, Path], problems: Optional[ProblemSet] = None) -> Path:
    """Write the path report (and the detection findings, when given) to an Excel workbook."""
    output_file = Path(output_file)
    with pd.ExcelWriter(output_file, engine='openpyxl') as writer:
        for sheet_name, df in report_frames(report, problems).items():
            df.to_excel(writer, sheet_name=sheet_name, index=False)
            logger.info(f"Sheet '{sheet_name}' created ({len(df)} rows)")
    return output_file


def render(report: PathReport, fmt: str = "text", sources: Optional[Dict[str, List[str]]] = None,
           ppg: Optional[PPG] = None, top: Optional[int] = None) -> str:
    """Text-based formats; xlsx goes through export_xlsx."""
    if fmt == "text":
        return render_text(report, sources, top)
    if fmt == "json":
        return report_json(report)
    if fmt == "dot":
        return render_dot(report, ppg)
    raise ConfigError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")


def summary_table(report: PathReport, top: int = 10) -> Table:
    table = Table(title=f"Root causes - {report.run_id}")
    table.add_column("#", justify="right")
    table.add_column("Terminal")
    table.add_column("Rank", justify="right")
    table.add_column("Score", justify="right")
    table.add_column("Imbalance", justify="right")
    table.add_column("Hops", justify="right")
    table.add_column("Stop")
    for i, p in enumerate(report.paths[:top], 1):
        term = p.terminal
        table.add_row(str(i), f"{report.kinds.get(term.vid, '')} {report.locations.get(term.vid, '')}",
                      str(term.rank), f"{p.score:.4g}", f"{p.imbalance:.3g}", str(p.comm_hops), p.reason)
    return table


def problems_table(problems: ProblemSet, top: int = 10) -> Table:
    table = Table(title="Scaling problems")
    table.add_column("Set")
    table.add_column("Vertex")
    table.add_column("Rank", justify="right")
    table.add_column("Value", justify="right")
    for n in problems.nonscalable[:top]:
        table.add_row("N", f"{n.kind} {n.loc}", "-", f"slope {n.slope:.3f}")
    for a in problems.abnormal[:top]:
        ratio = f"x{a.ratio:.2f}" if a.ratio is not None else "median 0"
        table.add_row("A", f"{a.kind} {a.loc}", str(a.rank), ratio)
    return table


def print_tables(tables: Sequence[Table], console: Optional[Console] = None):
    console = console or Console(stderr=True)
    for t in tables:
        console.print(t)
