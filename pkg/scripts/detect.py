"""
Location-aware detection of problematic vertices.

- Non-scalable vertices: across runs at different process counts, merge
  each vertex's per-rank time, fit ln(time) against ln(P) and keep the
  vertices whose slope stays at or above the threshold while they take a
  noticeable share of the total time.
- Abnormal vertices: within one run, ranks whose time at a vertex
  exceeds AbnormThd x the cross-rank median.

Only leaf vertices (Comp and MPI) are candidates; containers report
inclusive time and would echo their children.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import MERGE_STRATEGIES, DetectionConfig
from errors import ConfigError, DetectionError, FitError, ProfileFormatError
from ppg import PPG
from psg import PSG, VertexKind

logger = logging.getLogger(__name__)

LEAF_KINDS = (VertexKind.COMP, VertexKind.MPI)


@dataclass(frozen=True)
class FitResult:
    intercept: float
    slope: float
    r2: float
    n_points: int


@dataclass(frozen=True)
class ScalePoint:
    nprocs: int
    value: float
    variance: float


@dataclass(frozen=True)
class ScaleSeries:
    vid: int
    points: Tuple[ScalePoint, ...]
    metric: str = "time_us"


@dataclass(frozen=True)
class NonScalableVertex:
    vid: int
    loc: str
    kind: str
    slope: float
    intercept: float
    r2: float
    fraction: float
    points: Tuple[ScalePoint, ...] = ()
    flags: Tuple[str, ...] = ()
    counters: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        data = {"vertex": self.vid, "loc": self.loc, "kind": self.kind, "slope": self.slope,
                "intercept": self.intercept, "r2": self.r2, "fraction": self.fraction,
                "points": [[p.nprocs, p.value, p.variance] for p in self.points]}
        if self.flags:
            data["flags"] = list(self.flags)
        if self.counters:
            data["counters"] = dict(sorted(self.counters.items()))
        return data

    @classmethod
    def from_dict(cls, d: Dict) -> "NonScalableVertex":
        return cls(int(d["vertex"]), d["loc"], d.get("kind", ""), float(d["slope"]), float(d.get("intercept", 0.0)),
                   float(d["r2"]), float(d["fraction"]),
                   tuple(ScalePoint(int(p[0]), float(p[1]), float(p[2])) for p in d.get("points", ())),
                   tuple(d.get("flags", ())), {str(k): int(v) for k, v in d.get("counters", {}).items()})


@dataclass(frozen=True)
class AbnormalVertex:
    vid: int
    rank: int
    loc: str
    kind: str
    time_us: float
    median_us: float
    ratio: Optional[float]
    excess_us: float

    def to_dict(self) -> Dict:
        return {"vertex": self.vid, "rank": self.rank, "loc": self.loc, "kind": self.kind,
                "time_us": self.time_us, "median_us": self.median_us, "ratio": self.ratio,
                "excess_us": self.excess_us}

    @classmethod
    def from_dict(cls, d: Dict) -> "AbnormalVertex":
        ratio = d.get("ratio")
        return cls(int(d["vertex"]), int(d["rank"]), d["loc"], d.get("kind", ""), float(d["time_us"]),
                   float(d["median_us"]), float(ratio) if ratio is not None else None, float(d["excess_us"]))


@dataclass(frozen=True)
class ProblemSet:
    nonscalable: Tuple[NonScalableVertex, ...]
    abnormal: Tuple[AbnormalVertex, ...]
    config: DetectionConfig
    psg_hash: str = ""
    scales: Tuple[int, ...] = ()
    abnormal_run: str = ""
    notes: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "config": self.config.to_dict(),
            "psg_hash": self.psg_hash,
            "scales": list(self.scales),
            "abnormal_run": self.abnormal_run,
            "N": [n.to_dict() for n in self.nonscalable],
            "A": [a.to_dict() for a in self.abnormal],
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ProblemSet":
        try:
            return cls(tuple(NonScalableVertex.from_dict(n) for n in d["N"]),
                       tuple(AbnormalVertex.from_dict(a) for a in d["A"]),
                       DetectionConfig(**d.get("config", {})), d.get("psg_hash", ""),
                       tuple(d.get("scales", ())), d.get("abnormal_run", ""), tuple(d.get("notes", ())))
        except (KeyError, TypeError, ValueError) as e:
            raise ProfileFormatError(f"malformed detection report: {e!r}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def merge_across_ranks(values: Sequence[float], strategy: str = "mean") -> Tuple[float, float]:
    """
    Collapse per-rank values into one.

    Returns:
        (merged value, population variance)
    """
    if strategy not in MERGE_STRATEGIES:
        raise ConfigError(f"unknown merge strategy '{strategy}'")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DetectionError("cannot merge an empty set of values")
    if strategy == "mean":
        merged = arr.mean()
    elif strategy == "median":
        merged = np.median(arr)
    else:
        merged = arr.max()
    return float(merged), float(arr.var())


def fit_loglog(points: Sequence[Tuple[float, float]]) -> FitResult:
    """
    Ordinary least squares of ln(value) on ln(P).

    Raises:
        FitError: fewer than two distinct P, or a non-positive P/value
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(pts[:, 0])) < 2:
        raise FitError("log-log fit needs at least two distinct process counts")
    if np.any(pts <= 0):
        raise FitError("log-log fit needs positive process counts and values")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    A = np.column_stack((np.ones_like(x), x))
    (intercept, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    residual = y - (intercept + slope * x)
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return FitResult(float(intercept), float(slope), r2, len(pts))


def candidate_vertices(psg: PSG) -> List[int]:
    return [v.id for v in psg.vertices if v.kind in LEAF_KINDS]


def _observed(run: PPG, vid: int) -> bool:
    return any((r, vid) in run.perf for r in range(run.nprocs))


def _check_runs(runs: Sequence[PPG]) -> List[PPG]:
    if not runs:
        raise DetectionError("no runs given")
    hashes = {r.psg_hash for r in runs}
    if len(hashes) > 1:
        raise DetectionError("runs were profiled against different PSGs", runs=[r.run_id for r in runs])
    ordered = sorted(runs, key=lambda r: (r.nprocs, r.run_id))
    scales = [r.nprocs for r in ordered]
    if len(set(scales)) != len(scales):
        raise DetectionError(f"more than one run per process count: {scales}")
    return ordered


def scale_series(runs: Sequence[PPG], vid: int, strategy: str = "mean") -> ScaleSeries:
    points = []
    for run in sorted(runs, key=lambda r: r.nprocs):
        if _observed(run, vid):
            merged, var = merge_across_ranks(run.times(vid), strategy)
            points.append(ScalePoint(run.nprocs, merged, var))
    return ScaleSeries(vid, tuple(points))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def detect_nonscalable(runs: Sequence[PPG], cfg: DetectionConfig) -> List[NonScalableVertex]:
    """
    Rank vertices whose time does not shrink with scale.

    A vertex qualifies when its fitted slope is >= cfg.slope_threshold and
    its merged time at the largest scale is >= cfg.min_time_fraction of
    the summed merged time of all leaf vertices there. Results are sorted
    by slope (descending, vertex id on ties) and cut at cfg.top_k.

    Raises:
        DetectionError: mismatched PSGs, duplicate or fewer than two scales
    """
    runs = _check_runs(runs)
    if len({r.nprocs for r in runs}) < 2:
        raise DetectionError("≥2 scales required for non-scalable detection")
    psg = runs[0].psg
    largest = runs[-1]
    floor = cfg.min_abs_us / 10.0

    leaves = candidate_vertices(psg)
    total = sum(merge_across_ranks(largest.times(vid), cfg.merge)[0]
                for vid in leaves if _observed(largest, vid))

    found = []
    for vid in leaves:
        series = scale_series(runs, vid, cfg.merge)
        if len({p.nprocs for p in series.points}) < 2:
            continue
        flags = []
        if len(series.points) < len(runs):
            flags.append("partial-series")
        fit_points = []
        for p in series.points:
            value = p.value
            if value <= 0:
                value = floor
                if "clamped" not in flags:
                    flags.append("clamped")
            fit_points.append((p.nprocs, value))
        fit = fit_loglog(fit_points)
        share = 0.0
        if _observed(largest, vid) and total > 0:
            share = merge_across_ranks(largest.times(vid), cfg.merge)[0] / total
        if fit.slope < cfg.slope_threshold or share < cfg.min_time_fraction:
            continue
        v = psg.vertex(vid)
        counters: Dict[str, int] = {}
        for r in range(largest.nprocs):
            p = largest.perf_of(r, vid)
            if p is not None:
                for name, value in p.counters.items():
                    counters[name] = counters.get(name, 0) + value
        found.append(NonScalableVertex(vid, str(v.loc), v.kind_name, fit.slope, fit.intercept, fit.r2, share,
                                       series.points, tuple(flags), counters))
        if flags:
            logger.debug("Vertex %s flagged %s", v.describe(), ", ".join(flags))

    found.sort(key=lambda n: (-n.slope, n.vid))
    return found[:cfg.top_k]


def detect_abnormal(run: PPG, cfg: DetectionConfig) -> List[AbnormalVertex]:
    """Ranks whose time at a vertex exceeds abnorm_thd x median and the median by more than min_abs_us."""
    found = []
    for vid in candidate_vertices(run.psg):
        if not _observed(run, vid):
            continue
        times = np.asarray(run.times(vid), dtype=np.float64)
        median = float(np.median(times))
        v = run.psg.vertex(vid)
        for rank, t in enumerate(times):
            t = float(t)
            if t > cfg.abnorm_thd * median and t - median > cfg.min_abs_us:
                found.append(AbnormalVertex(vid, rank, str(v.loc), v.kind_name, t, median,
                                            t / median if median > 0 else None, t - median))
    return found


def detect_problems(runs: Sequence[PPG], cfg: DetectionConfig, single_run: bool = False) -> ProblemSet:
    """
    N over all runs and A on the largest run.

    With single_run, fewer than two scales is allowed and N stays empty.
    """
    runs = _check_runs(runs)
    notes = []
    if len(runs) < 2:
        if not single_run:
            raise DetectionError("≥2 scales required for non-scalable detection (use --single-run for "
                                 "abnormal detection only)")
        nonscalable = []
        notes.append("single run: non-scalable detection skipped")
    else:
        nonscalable = detect_nonscalable(runs, cfg)
    largest = runs[-1]
    abnormal = detect_abnormal(largest, cfg)
    logger.info("Detection: %d non-scalable, %d abnormal (run %s)", len(nonscalable), len(abnormal),
                largest.run_id)
    return ProblemSet(tuple(nonscalable), tuple(abnormal), cfg, largest.psg_hash,
                      tuple(r.nprocs for r in runs), largest.run_id, tuple(notes))


def scale_table(runs: Sequence[PPG], cfg: DetectionConfig) -> pd.DataFrame:
    """Merged value and variance per leaf vertex and process count."""
    runs = _check_runs(runs)
    psg = runs[0].psg
    rows = []
    for vid in candidate_vertices(psg):
        v = psg.vertex(vid)
        for run in runs:
            if not _observed(run, vid):
                continue
            times = run.times(vid)
            merged, var = merge_across_ranks(times, cfg.merge)
            rows.append({"vertex": vid, "loc": str(v.loc), "kind": v.kind_name, "P": run.nprocs,
                         "merged_us": merged, "variance": var, "max_us": max(times), "min_us": min(times)})
    columns = ["vertex", "loc", "kind", "P", "merged_us", "variance", "max_us", "min_us"]
    return pd.DataFrame(rows, columns=columns)


def problems_json(problems: ProblemSet) -> str:
    return json.dumps(problems.to_dict(), indent=2, sort_keys=True) + "\n"


def load_problems(path: str) -> ProblemSet:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return ProblemSet.from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise ProfileFormatError(f"invalid detection report JSON: {e}", path=str(path))
