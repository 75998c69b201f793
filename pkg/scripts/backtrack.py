"""
Backtracking root-cause detection.

Starting from problematic vertices, walk the PPG's dependence edges
backwards:

- an MPI vertex with a surviving CommDep edge jumps to the peer it
  waited on (the edge with the largest wait; others become alternates);
- an unscanned Loop/Branch/CallSite descends to the end of its body
  (for a Branch, the arm that took longer on that rank);
- anything else follows its DataDep edge, or the CtrlDep exit edge when
  it is the first vertex of its scope.

A walk stops at Root, at a collective, when no edge is left, or when
the next vertex has already been scanned (for an MPI vertex whose
surviving CommDep edges all lead to scanned peers, that is the peer).
The scanned set is shared by all walks of one invocation: non-scalable
seeds first, in slope order, then abnormal seeds that no earlier walk
touched. A path's terminal is the vertex of its last step, container or
not; `cause` keeps the last Comp or MPI vertex on the path.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import DetectionConfig
from detect import AbnormalVertex, NonScalableVertex, ProblemSet
from errors import ProfileFormatError
from ppg import COMM_DEP, CTRL_DEP, DATA_DEP, PPG, CollectiveGroup, PpgEdge, PpgVertexRef, ppg_to_dot, worst_collectives
from psg import VertexKind

logger = logging.getLogger(__name__)

ROOT, COLLECTIVE, NO_EDGE, SCANNED = "Root", "Collective", "NoEdge", "Scanned"
PATH_COLORS = ("#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf")


class PpgView:
    """A PPG with CommDep edges at or below the wait threshold hidden from traversal."""

    def __init__(self, ppg: PPG, wait_threshold_us: float = 0.0):
        self.ppg = ppg
        self.wait_threshold_us = wait_threshold_us

    def out_edges(self, ref: PpgVertexRef, kind: Optional[str] = None) -> List[PpgEdge]:
        return [e for e in self.ppg.out_edges(ref, kind)
                if e.kind != COMM_DEP or e.wait_us > self.wait_threshold_us]

    def comm_edges(self) -> List[PpgEdge]:
        return [e for e in self.ppg.edges_of_kind(COMM_DEP) if e.wait_us > self.wait_threshold_us]

    def has_edge(self, src: PpgVertexRef, dst: PpgVertexRef, kind: str, role: str) -> bool:
        return any(e.dst == dst and e.role == role for e in self.out_edges(src, kind))


def prune_comm_edges(ppg: PPG, wait_threshold_us: float) -> PpgView:
    """Keep a CommDep edge for traversal only if its waiting side waited more than the threshold."""
    return PpgView(ppg, wait_threshold_us)


@dataclass(frozen=True)
class PathStep:
    ref: PpgVertexRef
    kind: str = ""  # edge kind taken to reach this vertex; empty for the first step of a walk
    role: str = ""


@dataclass(frozen=True)
class AlternateHop:
    at: PpgVertexRef
    to: PpgVertexRef
    wait_us: float


@dataclass(frozen=True)
class RootCausePath:
    seed: PpgVertexRef
    steps: Tuple[PathStep, ...]
    reason: str
    origin: str = "N"
    alternates: Tuple[AlternateHop, ...] = ()
    score: float = 0.0
    terminal_time_us: float = 0.0
    imbalance: float = 1.0
    cause: Optional[PpgVertexRef] = None  # last non-container step

    @property
    def terminal(self) -> PpgVertexRef:
        return self.steps[-1].ref if self.steps else self.seed

    @property
    def comm_hops(self) -> int:
        return sum(1 for s in self.steps if s.kind == COMM_DEP)

    @property
    def ranks(self) -> List[int]:
        seen = []
        for ref in [self.seed] + [s.ref for s in self.steps]:
            if ref.rank not in seen:
                seen.append(ref.rank)
        return seen


@dataclass
class ScanState:
    scanned: Set[PpgVertexRef] = field(default_factory=set)

    def __contains__(self, ref: PpgVertexRef) -> bool:
        return ref in self.scanned

    def add(self, ref: PpgVertexRef):
        self.scanned.add(ref)


def _backward(view: PpgView, ref: PpgVertexRef) -> Optional[PpgEdge]:
    """DataDep edge, or the CtrlDep exit edge of a scope's first vertex."""
    for e in view.out_edges(ref, DATA_DEP):
        return e
    for e in view.out_edges(ref, CTRL_DEP):
        if e.role == "exit":
            return e
    return None


def _arm_time(ppg: PPG, rank: int, vids: Sequence[int]) -> float:
    return sum(ppg.time(rank, vid) for vid in vids)


def _descend(view: PpgView, ref: PpgVertexRef) -> Optional[PpgEdge]:
    """Body-end edge of a container, choosing the longer Branch arm (then-arm on ties)."""
    ppg = view.ppg
    v = ppg.psg.vertex(ref.vid)
    best, best_time = None, 0.0
    for e in view.out_edges(ref, CTRL_DEP):
        if e.role == "exit":
            continue
        arm = v.orelse if e.role == "else" else v.children
        t = _arm_time(ppg, ref.rank, arm)
        if t > best_time:
            best, best_time = e, t
    return best


def backtrack_from(v: PpgVertexRef, view: PpgView, state: ScanState, origin: str = "N",
                   first_hop: Optional[PpgEdge] = None) -> RootCausePath:
    """
    Walk backwards from `v`, adding every inserted vertex to `state`.

    Args:
        first_hop: edge leaving `v` to take first (collective seeds start
            at their predecessor instead of at the collective itself)
    """
    psg = view.ppg.psg
    steps: List[PathStep] = []
    on_path: Set[PpgVertexRef] = set()
    alternates: List[AlternateHop] = []
    cause: Optional[PpgVertexRef] = None

    if first_hop is not None:
        cur, kind, role = first_hop.dst, first_hop.kind, first_hop.role
    else:
        cur, kind, role = v, "", ""

    while True:
        vertex = psg.vertex(cur.vid)
        if cur.vid == psg.root:
            reason = ROOT
            break
        if vertex.is_collective:
            reason = COLLECTIVE
            break
        if cur in on_path or (cur in state and not vertex.is_container):
            reason = SCANNED
            break

        first_visit = cur not in state
        steps.append(PathStep(cur, kind, role))
        on_path.add(cur)
        state.add(cur)
        if not vertex.is_container:
            cause = cur

        nxt: Optional[PpgEdge] = None
        if vertex.kind == VertexKind.MPI:
            surviving = view.out_edges(cur, COMM_DEP)
            comm = [e for e in surviving if e.dst not in state]
            if surviving and not comm:
                reason = SCANNED
                break
            if comm:
                comm.sort(key=lambda e: (-e.wait_us, e.dst, e.role))
                nxt = comm[0]
                alternates.extend(AlternateHop(cur, e.dst, e.wait_us) for e in comm[1:])
        if nxt is None and vertex.is_container and first_visit:
            nxt = _descend(view, cur)
        if nxt is None:
            nxt = _backward(view, cur)
        if nxt is None:
            reason = NO_EDGE
            break
        cur, kind, role = nxt.dst, nxt.kind, nxt.role

    return RootCausePath(v, tuple(steps), reason, origin, tuple(alternates), cause=cause)


def _collective_starts(view: PpgView, vid: int, cfg: DetectionConfig) -> List[int]:
    """Ranks that arrived late at a collective seed."""
    ppg = view.ppg
    groups = ppg.collectives_at(vid)
    worst: Optional[CollectiveGroup] = worst_collectives(groups).get(vid)
    if worst is not None and worst.arrivals:
        ranks, arrivals = list(worst.ranks), np.asarray(worst.arrivals, dtype=np.float64)
    else:
        # no arrival timeline: the rank that waited least arrived last
        ranks = list(range(ppg.nprocs))
        waits = np.asarray([ppg.wait(r, vid) for r in ranks], dtype=np.float64)
        arrivals = waits.max() - waits
    if arrivals.size == 0:
        return []
    median = float(np.median(arrivals))
    late = [r for r, a in zip(ranks, arrivals) if a > cfg.abnorm_thd * median]
    if not late and arrivals.max() > arrivals.min():
        late = [ranks[int(np.argmax(arrivals))]]
    return late


def _walks_from(seed_vid: int, rank: int, view: PpgView, state: ScanState, cfg: DetectionConfig,
                origin: str, notes: List[str]) -> List[RootCausePath]:
    ppg = view.ppg
    vertex = ppg.psg.vertex(seed_vid)
    if not vertex.is_collective:
        seed = PpgVertexRef(rank, seed_vid)
        if seed in state:
            notes.append(f"seed {vertex.describe()} on rank {rank} skipped: already scanned")
            return []
        return [backtrack_from(seed, view, state, origin)]

    late = _collective_starts(view, seed_vid, cfg)
    if not late:
        return [RootCausePath(PpgVertexRef(rank, seed_vid), (), COLLECTIVE, origin)]
    paths = []
    for r in late:
        seed = PpgVertexRef(r, seed_vid)
        hop = _backward(view, seed)
        if hop is None:
            paths.append(RootCausePath(seed, (), NO_EDGE, origin))
            continue
        if hop.dst in state and not ppg.psg.vertex(hop.dst.vid).is_container:
            notes.append(f"seed {vertex.describe()} on rank {r} skipped: predecessor already scanned")
            continue
        paths.append(backtrack_from(seed, view, state, origin, first_hop=hop))
    return paths


def _slowest_rank(ppg: PPG, vid: int) -> int:
    times = ppg.times(vid)
    return int(np.argmax(times)) if times else 0


def walk_seeds(view: PpgView, N: Sequence[NonScalableVertex], A: Sequence[AbnormalVertex],
                   cfg: DetectionConfig, notes: Optional[List[str]] = None) -> List[RootCausePath]:
    """
    All root-cause paths, N seeds first (in the given order), then A seeds not yet scanned.

    A non-collective N vertex is walked from the rank where it took
    longest. A collective seed (from N or A) spawns one walk per late
    participant, each starting at that rank's predecessor of the
    collective.
    """
    notes = notes if notes is not None else []
    state = ScanState()
    paths: List[RootCausePath] = []
    for n in N:
        paths.extend(_walks_from(n.vid, _slowest_rank(view.ppg, n.vid), view, state, cfg, "N", notes))
    for a in A:
        if PpgVertexRef(a.rank, a.vid) in state:
            continue
        paths.extend(_walks_from(a.vid, a.rank, view, state, cfg, "A", notes))
    return paths


def terminal_imbalance(ppg: PPG, vid: int, floor: float) -> Tuple[float, float, int]:
    """
    (max time, max / median, slowest rank) of a vertex over the ranks that executed it.

    A zero median falls back to the mean, then to `floor`.
    """
    ranks = [r for r in range(ppg.nprocs) if ppg.perf_of(r, vid)]
    if not ranks:
        return 0.0, 1.0, -1
    times = np.asarray([ppg.time(r, vid) for r in ranks], dtype=np.float64)
    slowest = int(np.argmax(times))
    t_max = float(times[slowest])
    if t_max <= 0:
        return 0.0, 1.0, ranks[slowest]
    center = float(np.median(times)) or float(times.mean()) or floor
    return t_max, t_max / center, ranks[slowest]


def rank_paths(paths: Iterable[RootCausePath], ppg: PPG, cfg: DetectionConfig) -> List[RootCausePath]:
    """
    Score and sort paths.

    score = t x (t / median), where t is the terminal vertex's largest
    time over the ranks that executed it and the median runs over the
    same ranks. Equal scores put the path ending on the slowest rank
    first, then go to the terminal location and the seed.
    """
    floor = cfg.min_abs_us / 10.0
    scored, slowest = [], {}
    for p in paths:
        vid = p.terminal.vid
        t, imbalance, slowest[vid] = terminal_imbalance(ppg, vid, floor)
        scored.append(replace(p, score=t * imbalance, terminal_time_us=t, imbalance=imbalance))

    def key(p: RootCausePath):
        loc = ppg.psg.vertex(p.terminal.vid).loc
        return (-p.score, p.terminal.rank != slowest[p.terminal.vid], loc.file, loc.line, loc.last_line,
                p.seed.rank, p.seed.vid)

    return sorted(scored, key=key)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathReport:
    paths: Tuple[RootCausePath, ...]
    run_id: str
    psg_hash: str
    wait_threshold_us: float
    config: DetectionConfig
    notes: Tuple[str, ...] = ()
    locations: Dict[int, str] = field(default_factory=dict)
    kinds: Dict[int, str] = field(default_factory=dict)


HEADER_NOTES = (
    "non-scalable seeds are processed in slope-rank order, then abnormal seeds",
    "seeds already scanned by an earlier walk are skipped",
)


def find_root_causes(ppg: PPG, problems: ProblemSet, wait_threshold_us: float = 0.0,
                     cfg: Optional[DetectionConfig] = None) -> PathReport:
    """Prune, walk and rank; the whole backtracking step."""
    cfg = cfg or problems.config
    if problems.psg_hash and problems.psg_hash != ppg.psg_hash:
        raise ProfileFormatError("detection report and PPG come from different PSGs")
    view = prune_comm_edges(ppg, wait_threshold_us)
    notes: List[str] = list(HEADER_NOTES)
    paths = rank_paths(walk_seeds(view, problems.nonscalable, problems.abnormal, cfg, notes), ppg, cfg)
    logger.info("Backtracking produced %d path(s) over %d surviving CommDep edge(s)",
                len(paths), len(view.comm_edges()))
    psg = ppg.psg
    return PathReport(tuple(paths), ppg.run_id, ppg.psg_hash, wait_threshold_us, cfg, tuple(notes),
                      {v.id: str(v.loc) for v in psg.vertices}, {v.id: v.kind_name for v in psg.vertices})


def _ref_dict(ref: PpgVertexRef, report: PathReport) -> Dict:
    return {"rank": ref.rank, "vertex": ref.vid, "loc": report.locations.get(ref.vid, ""),
            "kind": report.kinds.get(ref.vid, "")}


def report_to_dict(report: PathReport) -> Dict:
    paths = []
    for p in report.paths:
        paths.append({
            "seed": _ref_dict(p.seed, report),
            "origin": p.origin,
            "steps": [dict(_ref_dict(s.ref, report), via=s.kind, role=s.role) for s in p.steps],
            "terminal": _ref_dict(p.terminal, report),
            "cause": _ref_dict(p.cause, report) if p.cause is not None else None,
            "reason": p.reason,
            "score": p.score,
            "terminal_time_us": p.terminal_time_us,
            "imbalance": p.imbalance,
            "alternates": [{"at": a.at.to_list(), "to": a.to.to_list(), "wait_us": a.wait_us} for a in p.alternates],
        })
    return {
        "header": {"run_id": report.run_id, "psg_hash": report.psg_hash,
                   "wait_threshold_us": report.wait_threshold_us, "config": report.config.to_dict(),
                   "notes": list(report.notes)},
        "paths": paths,
    }


def report_from_dict(doc: Dict) -> PathReport:
    try:
        header = doc["header"]
        locations: Dict[int, str] = {}
        kinds: Dict[int, str] = {}
        paths = []

        def ref(d: Dict) -> PpgVertexRef:
            locations[int(d["vertex"])] = d.get("loc", "")
            kinds[int(d["vertex"])] = d.get("kind", "")
            return PpgVertexRef(int(d["rank"]), int(d["vertex"]))

        for p in doc["paths"]:
            steps = tuple(PathStep(ref(s), s.get("via", ""), s.get("role", "")) for s in p["steps"])
            cause = ref(p["cause"]) if p.get("cause") else None
            alternates = tuple(AlternateHop(PpgVertexRef.from_list(a["at"]), PpgVertexRef.from_list(a["to"]),
                                            float(a["wait_us"])) for a in p.get("alternates", ()))
            paths.append(RootCausePath(ref(p["seed"]), steps, p["reason"], p.get("origin", "N"), alternates,
                                       float(p["score"]), float(p.get("terminal_time_us", 0.0)),
                                       float(p.get("imbalance", 1.0)), cause))
        return PathReport(tuple(paths), header["run_id"], header.get("psg_hash", ""),
                          float(header.get("wait_threshold_us", 0.0)), DetectionConfig(**header.get("config", {})),
                          tuple(header.get("notes", ())), locations, kinds)
    except (KeyError, TypeError, ValueError) as e:
        raise ProfileFormatError(f"malformed path report: {e!r}")


def report_json(report: PathReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def load_report(path: str) -> PathReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return report_from_dict(json.load(f))
    except json.JSONDecodeError as e:
        raise ProfileFormatError(f"invalid path report JSON: {e}", path=str(path))


def paths_to_dot(ppg: PPG, report: PathReport, top: int = len(PATH_COLORS)) -> str:
    """The PPG drawing with the top paths overlaid as colored arrows (seed towards terminal)."""
    overlay = []
    for i, p in enumerate(report.paths[:top]):
        color = PATH_COLORS[i % len(PATH_COLORS)]
        chain = [p.seed] + [s.ref for s in p.steps]
        overlay.extend((a, b, color) for a, b in zip(chain, chain[1:]) if a != b)
    return ppg_to_dot(ppg, overlay, min_wait_us=report.wait_threshold_us)
