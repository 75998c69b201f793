"""
Program Performance Graph (PPG).

The contracted PSG is replicated once per rank; each replica vertex
carries the rank's aggregated PerfVector. Edges are stored in dependence
direction (already reversed for backtracking):

- DataDep:  vertex -> its previous sibling
- CtrlDep:  Loop/Branch/CallSite -> last vertex of its body (one edge per
            Branch arm, role "then"/"else"); a scope's first vertex ->
            the vertex preceding the enclosing structure (role "exit")
- CommDep:  receiver's waiting vertex -> sender's posting vertex (role
            "recv"); optionally sender's waiting vertex -> receiver's
            posting vertex (role "send")

Collectives are not expanded into cliques; they become CollectiveGroups.
"""

import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from dot import DotWriter, heat_color, node_name
from errors import CollectiveMismatchError, MatchError, ProfileFormatError
from profiling import CommEvent, PerfVector, ProfileRecord, ProfileSet, estimate_wait, resolve_nonblocking
from psg import PSG, VertexKind, psg_from_dict, psg_hash, psg_to_dict
from sketch import MpiKind

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DATA_DEP = "DataDep"
CTRL_DEP = "CtrlDep"
COMM_DEP = "CommDep"
EDGE_KINDS = (DATA_DEP, CTRL_DEP, COMM_DEP)


@dataclass(frozen=True, order=True)
class PpgVertexRef:
    rank: int
    vid: int
    context: Tuple[int, ...] = ()

    def __str__(self):
        return f"{self.vid}@rank{self.rank}"

    def to_list(self) -> List:
        return [self.rank, self.vid] + ([list(self.context)] if self.context else [])

    @classmethod
    def from_list(cls, data: Sequence) -> "PpgVertexRef":
        return cls(int(data[0]), int(data[1]), tuple(data[2]) if len(data) > 2 else ())


@dataclass(frozen=True)
class TemplateEdge:
    kind: str
    src: int
    dst: int
    role: str = ""


@dataclass(frozen=True)
class PpgEdge:
    kind: str
    src: PpgVertexRef
    dst: PpgVertexRef
    role: str = ""
    wait_us: float = 0.0
    count: int = 1

    @property
    def sort_key(self) -> Tuple:
        return (EDGE_KINDS.index(self.kind), self.src, self.dst, self.role)

    def to_dict(self) -> Dict:
        data = {"kind": self.kind, "src": self.src.to_list(), "dst": self.dst.to_list()}
        if self.role:
            data["role"] = self.role
        if self.kind == COMM_DEP:
            data["wait_us"] = self.wait_us
            data["count"] = self.count
        return data

    @classmethod
    def from_dict(cls, d: Dict) -> "PpgEdge":
        return cls(d["kind"], PpgVertexRef.from_list(d["src"]), PpgVertexRef.from_list(d["dst"]),
                   d.get("role", ""), float(d.get("wait_us", 0.0)), int(d.get("count", 1)))


@dataclass(frozen=True)
class CollectiveGroup:
    vertex_id: int
    occurrence: int
    kind: MpiKind
    ranks: Tuple[int, ...]
    arrivals: Optional[Tuple[float, ...]] = None

    @property
    def spread(self) -> float:
        return max(self.arrivals) - min(self.arrivals) if self.arrivals else 0.0

    @property
    def latest_rank(self) -> Optional[int]:
        """Rank with the largest arrival; lowest rank on ties."""
        if not self.arrivals:
            return None
        latest = max(self.arrivals)
        return next(r for r, a in zip(self.ranks, self.arrivals) if a == latest)

    def arrival_of(self, rank: int) -> Optional[float]:
        if not self.arrivals:
            return None
        return self.arrivals[self.ranks.index(rank)]

    def to_dict(self) -> Dict:
        data = {"vertex": self.vertex_id, "occurrence": self.occurrence, "kind": self.kind.value,
                "ranks": list(self.ranks)}
        if self.arrivals is not None:
            data["arrivals"] = list(self.arrivals)
        return data

    @classmethod
    def from_dict(cls, d: Dict) -> "CollectiveGroup":
        arrivals = d.get("arrivals")
        return cls(int(d["vertex"]), int(d["occurrence"]), MpiKind(d["kind"]), tuple(d["ranks"]),
                   tuple(float(a) for a in arrivals) if arrivals is not None else None)


@dataclass(frozen=True)
class MatchedPair:
    sender: int
    receiver: int
    tag: int
    send_order: int
    recv_order: int
    send_post: int
    send_wait: int
    recv_post: int
    recv_wait: int


@dataclass(frozen=True)
class MatchResult:
    pairs: Tuple[MatchedPair, ...]
    edges: Tuple[PpgEdge, ...]
    unmatched: Tuple[Dict, ...]


@dataclass(frozen=True)
class PPG:
    run_id: str
    nprocs: int
    psg: PSG
    perf: Dict[Tuple[int, int], PerfVector]
    edges: Tuple[PpgEdge, ...]
    collectives: Tuple[CollectiveGroup, ...] = ()
    unmatched: Tuple[Dict, ...] = ()
    contexts: Dict[Tuple[int, int], Tuple[Tuple[int, ...], ...]] = field(default_factory=dict)
    seed: Optional[int] = None
    scenario: Optional[str] = None
    estimated_wait: int = 0
    _out: Dict[PpgVertexRef, List[PpgEdge]] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        out: Dict[PpgVertexRef, List[PpgEdge]] = defaultdict(list)
        for e in self.edges:
            out[e.src].append(e)
        object.__setattr__(self, "_out", dict(out))

    @property
    def psg_hash(self) -> str:
        return psg_hash(self.psg)

    def refs(self) -> Iterator[PpgVertexRef]:
        for rank in range(self.nprocs):
            for v in self.psg.vertices:
                yield PpgVertexRef(rank, v.id)

    def perf_of(self, rank: int, vid: int) -> Optional[PerfVector]:
        return self.perf.get((rank, vid))

    def time(self, rank: int, vid: int) -> float:
        p = self.perf.get((rank, vid))
        return p.time_us if p else 0.0

    def wait(self, rank: int, vid: int) -> float:
        p = self.perf.get((rank, vid))
        return p.wait_us if p and p.wait_us is not None else 0.0

    def times(self, vid: int) -> List[float]:
        """Per-rank time of one PSG vertex, rank order."""
        return [self.time(r, vid) for r in range(self.nprocs)]

    def out_edges(self, ref: PpgVertexRef, kind: Optional[str] = None) -> List[PpgEdge]:
        edges = self._out.get(ref, [])
        return [e for e in edges if kind is None or e.kind == kind]

    def edges_of_kind(self, kind: str) -> List[PpgEdge]:
        return [e for e in self.edges if e.kind == kind]

    def collectives_at(self, vid: int) -> List[CollectiveGroup]:
        return [g for g in self.collectives if g.vertex_id == vid]


# ---------------------------------------------------------------------------
# Intra-process edges
# ---------------------------------------------------------------------------

def _arm(psg: PSG, parent: int, child: int) -> Tuple[int, ...]:
    p = psg.vertex(parent)
    return p.children if child in p.children else p.orelse


def derive_intra_edges(psg: PSG) -> List[TemplateEdge]:
    """Rank-independent DataDep/CtrlDep template; recursion back-edges are not part of it."""

    def entry_pred(vid: int) -> int:
        parent = psg.parent(vid)
        if parent is None:
            return vid
        arm = _arm(psg, parent, vid)
        i = arm.index(vid)
        if i > 0:
            return arm[i - 1]
        if parent == psg.root:
            return parent
        return entry_pred(parent)

    edges = []
    for v in psg.preorder():
        if v.id != psg.root:
            parent = psg.parent(v.id)
            arm = _arm(psg, parent, v.id)
            i = arm.index(v.id)
            if i > 0:
                edges.append(TemplateEdge(DATA_DEP, v.id, arm[i - 1]))
            else:
                target = parent if parent == psg.root else entry_pred(parent)
                edges.append(TemplateEdge(CTRL_DEP, v.id, target, "exit"))
        if v.id == psg.root or not v.is_container:
            continue
        if v.kind == VertexKind.BRANCH:
            if v.children:
                edges.append(TemplateEdge(CTRL_DEP, v.id, v.children[-1], "then"))
            if v.orelse:
                edges.append(TemplateEdge(CTRL_DEP, v.id, v.orelse[-1], "else"))
        elif v.children:
            edges.append(TemplateEdge(CTRL_DEP, v.id, v.children[-1], "body"))
    return edges


def instantiate(template: Iterable[TemplateEdge], rank: int) -> List[PpgEdge]:
    return [PpgEdge(t.kind, PpgVertexRef(rank, t.src), PpgVertexRef(rank, t.dst), t.role) for t in template]


# ---------------------------------------------------------------------------
# Communication edges
# ---------------------------------------------------------------------------

def match_p2p(events: Iterable[CommEvent], nprocs: int,
              perf: Optional[Dict[Tuple[int, int], PerfVector]] = None,
              sender_side: bool = False) -> MatchResult:
    """
    Pair resolved sends and receives per channel (sender, receiver, tag).

    The k-th send of a channel matches its k-th receive, both ordered by
    the rank-local order of their posts. Non-blocking operations are
    represented by their Wait events, which carry the post link.

    Returns:
        MatchResult; unequal channel counts are reported in `unmatched`
        and the matched prefix is kept

    Raises:
        MatchError: unresolved events or peers outside [0, nprocs)
    """
    perf = perf or {}
    sends: Dict[Tuple[int, int, int], List[Tuple[int, int, int]]] = defaultdict(list)
    recvs: Dict[Tuple[int, int, int], List[Tuple[int, int, int]]] = defaultdict(list)
    for ev in events:
        if ev.kind.is_collective or ev.kind.is_nonblocking:
            continue
        if ev.post_order is None or ev.post_vertex is None:
            raise MatchError(f"rank {ev.rank}: event at vertex {ev.vertex_id} is not resolved",
                             rank=ev.rank, vertex=ev.vertex_id)
        peer = ev.effective_peer
        if not 0 <= peer < nprocs:
            raise MatchError(f"rank {ev.rank}: peer {peer} outside [0, {nprocs}) at vertex {ev.vertex_id}",
                             rank=ev.rank, vertex=ev.vertex_id)
        unit = (ev.post_order, ev.post_vertex, ev.vertex_id)
        if ev.is_send_side:
            sends[(ev.rank, peer, ev.effective_tag)].append(unit)
        else:
            recvs[(peer, ev.rank, ev.effective_tag)].append(unit)

    pairs: List[MatchedPair] = []
    counts: Dict[Tuple[PpgVertexRef, PpgVertexRef, str], int] = defaultdict(int)
    unmatched: List[Dict] = []
    for chan in sorted(set(sends) | set(recvs)):
        sender, receiver, tag = chan
        s_units, r_units = sorted(sends.get(chan, [])), sorted(recvs.get(chan, []))
        for s, r in zip(s_units, r_units):
            pairs.append(MatchedPair(sender, receiver, tag, s[0], r[0], s[1], s[2], r[1], r[2]))
            counts[(PpgVertexRef(receiver, r[2]), PpgVertexRef(sender, s[1]), "recv")] += 1
            if sender_side:
                counts[(PpgVertexRef(sender, s[2]), PpgVertexRef(receiver, r[1]), "send")] += 1
        if len(s_units) != len(r_units):
            unmatched.append({"sender": sender, "receiver": receiver, "tag": tag,
                              "sends": len(s_units), "recvs": len(r_units)})
            logger.warning("Unmatched communication on channel %d -> %d tag %d: %d send(s), %d receive(s)",
                           sender, receiver, tag, len(s_units), len(r_units))

    edges = []
    for (src, dst, role), n in counts.items():
        p = perf.get((src.rank, src.vid))
        wait = p.wait_us if p is not None and p.wait_us is not None else 0.0
        edges.append(PpgEdge(COMM_DEP, src, dst, role, wait, n))
    edges.sort(key=lambda e: e.sort_key)
    return MatchResult(tuple(pairs), tuple(edges), tuple(unmatched))


def link_collectives(events: Iterable[CommEvent], nprocs: int, psg: Optional[PSG] = None) -> List[CollectiveGroup]:
    """
    One group per (collective vertex, occurrence) over all ranks.

    Raises:
        CollectiveMismatchError: ranks disagree on how often a collective ran
    """
    per: Dict[int, Dict[int, List[CommEvent]]] = defaultdict(lambda: defaultdict(list))
    for ev in events:
        if ev.kind.is_collective:
            per[ev.vertex_id][ev.rank].append(ev)

    groups = []
    for vid in sorted(per):
        counts = {r: len(per[vid].get(r, ())) for r in range(nprocs)}
        if len(set(counts.values())) > 1:
            where = psg.vertex(vid).describe() if psg is not None and vid < len(psg) else f"vertex {vid}"
            detail = ", ".join(f"rank {r}: {n}" for r, n in counts.items())
            raise CollectiveMismatchError(f"collective {where} ran a different number of times per rank ({detail})",
                                          vertex=vid, counts={str(r): n for r, n in counts.items()})
        streams = {r: sorted(evs, key=lambda e: e.order) for r, evs in per[vid].items()}
        for k in range(counts[0]):
            members = [streams[r][k] for r in range(nprocs)]
            arrivals = [m.arrival_us for m in members]
            groups.append(CollectiveGroup(
                vid, k, members[0].kind, tuple(range(nprocs)),
                tuple(arrivals) if all(a is not None for a in arrivals) else None))
    return groups


def worst_collectives(groups: Iterable[CollectiveGroup]) -> Dict[int, CollectiveGroup]:
    """Per collective vertex, the occurrence with the largest arrival spread (earliest on ties)."""
    worst: Dict[int, CollectiveGroup] = {}
    for g in groups:
        cur = worst.get(g.vertex_id)
        if cur is None or g.spread > cur.spread:
            worst[g.vertex_id] = g
    return worst


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def aggregate_records(records: Iterable[ProfileRecord]):
    """
    Fold records into one PerfVector per (rank, vertex).

    Records of the same vertex and context combine by sum of time and
    counters and max of wait; distinct contexts then add up.

    Returns:
        (perf by (rank, vid), contexts seen by (rank, vid))
    """
    same: Dict[Tuple[int, int, Tuple[int, ...]], PerfVector] = {}
    for r in records:
        k = (r.rank, r.vertex_id, r.context)
        same[k] = same[k].combine(r.perf) if k in same else r.perf

    perf: Dict[Tuple[int, int], PerfVector] = {}
    contexts: Dict[Tuple[int, int], List[Tuple[int, ...]]] = defaultdict(list)
    for (rank, vid, ctx), p in sorted(same.items()):
        contexts[(rank, vid)].append(ctx)
        cur = perf.get((rank, vid))
        if cur is None:
            perf[(rank, vid)] = p
            continue
        counters = dict(cur.counters)
        for name, value in p.counters.items():
            counters[name] = counters.get(name, 0) + value
        waits = [w for w in (cur.wait_us, p.wait_us) if w is not None]
        perf[(rank, vid)] = PerfVector(cur.time_us + p.time_us, sum(waits) if waits else None,
                                       counters, cur.samples + p.samples)
    return perf, {k: tuple(v) for k, v in contexts.items()}


def assemble_ppg(psg: PSG, profile: ProfileSet, sender_side: bool = True) -> PPG:
    """
    Build the PPG of one run.

    Raises:
        ProfileFormatError: the profile references another PSG or unknown vertices/ranks
        ResolutionError, MatchError, CollectiveMismatchError: from the sub-steps
    """
    if profile.psg_hash and profile.psg_hash != psg_hash(psg):
        raise ProfileFormatError(f"run '{profile.run_id}' was recorded against a different PSG")
    n = len(psg)
    for r in profile.records:
        if not 0 <= r.vertex_id < n or not 0 <= r.rank < profile.nprocs:
            raise ProfileFormatError(f"record (rank {r.rank}, vertex {r.vertex_id}) not in the PSG of "
                                     f"run '{profile.run_id}'")
    for e in profile.comm:
        if not 0 <= e.vertex_id < n or psg.vertex(e.vertex_id).kind != VertexKind.MPI:
            raise ProfileFormatError(f"comm event at vertex {e.vertex_id} does not name an MPI vertex")

    records = list(profile.records)
    estimated = 0
    if any(r.perf.wait_us is None for r in records):
        records, estimated = estimate_wait(records)
    perf, contexts = aggregate_records(records)

    events = resolve_nonblocking(profile.comm)
    match = match_p2p(events, profile.nprocs, perf, sender_side)
    groups = link_collectives(events, profile.nprocs, psg)

    template = derive_intra_edges(psg)
    edges: List[PpgEdge] = []
    for rank in range(profile.nprocs):
        edges.extend(instantiate(template, rank))
    edges.extend(match.edges)
    edges.sort(key=lambda e: e.sort_key)

    logger.info("Assembled PPG for %s: %d ranks x %d vertices, %d edges (%d CommDep), %d collective group(s)",
                profile.run_id, profile.nprocs, n, len(edges), len(match.edges), len(groups))
    return PPG(profile.run_id, profile.nprocs, psg, perf, tuple(edges), tuple(groups), match.unmatched,
               contexts, profile.seed, profile.scenario, estimated)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def ppg_to_dict(ppg: PPG) -> Dict:
    vertices = []
    for ref in ppg.refs():
        entry = {"rank": ref.rank, "id": ref.vid}
        p = ppg.perf_of(ref.rank, ref.vid)
        if p is not None:
            entry["time_us"] = p.time_us
            entry["samples"] = p.samples
            if p.wait_us is not None:
                entry["wait_us"] = p.wait_us
            if p.counters:
                entry["counters"] = dict(sorted(p.counters.items()))
            ctxs = ppg.contexts.get((ref.rank, ref.vid), ())
            if any(ctxs):
                entry["contexts"] = [list(c) for c in ctxs]
        vertices.append(entry)
    run = {"run_id": ppg.run_id, "P": ppg.nprocs, "psg_hash": ppg.psg_hash}
    if ppg.seed is not None:
        run["seed"] = ppg.seed
    if ppg.scenario is not None:
        run["scenario"] = ppg.scenario
    return {
        "version": SCHEMA_VERSION,
        "run": run,
        "psg": psg_to_dict(ppg.psg),
        "vertices": vertices,
        "edges": [e.to_dict() for e in ppg.edges],
        "collectives": [g.to_dict() for g in ppg.collectives],
        "unmatched": list(ppg.unmatched),
        "estimated_wait": ppg.estimated_wait,
    }


def ppg_from_dict(doc: Dict) -> PPG:
    if doc.get("version") != SCHEMA_VERSION:
        raise ProfileFormatError(f"unsupported PPG version {doc.get('version')!r}")
    try:
        run = doc["run"]
        psg = psg_from_dict(doc["psg"])
        perf, contexts = {}, {}
        for v in doc["vertices"]:
            if "time_us" not in v:
                continue
            key = (int(v["rank"]), int(v["id"]))
            perf[key] = PerfVector(float(v["time_us"]), float(v["wait_us"]) if "wait_us" in v else None,
                                   {str(k): int(c) for k, c in v.get("counters", {}).items()},
                                   int(v.get("samples", 1)))
            if "contexts" in v:
                contexts[key] = tuple(tuple(c) for c in v["contexts"])
        edges = tuple(PpgEdge.from_dict(e) for e in doc["edges"])
        groups = tuple(CollectiveGroup.from_dict(g) for g in doc.get("collectives", ()))
        ppg = PPG(run["run_id"], int(run["P"]), psg, perf, edges, groups, tuple(doc.get("unmatched", ())),
                  contexts, run.get("seed"), run.get("scenario"), int(doc.get("estimated_wait", 0)))
    except (KeyError, TypeError, ValueError) as e:
        raise ProfileFormatError(f"malformed PPG document: {e!r}")
    if run.get("psg_hash") and run["psg_hash"] != ppg.psg_hash:
        raise ProfileFormatError("PPG document's embedded PSG does not match its recorded hash")
    return ppg


def ppg_json(ppg: PPG) -> str:
    return json.dumps(ppg_to_dict(ppg), indent=2, sort_keys=True) + "\n"


def dump_ppg(ppg: PPG, path: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(ppg_json(ppg), encoding="utf-8")
    tmp.replace(path)


def load_ppg(path: str) -> PPG:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ProfileFormatError(f"invalid PPG JSON: {e}", path=str(path))
    return ppg_from_dict(doc)


# ---------------------------------------------------------------------------
# DOT
# ---------------------------------------------------------------------------

def ppg_to_dot(ppg: PPG, overlay: Sequence[Tuple[PpgVertexRef, PpgVertexRef, str]] = (),
               min_wait_us: float = 0.0) -> str:
    """
    Render the PPG with one column per rank.

    Args:
        overlay: extra (src, dst, color) arrows drawn on top, e.g. root-cause paths
        min_wait_us: CommDep edges with wait_us <= this are left out
    """
    order = [v.id for v in ppg.psg.preorder()]
    peak = max((p.time_us for (_, vid), p in ppg.perf.items() if vid != ppg.psg.root), default=0.0)
    buf = io.StringIO()
    w = DotWriter(buf)
    w.begin_graph("PPG")
    w.attr("graph", rankdir="TB", newrank=True, nodesep=0.3, ranksep=0.25)
    w.attr("node", shape="box", style="filled", fontname="Helvetica", fontsize=9)
    w.attr("edge", fontname="Helvetica", fontsize=8)
    for rank in range(ppg.nprocs):
        w.begin_cluster(f"rank{rank}", label=f"rank {rank}", color="#bbbbbb")
        for vid in order:
            v = ppg.psg.vertex(vid)
            t = ppg.time(rank, vid)
            label = f"{v.kind_name}\n{v.loc}\n{t:.1f}us"
            weight = t / peak if peak and vid != ppg.psg.root else 0.0
            w.node(node_name(rank, vid), label=label, fillcolor=heat_color(weight),
                   fontcolor="white" if weight >= 0.6 else "black")
        for e in ppg.edges:
            if e.kind != COMM_DEP and e.src.rank == rank:
                # drawn in execution direction
                w.edge(node_name(e.dst.rank, e.dst.vid), node_name(e.src.rank, e.src.vid),
                       color="#999999", style="dashed" if e.kind == CTRL_DEP else "solid", arrowsize=0.5)
        w.end_cluster()
    for e in ppg.edges:
        if e.kind == COMM_DEP and e.wait_us > min_wait_us:
            w.edge(node_name(e.src.rank, e.src.vid), node_name(e.dst.rank, e.dst.vid), color="#cb181d",
                   constraint=False, label=f"{e.wait_us:.0f}us")
    for src, dst, color in overlay:
        w.edge(node_name(src.rank, src.vid), node_name(dst.rank, dst.vid), color=color, penwidth=3,
               constraint=False)
    w.end_graph()
    return buf.getvalue()
