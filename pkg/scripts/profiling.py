"""
Profile data: per-vertex performance vectors and communication records.

A ProfileSet holds one run (one process count). Communication records
can be compressed per (rank, vertex): repeats of the same parameters
collapse into one representative that remembers where its occurrences
sat in the rank's program order, so decompression is exact.
Non-blocking requests are resolved the way a request converter in a
PMPI layer does it: the post stores (peer, tag) under its request slot
and the matching wait inherits them.
"""

import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from errors import ProfileFormatError, ResolutionError
from sketch import ANY_SOURCE, MpiKind

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_WAIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PerfVector:
    time_us: float
    wait_us: Optional[float] = None
    counters: Dict[str, int] = field(default_factory=dict)
    samples: int = 1

    def __post_init__(self):
        if self.time_us < 0:
            raise ValueError(f"negative time_us {self.time_us}")
        if self.wait_us is not None:
            if self.wait_us < 0:
                raise ValueError(f"negative wait_us {self.wait_us}")
            if self.wait_us > self.time_us + _WAIT_TOLERANCE * max(1.0, self.time_us):
                raise ValueError(f"wait_us {self.wait_us} exceeds time_us {self.time_us}")

    def combine(self, other: "PerfVector") -> "PerfVector":
        """Sum times, counters and samples; keep the larger wait."""
        counters = dict(self.counters)
        for name, value in other.counters.items():
            counters[name] = counters.get(name, 0) + value
        waits = [w for w in (self.wait_us, other.wait_us) if w is not None]
        return PerfVector(self.time_us + other.time_us, max(waits) if waits else None,
                          counters, self.samples + other.samples)


@dataclass(frozen=True)
class ProfileRecord:
    run_id: str
    nprocs: int
    rank: int
    vertex_id: int
    context: Tuple[int, ...]
    perf: PerfVector


@dataclass(frozen=True)
class CommEvent:
    """
    One communication operation as seen by one rank.

    `peer`/`tag` are the posted parameters (peer -1 is AnySource); a Wait
    carries the completion status of its request there. `order` is the
    per-rank program-order index over all communication events and `seq`
    the occurrence index at this vertex. Sendrecv emits a "send" and a
    "recv" leg. Compressed representatives have count > 1 and keep the
    orders of every occurrence as (start, stride, count) segments.
    """
    run_id: str
    rank: int
    vertex_id: int
    kind: MpiKind
    peer: int = ANY_SOURCE
    tag: int = 0
    size: int = 0
    seq: int = 0
    order: int = 0
    request: Optional[str] = None
    leg: Optional[str] = None
    resolved_peer: Optional[int] = None
    resolved_tag: Optional[int] = None
    post_vertex: Optional[int] = None
    post_kind: Optional[MpiKind] = None
    post_order: Optional[int] = None
    arrival_us: Optional[float] = None
    count: int = 1
    orders: Tuple[Tuple[int, int, int], ...] = ()
    arrivals: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.request is not None and (self.kind.is_blocking_p2p or self.kind.is_collective):
            raise ValueError(f"blocking {self.kind.value} event cannot carry a request slot")

    @property
    def key(self) -> Tuple:
        """Parameters that make two occurrences interchangeable."""
        return (self.kind.value, self.leg, self.peer, self.tag, self.size, self.request,
                self.resolved_peer, self.resolved_tag)

    @property
    def is_send_side(self) -> bool:
        if self.kind == MpiKind.SENDRECV:
            return self.leg == "send"
        if self.kind.is_wait:
            return self.post_kind == MpiKind.ISEND
        return self.kind in (MpiKind.SEND, MpiKind.ISEND)

    @property
    def effective_peer(self) -> int:
        return self.resolved_peer if self.resolved_peer is not None else self.peer

    @property
    def effective_tag(self) -> int:
        return self.resolved_tag if self.resolved_tag is not None else self.tag


@dataclass(frozen=True)
class ProfileSet:
    run_id: str
    nprocs: int
    records: Tuple[ProfileRecord, ...] = ()
    comm: Tuple[CommEvent, ...] = ()
    seed: Optional[int] = None
    scenario: Optional[str] = None
    psg_hash: Optional[str] = None

    def header(self) -> Dict:
        data = {"t": "run", "run_id": self.run_id, "P": self.nprocs, "schema": SCHEMA_VERSION}
        for name in ("seed", "scenario", "psg_hash"):
            if getattr(self, name) is not None:
                data[name] = getattr(self, name)
        return data


def sampling_gate(rate: float, rng: random.Random) -> bool:
    """True with probability `rate`; deterministic for a seeded rng."""
    if not 0 <= rate <= 1:
        raise ValueError(f"sampling rate must be in [0, 1], got {rate}")
    return rng.random() < rate


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------

def _segments(orders: Sequence[int]) -> Tuple[Tuple[int, int, int], ...]:
    segs: List[List[int]] = []
    for o in orders:
        if segs:
            start, stride, count = segs[-1]
            if count == 1:
                segs[-1] = [start, o - start, 2]
                continue
            if o == start + stride * count:
                segs[-1][2] += 1
                continue
        segs.append([o, 0, 1])
    return tuple(tuple(s) for s in segs)


def _expand_segments(segs: Iterable[Tuple[int, int, int]]) -> List[int]:
    out = []
    for start, stride, count in segs:
        out.extend(start + stride * i for i in range(count))
    return out


def compress_comm(events: Iterable[CommEvent]) -> List[CommEvent]:
    """
    Collapse repeated communication parameters per (rank, vertex).

    First occurrences keep their relative order; every representative
    records count, occurrence orders and (for collectives) arrivals.
    """
    groups: Dict[Tuple, List[CommEvent]] = {}
    for ev in events:
        for raw in _expand(ev):
            groups.setdefault((raw.rank, raw.vertex_id, raw.key), []).append(raw)

    out = []
    for members in groups.values():
        first = members[0]
        arrivals = tuple(m.arrival_us for m in members) if first.kind.is_collective else ()
        out.append(replace(first, count=len(members), orders=_segments([m.order for m in members]),
                           arrivals=arrivals if any(a is not None for a in arrivals) else ()))
    out.sort(key=lambda e: (e.rank, e.order))
    return out


def _expand(ev: CommEvent) -> List[CommEvent]:
    if ev.count == 1 and not ev.orders:
        return [ev]
    orders = _expand_segments(ev.orders) if ev.orders else [ev.order]
    if len(orders) != ev.count:
        raise ProfileFormatError(f"compressed event at rank {ev.rank} vertex {ev.vertex_id} "
                                 f"has count {ev.count} but {len(orders)} orders")
    arrivals = list(ev.arrivals) if ev.arrivals else [ev.arrival_us] * ev.count
    return [replace(ev, order=o, arrival_us=a, count=1, orders=(), arrivals=())
            for o, a in zip(orders, arrivals)]


def decompress_comm(events: Iterable[CommEvent]) -> List[CommEvent]:
    """Inverse of compress_comm; seq is renumbered per (rank, vertex) in program order."""
    raw: List[CommEvent] = []
    for ev in events:
        raw.extend(_expand(ev))
    raw.sort(key=lambda e: (e.rank, e.order, e.leg or ""))
    seqs: Dict[Tuple[int, int, Optional[str]], int] = defaultdict(int)
    out = []
    for ev in raw:
        k = (ev.rank, ev.vertex_id, ev.leg)
        out.append(replace(ev, seq=seqs[k]))
        seqs[k] += 1
    return out


# ---------------------------------------------------------------------------
# Non-blocking resolution
# ---------------------------------------------------------------------------

def resolve_nonblocking(events: Iterable[CommEvent]) -> List[CommEvent]:
    """
    Fill resolved_peer/resolved_tag and the post link of every event.

    Posts register under their request slot; each Wait event (Waitall
    contributes one per slot) consumes the slot and inherits the posted
    (peer, tag), falling back to its completion status when the post used
    AnySource. Works per rank on program order, so it is idempotent and
    independent of how ranks are interleaved.

    Raises:
        ResolutionError: wait on a never-posted slot, double wait, or an
            AnySource receive with no completion status
    """
    by_rank: Dict[int, List[CommEvent]] = defaultdict(list)
    for ev in decompress_comm(events):
        by_rank[ev.rank].append(ev)

    out: List[CommEvent] = []
    for rank in sorted(by_rank):
        pending: Dict[str, CommEvent] = {}
        consumed = set()
        for ev in by_rank[rank]:
            if ev.kind.is_nonblocking:
                if ev.request in pending:
                    raise ResolutionError(f"rank {rank}: request slot '{ev.request}' posted again before its wait",
                                          rank=rank, slot=ev.request, vertex=ev.vertex_id)
                pending[ev.request] = ev
                consumed.discard(ev.request)
                out.append(replace(ev, post_vertex=ev.vertex_id, post_kind=ev.kind, post_order=ev.order))
            elif ev.kind.is_wait:
                post = pending.pop(ev.request, None)
                if post is None:
                    what = "double wait on" if ev.request in consumed else "wait on unknown"
                    raise ResolutionError(f"rank {rank}: {what} request slot '{ev.request}'",
                                          rank=rank, slot=ev.request, vertex=ev.vertex_id)
                consumed.add(ev.request)
                peer = post.peer if post.peer != ANY_SOURCE else ev.peer
                if peer == ANY_SOURCE:
                    peer = ev.resolved_peer if ev.resolved_peer is not None else ANY_SOURCE
                if peer == ANY_SOURCE:
                    raise ResolutionError(f"rank {rank}: AnySource request '{ev.request}' completed without a status",
                                          rank=rank, slot=ev.request, vertex=ev.vertex_id)
                out.append(replace(ev, resolved_peer=peer, resolved_tag=post.tag, post_vertex=post.vertex_id,
                                   post_kind=post.kind, post_order=post.order))
            elif ev.kind.is_blocking_p2p:
                peer = ev.resolved_peer if ev.resolved_peer is not None else ev.peer
                if peer == ANY_SOURCE:
                    raise ResolutionError(f"rank {rank}: AnySource receive at vertex {ev.vertex_id} has no status",
                                          rank=rank, vertex=ev.vertex_id)
                out.append(replace(ev, resolved_peer=peer, resolved_tag=ev.effective_tag,
                                   post_vertex=ev.vertex_id, post_kind=ev.kind, post_order=ev.order))
            else:
                out.append(ev)
        if pending:
            logger.warning("Rank %d: %d request(s) never waited on: %s",
                           rank, len(pending), ", ".join(sorted(pending)))
    return out


# ---------------------------------------------------------------------------
# Wait estimation
# ---------------------------------------------------------------------------

def estimate_wait(records: Iterable[ProfileRecord]) -> Tuple[List[ProfileRecord], int]:
    """
    Fill missing wait_us as max(0, time_us - min over ranks at the same vertex).

    Returns:
        (records, number of estimated values)
    """
    records = list(records)
    floor: Dict[Tuple[int, Tuple[int, ...]], float] = {}
    for r in records:
        k = (r.vertex_id, r.context)
        floor[k] = min(floor.get(k, r.perf.time_us), r.perf.time_us)

    out, estimated = [], 0
    for r in records:
        if r.perf.wait_us is None:
            wait = max(0.0, r.perf.time_us - floor[(r.vertex_id, r.context)])
            r = replace(r, perf=replace(r.perf, wait_us=wait))
            estimated += 1
        out.append(r)
    if estimated:
        logger.warning("Estimated wait_us for %d record(s) from cross-rank time spread", estimated)
    return out, estimated


# ---------------------------------------------------------------------------
# JSON-lines storage
# ---------------------------------------------------------------------------

def _perf_line(r: ProfileRecord) -> Dict:
    data = {"t": "perf", "rank": r.rank, "vertex": r.vertex_id, "context": list(r.context),
            "time_us": r.perf.time_us, "samples": r.perf.samples}
    if r.perf.wait_us is not None:
        data["wait_us"] = r.perf.wait_us
    if r.perf.counters:
        data["counters"] = dict(sorted(r.perf.counters.items()))
    return data


_COMM_OPTIONAL = ("request", "leg", "resolved_peer", "resolved_tag", "post_vertex", "post_order", "arrival_us")


def _comm_line(e: CommEvent) -> Dict:
    data = {"t": "comm", "rank": e.rank, "vertex": e.vertex_id, "kind": e.kind.value, "peer": e.peer,
            "tag": e.tag, "size": e.size, "seq": e.seq, "order": e.order}
    for name in _COMM_OPTIONAL:
        if getattr(e, name) is not None:
            data[name] = getattr(e, name)
    if e.post_kind is not None:
        data["post_kind"] = e.post_kind.value
    if e.count != 1 or e.orders:
        data["count"] = e.count
        data["orders"] = [list(s) for s in e.orders]
    if e.arrivals:
        data["arrivals"] = list(e.arrivals)
    return data


def profile_lines(profile: ProfileSet) -> List[str]:
    lines = [json.dumps(profile.header(), sort_keys=True)]
    for r in sorted(profile.records, key=lambda r: (r.rank, r.vertex_id, r.context)):
        lines.append(json.dumps(_perf_line(r), sort_keys=True))
    for e in profile.comm:
        lines.append(json.dumps(_comm_line(e), sort_keys=True))
    return lines


def store_profiles(profile: ProfileSet, path: Union[str, Path]):
    """Write one run as JSON-lines; records sorted, comm events in stored order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(profile_lines(profile)) + "\n", encoding="utf-8")
    tmp.replace(path)


def _record_from(data: Dict, header: Dict) -> ProfileRecord:
    perf = PerfVector(float(data["time_us"]),
                      float(data["wait_us"]) if data.get("wait_us") is not None else None,
                      {str(k): int(v) for k, v in data.get("counters", {}).items()},
                      int(data.get("samples", 1)))
    return ProfileRecord(header["run_id"], int(header["P"]), int(data["rank"]), int(data["vertex"]),
                         tuple(int(c) for c in data.get("context", ())), perf)


def _event_from(data: Dict, header: Dict) -> CommEvent:
    opt = {name: data[name] for name in _COMM_OPTIONAL if name in data}
    if "arrival_us" in opt:
        opt["arrival_us"] = float(opt["arrival_us"])
    return CommEvent(
        run_id=header["run_id"], rank=int(data["rank"]), vertex_id=int(data["vertex"]),
        kind=MpiKind(data["kind"]), peer=int(data["peer"]), tag=int(data["tag"]), size=int(data["size"]),
        seq=int(data["seq"]), order=int(data["order"]),
        post_kind=MpiKind(data["post_kind"]) if "post_kind" in data else None,
        count=int(data.get("count", 1)), orders=tuple(tuple(int(x) for x in s) for s in data.get("orders", ())),
        arrivals=tuple(float(a) for a in data.get("arrivals", ())), **opt)


def _read_runs(paths: Sequence[Union[str, Path]]) -> Dict[str, Dict]:
    runs: Dict[str, Dict] = {}
    for path in paths:
        header = None
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                    t = data["t"]
                    if t == "run":
                        if data.get("schema") != SCHEMA_VERSION:
                            raise ProfileFormatError(f"unsupported schema {data.get('schema')!r}",
                                                     path=str(path), line=lineno)
                        header = data
                        run = runs.get(data["run_id"])
                        if run is None:
                            runs[data["run_id"]] = {"header": data, "records": [], "comm": []}
                        elif int(run["header"]["P"]) != int(data["P"]):
                            raise ProfileFormatError(
                                f"run '{data['run_id']}' has P={data['P']} but was declared with "
                                f"P={run['header']['P']}", path=str(path), line=lineno)
                        continue
                    if header is None:
                        raise ProfileFormatError("data line before the run header", path=str(path), line=lineno)
                    run = runs[header["run_id"]]
                    if t == "perf":
                        item = _record_from(data, header)
                        run["records"].append(item)
                    elif t == "comm":
                        item = _event_from(data, header)
                        run["comm"].append(item)
                    else:
                        raise ProfileFormatError(f"unknown line type {t!r}", path=str(path), line=lineno)
                    if not 0 <= item.rank < int(header["P"]):
                        raise ProfileFormatError(f"rank {item.rank} outside [0, {header['P']})",
                                                 path=str(path), line=lineno)
                except ProfileFormatError:
                    raise
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise ProfileFormatError(f"malformed line: {e}", path=str(path), line=lineno)
        if header is None:
            raise ProfileFormatError("missing run header", path=str(path), line=1)
    return runs


def _to_set(run: Dict) -> ProfileSet:
    h = run["header"]
    return ProfileSet(h["run_id"], int(h["P"]), tuple(run["records"]), tuple(run["comm"]),
                      h.get("seed"), h.get("scenario"), h.get("psg_hash"))


def load_runs(paths: Sequence[Union[str, Path]]) -> List[ProfileSet]:
    """Read any number of profile files; one ProfileSet per run_id, ordered by (P, run_id)."""
    runs = [_to_set(r) for r in _read_runs(paths).values()]
    return sorted(runs, key=lambda s: (s.nprocs, s.run_id))


def load_profiles(paths: Union[str, Path, Sequence[Union[str, Path]]]) -> ProfileSet:
    """Read the files of exactly one run."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    runs = load_runs(paths)
    if len(runs) != 1:
        raise ProfileFormatError(f"expected one run, found {len(runs)}: "
                                 f"{', '.join(r.run_id for r in runs)}")
    return runs[0]
