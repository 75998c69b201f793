"""
Deterministic discrete-event simulator for contracted PSGs.

Every rank is a generator that walks the PSG, advances its own virtual
clock through computation and yields at each MPI operation. The event
loop always serves the ready rank with the smallest (clock, rank), so
operations are posted in global virtual-time order.

Message model (rendezvous, no eager buffering):
- a matched send/receive pair completes for both sides at
  max(send post, receive post) + size * per_byte_us + latency_us;
- a blocking call waits for its own completion, a Wait for all of its
  requests' completions;
- a collective completes for everyone at max arrival + latency_us.

Time spent inside an MPI vertex is all wait. Container vertices
(Root, Loop, Branch, CallSite) report inclusive time and wait, so the
Root record of each rank equals its final clock.
"""

import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from errors import DeadlockError, ScenarioError, SimulationError, SketchError
from profiling import CommEvent, PerfVector, ProfileRecord, ProfileSet, sampling_gate
from psg import PSG, CostPart, StructureVertex, VertexKind, psg_hash
from sketch import ANY_SOURCE, Expr, MpiKind, eval_expr, format_expr, parse_expr, variables

logger = logging.getLogger(__name__)

READY, BLOCKED, DONE = "ready", "blocked", "done"


@dataclass(frozen=True)
class Injection:
    """Extra cost (µs) added to the Comp at `where` on ranks where `ranks` is nonzero."""
    where: str
    ranks: Expr
    cost: Expr


@dataclass(frozen=True)
class Scenario:
    nprocs: int
    seed: int = 0
    name: str = "run"
    injections: Tuple[Injection, ...] = ()
    latency_us: float = 0.0
    per_byte_us: float = 0.0
    counters: Dict[str, Dict[str, Expr]] = field(default_factory=dict)
    sampling_rate: float = 1.0
    max_recursion: int = 64

    def __post_init__(self):
        if self.nprocs < 1:
            raise ScenarioError(f"P must be >= 1, got {self.nprocs}")
        if self.latency_us < 0 or self.per_byte_us < 0:
            raise ScenarioError("link costs must be >= 0")
        if not 0 <= self.sampling_rate <= 1:
            raise ScenarioError(f"sampling_rate must be in [0, 1], got {self.sampling_rate}")
        if self.max_recursion < 1:
            raise ScenarioError("max_recursion must be >= 1")

    @property
    def run_id(self) -> str:
        return f"{self.name}-P{self.nprocs}"

    def at_scale(self, nprocs: int) -> "Scenario":
        """Same scenario at another process count; the seed is derived as seed XOR P."""
        return replace(self, nprocs=nprocs, seed=self.seed ^ nprocs)

    def to_dict(self) -> Dict:
        return {
            "P": self.nprocs,
            "seed": self.seed,
            "name": self.name,
            "injections": [{"where": i.where, "ranks": format_expr(i.ranks), "cost": format_expr(i.cost)}
                           for i in self.injections],
            "link": {"latency_us": self.latency_us, "per_byte_us": self.per_byte_us},
            "counters": {where: {name: format_expr(e) for name, e in rules.items()}
                         for where, rules in self.counters.items()},
            "sampling_rate": self.sampling_rate,
            "max_recursion": self.max_recursion,
        }


def _scenario_expr(value, what: str) -> Expr:
    try:
        return parse_expr(str(value))
    except SketchError as e:
        raise ScenarioError(f"bad {what} expression '{value}': {e.message}")


def scenario_from_dict(data: Dict, nprocs: Optional[int] = None) -> Scenario:
    """
    Build a Scenario from its JSON form.

    Args:
        data: {"P", "seed", "name", "injections": [{"where", "ranks", "cost"}],
               "link": {"latency_us", "per_byte_us"}, "counters": {where: {name: expr}},
               "sampling_rate", "max_recursion"}
        nprocs: overrides "P"
    """
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    try:
        P = int(nprocs if nprocs is not None else data["P"])
        link = data.get("link", {})
        injections = tuple(
            Injection(str(i["where"]), _scenario_expr(i.get("ranks", 1), "ranks"), _scenario_expr(i["cost"], "cost"))
            for i in data.get("injections", []))
        counters = {str(where): {str(name): _scenario_expr(e, "counter") for name, e in rules.items()}
                    for where, rules in data.get("counters", {}).items()}
        return Scenario(
            nprocs=P, seed=int(data.get("seed", 0)), name=str(data.get("name", "run")),
            injections=injections, latency_us=float(link.get("latency_us", 0.0)),
            per_byte_us=float(link.get("per_byte_us", 0.0)), counters=counters,
            sampling_rate=float(data.get("sampling_rate", 1.0)),
            max_recursion=int(data.get("max_recursion", 64)),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ScenarioError(f"malformed scenario: {e!r}")


def load_scenario(path: str, nprocs: Optional[int] = None) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ScenarioError(f"Scenario file not found: {path}")
    except json.JSONDecodeError as e:
        raise ScenarioError(f"Invalid JSON in {path}: {e}")
    scenario = scenario_from_dict(data, nprocs)
    if "name" not in data:
        scenario = replace(scenario, name=Path(path).stem)
    return scenario


def locate(psg: PSG, where: str, kind: Optional[VertexKind] = None) -> StructureVertex:
    """
    The innermost vertex at a "file:line" location.

    Raises:
        ScenarioError: malformed location, or no (matching) vertex there
    """
    try:
        matches = psg.find(where)
    except ValueError as e:
        raise ScenarioError(str(e))
    if kind is not None:
        matches = [v for v in matches if v.kind == kind]
    if not matches:
        what = f"{kind.value} vertex" if kind else "vertex"
        raise ScenarioError(f"no {what} at {where}", where=where)
    return min(matches, key=lambda v: (v.loc.last_line - v.loc.line, -v.id))


@lru_cache(maxsize=None)
def _uses_iter(parts: Tuple[CostPart, ...]) -> bool:
    for p in parts:
        if "iter" in variables(p.expr):
            return True
        if p.kind == "branch" and (_uses_iter(p.body) or _uses_iter(p.orelse)):
            return True
    return False


# ---------------------------------------------------------------------------
# Requests and matching
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Request:
    rank: int
    send: bool
    peer: int
    tag: int
    size: int
    time: float
    vertex: int
    slot: Optional[str] = None
    recorded: bool = True
    partner: Optional["_Request"] = None
    completion: Optional[float] = None


@dataclass(eq=False)
class _Op:
    vertex: StructureVertex
    posts: List[_Request] = field(default_factory=list)
    waits: List[_Request] = field(default_factory=list)
    collective: bool = False


class _Matcher:
    """MPI matching: per destination, unmatched sends and receives in posting order."""

    def __init__(self, latency_us: float, per_byte_us: float):
        self.latency_us = latency_us
        self.per_byte_us = per_byte_us
        self.sends: Dict[int, List[_Request]] = defaultdict(list)
        self.recvs: Dict[int, List[_Request]] = defaultdict(list)

    def post(self, req: _Request):
        if req.send:
            queue = self.recvs[req.peer]
            for i, r in enumerate(queue):
                if r.tag == req.tag and r.peer in (ANY_SOURCE, req.rank):
                    del queue[i]
                    self._pair(req, r)
                    return
            self.sends[req.peer].append(req)
            return

        queue = self.sends[req.rank]
        candidates = [(i, s) for i, s in enumerate(queue)
                      if s.tag == req.tag and req.peer in (ANY_SOURCE, s.rank)]
        if not candidates:
            self.recvs[req.rank].append(req)
            return
        if req.peer == ANY_SOURCE:
            i, s = min(candidates, key=lambda c: (c[1].time, c[1].rank, c[0]))
        else:
            i, s = candidates[0]
        del queue[i]
        self._pair(s, req)

    def _pair(self, s: _Request, r: _Request):
        done = max(s.time, r.time) + s.size * self.per_byte_us + self.latency_us
        s.partner, r.partner = r, s
        s.completion = r.completion = done


# ---------------------------------------------------------------------------
# Ranks
# ---------------------------------------------------------------------------

class _RankProcess:
    def __init__(self, sim: "Simulator", rank: int):
        self.sim = sim
        self.rank = rank
        self.clock = 0.0
        self.compute_us = 0.0
        self.wait_us = 0.0
        self.pending: Dict[str, _Request] = {}
        self.order = 0
        self.seq: Dict[Tuple[int, Optional[str]], int] = defaultdict(int)
        self.collectives = 0
        self.last_collective_exit = 0.0
        self.acc: Dict[Tuple[int, Tuple[int, ...]], list] = {}
        self.events: List[CommEvent] = []
        self.op: Optional[_Op] = None
        self.state = READY
        env = {"rank": rank, "P": sim.nprocs, "iter": 0, "depth": 0}
        self.gen = self._exec(sim.psg.root, env, ())

    # walking ---------------------------------------------------------------

    def _seq(self, vids: Sequence[int], env: Dict[str, int], ctx: Tuple[int, ...]) -> Iterator[_Op]:
        for vid in vids:
            yield from self._exec(vid, env, ctx)

    def _exec(self, vid: int, env: Dict[str, int], ctx: Tuple[int, ...]) -> Iterator[_Op]:
        sim = self.sim
        v = sim.psg.vertex(vid)
        start, wait_before = self.clock, self.wait_us
        counters = sim.counter_values(v, env)

        if v.kind == VertexKind.ROOT:
            yield from self._seq(v.children, env, ctx)
        elif v.kind == VertexKind.COMP:
            cost = sim.comp_cost(v, env)
            self.clock += cost
            self.compute_us += cost
        elif v.kind == VertexKind.LOOP:
            trip = eval_expr(v.trip, env)
            if trip < 0:
                raise SimulationError(f"negative trip count {trip} at {v.loc} on rank {self.rank}",
                                      vertex=v.id, rank=self.rank)
            for i in range(trip):
                yield from self._seq(v.children, {**env, "iter": i}, ctx)
        elif v.kind == VertexKind.BRANCH:
            arm = v.children if eval_expr(v.cond, env) != 0 else v.orelse
            yield from self._seq(arm, env, ctx)
        elif v.kind == VertexKind.CALLSITE:
            if v.recursive:
                depth = env["depth"] + 1
                if depth > sim.scenario.max_recursion:
                    raise SimulationError(f"recursion deeper than {sim.scenario.max_recursion} at {v.loc}",
                                          vertex=v.id, rank=self.rank)
                target = sim.psg.vertex(sim.back_target[vid])
                yield from self._seq(target.children, {**env, "depth": depth}, ctx + (vid,))
            else:
                yield from self._seq(v.children, env, ctx + (vid,))
        elif v.kind == VertexKind.MPI:
            yield from self._mpi(v, env)

        self._record(vid, ctx, self.clock - start, self.wait_us - wait_before, counters)

    def _record(self, vid, ctx, time_us, wait_us, counters):
        slot = self.acc.get((vid, ctx))
        if slot is None:
            slot = self.acc[(vid, ctx)] = [0.0, 0.0, {}, 0]
        slot[0] += time_us
        slot[1] += wait_us
        for name, value in counters.items():
            slot[2][name] = slot[2].get(name, 0) + value
        slot[3] += 1

    # MPI -------------------------------------------------------------------

    def _next_order(self) -> int:
        self.order += 1
        return self.order - 1

    def _finish_block(self, entry: float):
        self.wait_us += self.clock - entry

    def _emit(self, v: StructureVertex, kind: MpiKind, order: int, recorded: bool, **fields):
        if not recorded:
            return
        key = (v.id, fields.get("leg"))
        seq = self.seq[key]
        self.seq[key] += 1
        self.events.append(CommEvent(run_id=self.sim.scenario.run_id, rank=self.rank, vertex_id=v.id,
                                     kind=kind, seq=seq, order=order, **fields))

    def _mpi(self, v: StructureVertex, env: Dict[str, int]) -> Iterator[_Op]:
        sim, a, kind = self.sim, v.args, v.mpi
        entry = self.clock

        if kind in (MpiKind.SEND, MpiKind.ISEND, MpiKind.RECV, MpiKind.IRECV):
            is_send = kind in (MpiKind.SEND, MpiKind.ISEND)
            peer = sim.peer(a.peer, env, v, any_ok=not is_send)
            tag, size = eval_expr(a.tag, env), eval_expr(a.size, env)
            req = _Request(self.rank, is_send, peer, tag, size, entry, v.id, a.request, sim.gate())
            order = self._next_order()
            if kind.is_nonblocking:
                if a.request in self.pending:
                    raise SimulationError(f"rank {self.rank}: request slot '{a.request}' reused before its wait at {v.loc}",
                                          rank=self.rank, vertex=v.id)
                self.pending[a.request] = req
                yield _Op(v, posts=[req])
                self._emit(v, kind, order, req.recorded, peer=peer, tag=tag, size=size, request=a.request)
                return
            yield _Op(v, posts=[req], waits=[req])
            self._finish_block(entry)
            resolved = req.partner.rank if peer == ANY_SOURCE else None
            self._emit(v, kind, order, req.recorded, peer=peer, tag=tag, size=size, resolved_peer=resolved)
            return

        if kind == MpiKind.SENDRECV:
            dest = sim.peer(a.peer, env, v, any_ok=False)
            source = sim.peer(a.source, env, v, any_ok=True)
            tag, size = eval_expr(a.tag, env), eval_expr(a.size, env)
            recorded = sim.gate()
            s = _Request(self.rank, True, dest, tag, size, entry, v.id, recorded=recorded)
            r = _Request(self.rank, False, source, tag, size, entry, v.id, recorded=recorded)
            s_order, r_order = self._next_order(), self._next_order()
            yield _Op(v, posts=[s, r], waits=[s, r])
            self._finish_block(entry)
            self._emit(v, kind, s_order, recorded, peer=dest, tag=tag, size=size, leg="send")
            self._emit(v, kind, r_order, recorded, peer=source, tag=tag, size=size, leg="recv",
                       resolved_peer=r.partner.rank if source == ANY_SOURCE else None)
            return

        if kind.is_wait:
            reqs = []
            for slot in a.requests:
                req = self.pending.pop(slot, None)
                if req is None:
                    raise SimulationError(f"rank {self.rank}: {kind.value.lower()} on request slot '{slot}' "
                                          f"with no pending post at {v.loc}", rank=self.rank, vertex=v.id)
                reqs.append((slot, req, self._next_order()))
            yield _Op(v, waits=[req for _, req, _ in reqs])
            self._finish_block(entry)
            for slot, req, order in reqs:
                status = req.peer if req.send else req.partner.rank
                self._emit(v, kind, order, req.recorded, peer=status, tag=req.tag,
                           size=req.size if req.send else req.partner.size, request=slot)
            return

        size = eval_expr(a.size, env) if a.size is not None else 0
        # collectives are always recorded; groups need every member
        order = self._next_order()
        arrival = entry - self.last_collective_exit
        yield _Op(v, collective=True)
        self._finish_block(entry)
        self.last_collective_exit = self.clock
        self._emit(v, kind, order, True, peer=ANY_SOURCE, tag=0, size=size, arrival_us=arrival)

    def records(self) -> List[ProfileRecord]:
        out = []
        for (vid, ctx), (time_us, wait_us, counters, samples) in sorted(self.acc.items()):
            wait_us = min(wait_us, time_us)
            out.append(ProfileRecord(self.sim.scenario.run_id, self.sim.nprocs, self.rank, vid, ctx,
                                     PerfVector(time_us, wait_us, dict(sorted(counters.items())), samples)))
        return out


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------

class Simulator:
    """One run of a PSG under a scenario."""

    def __init__(self, psg: PSG, scenario: Scenario):
        self.psg = psg
        self.scenario = scenario
        self.nprocs = scenario.nprocs
        self.rng = random.Random(scenario.seed)
        self.back_target = dict(psg.back_edges)
        self.matcher = _Matcher(scenario.latency_us, scenario.per_byte_us)
        self.injections: Dict[int, List[Injection]] = defaultdict(list)
        for inj in scenario.injections:
            self.injections[locate(psg, inj.where, VertexKind.COMP).id].append(inj)
        self.counter_rules: Dict[int, Dict[str, Expr]] = {}
        for where, rules in scenario.counters.items():
            self.counter_rules.setdefault(locate(psg, where).id, {}).update(rules)
        self.pending_collectives: Dict[int, Dict[int, _RankProcess]] = defaultdict(dict)
        self.procs: List[_RankProcess] = []

    # helpers used by ranks -------------------------------------------------

    def gate(self) -> bool:
        return sampling_gate(self.scenario.sampling_rate, self.rng)

    def peer(self, e: Expr, env: Dict[str, int], v: StructureVertex, any_ok: bool) -> int:
        p = eval_expr(e, env)
        if p == ANY_SOURCE and any_ok:
            return p
        if not 0 <= p < self.nprocs:
            raise SimulationError(f"rank {env['rank']}: peer {p} out of range [0, {self.nprocs}) at {v.loc}",
                                  rank=env["rank"], vertex=v.id)
        return p

    def parts_cost(self, parts: Tuple[CostPart, ...], env: Dict[str, int]) -> int:
        total = 0
        for p in parts:
            if p.kind == "comp":
                total += eval_expr(p.expr, env)
            elif p.kind == "branch":
                total += self.parts_cost(p.body if eval_expr(p.expr, env) != 0 else p.orelse, env)
            else:
                trip = eval_expr(p.expr, env)
                if trip < 0:
                    raise SimulationError(f"negative trip count {trip} in folded loop '{format_expr(p.expr)}'")
                if not p.body or trip == 0:
                    continue
                if _uses_iter(p.body):
                    total += sum(self.parts_cost(p.body, {**env, "iter": i}) for i in range(trip))
                else:
                    total += trip * self.parts_cost(p.body, env)
        return total

    def comp_cost(self, v: StructureVertex, env: Dict[str, int]) -> float:
        cost = self.parts_cost(v.parts, env) if v.parts else eval_expr(v.cost, env)
        for inj in self.injections.get(v.id, ()):
            if eval_expr(inj.ranks, env) != 0:
                cost += eval_expr(inj.cost, env)
        if cost < 0:
            raise SimulationError(f"negative cost {cost} at {v.loc} on rank {env['rank']}",
                                  vertex=v.id, rank=env["rank"])
        return float(cost)

    def counter_values(self, v: StructureVertex, env: Dict[str, int]) -> Dict[str, int]:
        rules = self.counter_rules.get(v.id)
        if not rules:
            return {}
        values = {name: eval_expr(e, env) for name, e in rules.items()}
        for name, value in values.items():
            if value < 0:
                raise SimulationError(f"counter {name} evaluates to {value} at {v.loc}", vertex=v.id)
        return values

    # scheduling ------------------------------------------------------------

    def _advance(self, proc: _RankProcess):
        try:
            proc.op = next(proc.gen)
            proc.state = READY
        except StopIteration:
            proc.op = None
            proc.state = DONE
            if proc.pending:
                raise SimulationError(f"rank {proc.rank} finished with unwaited request(s): "
                                      f"{', '.join(sorted(proc.pending))}", rank=proc.rank)

    def _process(self, proc: _RankProcess):
        op = proc.op
        for req in op.posts:
            self.matcher.post(req)
        proc.state = BLOCKED
        if op.collective:
            self._arrive(proc)

    def _arrive(self, proc: _RankProcess):
        k = proc.collectives
        proc.collectives += 1
        group = self.pending_collectives[k]
        group[proc.rank] = proc
        if len(group) < self.nprocs:
            return
        members = [group[r] for r in sorted(group)]
        vids = {p.op.vertex.id for p in members}
        if len(vids) > 1:
            where = ", ".join(f"rank {p.rank}: {p.op.vertex.describe()}" for p in members)
            raise SimulationError(f"collective #{k} reached at different vertices ({where})", occurrence=k)
        done = max(p.clock for p in members) + self.scenario.latency_us
        del self.pending_collectives[k]
        for p in members:
            p.clock = done
            self._advance(p)

    def _wake(self):
        for proc in self.procs:
            if proc.state != BLOCKED or proc.op.collective:
                continue
            if all(req.completion is not None for req in proc.op.waits):
                if proc.op.waits:
                    proc.clock = max(proc.clock, max(req.completion for req in proc.op.waits))
                self._advance(proc)

    def run(self) -> ProfileSet:
        self.procs = [_RankProcess(self, r) for r in range(self.nprocs)]
        for proc in self.procs:
            self._advance(proc)
        while True:
            ready = [p for p in self.procs if p.state == READY]
            if not ready:
                break
            self._process(min(ready, key=lambda p: (p.clock, p.rank)))
            self._wake()

        stuck = {p.rank: p.op.vertex.describe() for p in self.procs if p.state == BLOCKED}
        if stuck:
            raise DeadlockError(f"deadlock: {len(stuck)} of {self.nprocs} rank(s) blocked", stuck)

        records = []
        events = []
        for proc in self.procs:
            records.extend(proc.records())
            events.extend(sorted(proc.events, key=lambda e: e.order))
        logger.debug("Simulated %s: %d records, %d comm events, makespan %.3f us",
                     self.scenario.run_id, len(records), len(events), max(p.clock for p in self.procs))
        return ProfileSet(self.scenario.run_id, self.nprocs, tuple(records), tuple(events),
                          self.scenario.seed, self.scenario.name, psg_hash(self.psg))


def simulate(psg: PSG, scenario: Scenario) -> ProfileSet:
    """
    Execute `psg` on scenario.nprocs virtual ranks.

    Raises:
        DeadlockError: no rank can advance while operations are pending
        SimulationError: negative cost/trip, peer out of range, bad wait,
            recursion limit, collective mismatch, unwaited request at exit
        ScenarioError: injection or counter location not in the PSG
    """
    return Simulator(psg, scenario).run()


def run_campaign(psg: PSG, base: Scenario, scales: Sequence[int]) -> List[ProfileSet]:
    """One run per process count, seeds derived as base seed XOR P."""
    runs = []
    for P in scales:
        logger.info("Simulating %s at P=%d", base.name, P)
        runs.append(simulate(psg, base.at_scale(P)))
    return runs
