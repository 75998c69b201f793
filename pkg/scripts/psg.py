"""
Program Structure Graph (PSG).

Builds a local PSG per sketch function, links them top-down from `main`
into one whole-program graph, resolves indirect calls from runtime
records and contracts the result:

- every MPI vertex and every Loop/Branch enclosing one survives;
- maximal sibling runs without MPI merge into a single Comp;
- MPI-free loops survive only up to the MaxLoopDepth nesting level.

Vertex ids are dense pre-order ids; children of a Branch are split into
its then-arm (`children`) and else-arm (`orelse`).
"""

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from errors import LinkError, ProfileFormatError
from sketch import (ZERO, BinOp, Branch, Call, Comp, Expr, Function, ICall, Location, Loop,
                    Mpi, MpiArgs, MpiKind, Num, ProgramSketch, Var, format_expr, parse_expr)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class VertexKind(str, Enum):
    ROOT = "Root"
    LOOP = "Loop"
    BRANCH = "Branch"
    COMP = "Comp"
    MPI = "Mpi"
    CALLSITE = "CallSite"


@dataclass(frozen=True)
class CostPart:
    """Folded structure kept inside a merged Comp so its cost stays exact."""
    kind: str  # comp | loop | branch
    expr: Expr  # cost, trip count or condition
    body: Tuple["CostPart", ...] = ()
    orelse: Tuple["CostPart", ...] = ()


@dataclass(frozen=True)
class StructureVertex:
    id: int
    kind: VertexKind
    loc: Location
    children: Tuple[int, ...] = ()
    orelse: Tuple[int, ...] = ()
    depth: int = 0
    label: str = ""
    function: str = ""
    mpi: Optional[MpiKind] = None
    args: Optional[MpiArgs] = None
    cost: Optional[Expr] = None
    trip: Optional[Expr] = None
    cond: Optional[Expr] = None
    parts: Tuple[CostPart, ...] = ()
    callee: Optional[str] = None
    slot: Optional[str] = None
    recursive: bool = False
    synthetic: bool = False
    observed: Tuple[int, ...] = ()

    @property
    def body(self) -> Tuple[int, ...]:
        return self.children + self.orelse

    @property
    def is_container(self) -> bool:
        return self.kind in (VertexKind.LOOP, VertexKind.BRANCH) or (
            self.kind == VertexKind.CALLSITE and bool(self.children))

    @property
    def is_collective(self) -> bool:
        return self.kind == VertexKind.MPI and self.mpi.is_collective

    @property
    def kind_name(self) -> str:
        if self.kind == VertexKind.MPI:
            return f"Mpi:{self.mpi.value}"
        if self.kind == VertexKind.CALLSITE and self.recursive:
            return "CallSite:recursive"
        return self.kind.value

    def describe(self) -> str:
        name = self.mpi.value if self.kind == VertexKind.MPI else (self.label or self.kind.value)
        return f"{name}@{self.loc}"


@dataclass(frozen=True)
class PSG:
    vertices: Tuple[StructureVertex, ...]
    root: int = 0
    back_edges: Tuple[Tuple[int, int], ...] = ()
    id_map: Tuple[Tuple[int, int], ...] = ()
    _parents: Dict[int, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        parents = {}
        for v in self.vertices:
            for c in v.body:
                parents[c] = v.id
        object.__setattr__(self, "_parents", parents)

    def __len__(self):
        return len(self.vertices)

    def vertex(self, vid: int) -> StructureVertex:
        return self.vertices[vid]

    def parent(self, vid: int) -> Optional[int]:
        return self._parents.get(vid)

    def preorder(self) -> Iterable[StructureVertex]:
        stack = [self.root]
        while stack:
            v = self.vertices[stack.pop()]
            yield v
            stack.extend(reversed(v.body))

    def mpi_vertices(self) -> List[StructureVertex]:
        return [v for v in self.vertices if v.kind == VertexKind.MPI]

    def enclosing_controls(self, vid: int) -> Tuple[str, ...]:
        """Locations of the Loop/Branch vertices enclosing `vid`, outermost first."""
        chain = []
        p = self.parent(vid)
        while p is not None:
            v = self.vertices[p]
            if v.kind in (VertexKind.LOOP, VertexKind.BRANCH):
                chain.append(f"{v.kind.value}@{v.loc}")
            p = self.parent(p)
        return tuple(reversed(chain))

    def find(self, where: str) -> List[StructureVertex]:
        """Vertices whose location is `where` ("file:line") or covers that line."""
        loc = Location.parse(where)
        return [v for v in self.vertices
                if v.kind != VertexKind.ROOT and v.loc.file == loc.file
                and v.loc.line <= loc.line <= v.loc.last_line]

    def kind_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = defaultdict(int)
        for v in self.vertices:
            counts[v.kind.value] += 1
        return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# Mutable build nodes
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Node:
    kind: VertexKind
    loc: Location
    label: str = ""
    function: str = ""
    mpi: Optional[MpiKind] = None
    args: Optional[MpiArgs] = None
    cost: Optional[Expr] = None
    trip: Optional[Expr] = None
    cond: Optional[Expr] = None
    parts: Tuple[CostPart, ...] = ()
    callee: Optional[str] = None
    slot: Optional[str] = None
    recursive: bool = False
    synthetic: bool = False
    observed: Tuple[int, ...] = ()
    children: List["_Node"] = field(default_factory=list)
    orelse: List["_Node"] = field(default_factory=list)
    origins: List[int] = field(default_factory=list)
    back_target: Optional["_Node"] = None

    def copy_shallow(self) -> "_Node":
        return _Node(self.kind, self.loc, self.label, self.function, self.mpi, self.args, self.cost,
                     self.trip, self.cond, self.parts, self.callee, self.slot, self.recursive,
                     self.synthetic, self.observed, origins=list(self.origins))

    def subtree_origins(self) -> List[int]:
        out = list(self.origins)
        for c in self.children + self.orelse:
            out.extend(c.subtree_origins())
        return out


def _freeze(root: _Node) -> PSG:
    ids: Dict[int, int] = {}
    order: List[Tuple[_Node, int]] = []

    stack = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        ids[id(node)] = len(order)
        order.append((node, depth))
        child_depth = depth + (1 if node.kind == VertexKind.LOOP else 0)
        for c in reversed(node.children + node.orelse):
            stack.append((c, child_depth))

    vertices = []
    back_edges = []
    id_map = {}
    for node, depth in order:
        vid = ids[id(node)]
        for old in node.origins:
            id_map[old] = vid
        if node.back_target is not None:
            back_edges.append((vid, ids[id(node.back_target)]))
        vertices.append(StructureVertex(
            id=vid, kind=node.kind, loc=node.loc,
            children=tuple(ids[id(c)] for c in node.children),
            orelse=tuple(ids[id(c)] for c in node.orelse),
            depth=depth, label=node.label, function=node.function, mpi=node.mpi,
            args=node.args, cost=node.cost, trip=node.trip, cond=node.cond, parts=node.parts,
            callee=node.callee, slot=node.slot, recursive=node.recursive,
            synthetic=node.synthetic, observed=node.observed,
        ))
    return PSG(tuple(vertices), 0, tuple(sorted(back_edges)), tuple(sorted(id_map.items())))


def _thaw(psg: PSG) -> _Node:
    nodes: Dict[int, _Node] = {}
    for v in psg.vertices:
        nodes[v.id] = _Node(v.kind, v.loc, v.label, v.function, v.mpi, v.args, v.cost, v.trip,
                            v.cond, v.parts, v.callee, v.slot, v.recursive, v.synthetic, v.observed,
                            origins=[v.id])
    for v in psg.vertices:
        nodes[v.id].children = [nodes[c] for c in v.children]
        nodes[v.id].orelse = [nodes[c] for c in v.orelse]
    for src, dst in psg.back_edges:
        nodes[src].back_target = nodes[dst]
    return nodes[psg.root]


# ---------------------------------------------------------------------------
# Intra-procedural: local PSGs
# ---------------------------------------------------------------------------

def _stmt_nodes(body, function: str) -> List[_Node]:
    nodes = []
    for stmt in body:
        if isinstance(stmt, Comp):
            nodes.append(_Node(VertexKind.COMP, stmt.loc, label=stmt.label, function=function, cost=stmt.cost))
        elif isinstance(stmt, Loop):
            nodes.append(_Node(VertexKind.LOOP, stmt.loc, label="loop", function=function, trip=stmt.trip,
                               children=_stmt_nodes(stmt.body, function)))
        elif isinstance(stmt, Branch):
            nodes.append(_Node(VertexKind.BRANCH, stmt.loc, label="branch", function=function, cond=stmt.cond,
                               children=_stmt_nodes(stmt.then, function),
                               orelse=_stmt_nodes(stmt.orelse, function)))
        elif isinstance(stmt, Call):
            nodes.append(_Node(VertexKind.CALLSITE, stmt.loc, label=stmt.name, function=function, callee=stmt.name))
        elif isinstance(stmt, ICall):
            nodes.append(_Node(VertexKind.CALLSITE, stmt.loc, label=f"icall_{stmt.slot}", function=function,
                               slot=stmt.slot))
        elif isinstance(stmt, Mpi):
            nodes.append(_Node(VertexKind.MPI, stmt.loc, label=stmt.kind.value, function=function,
                               mpi=stmt.kind, args=stmt.args))
    return nodes


def build_local_psg(fn: Function) -> PSG:
    """One vertex per statement, in source order, under a Root for `fn`."""
    root = _Node(VertexKind.ROOT, fn.loc, label=fn.name, function=fn.name,
                 children=_stmt_nodes(fn.body, fn.name))
    return _freeze(root)


def build_fragments(program: ProgramSketch) -> Dict[str, PSG]:
    return {fn.name: build_local_psg(fn) for fn in program.functions}


# ---------------------------------------------------------------------------
# Inter-procedural: linking
# ---------------------------------------------------------------------------

def _cyclic_functions(call_graph: Mapping[str, Sequence[str]]) -> set:
    cyclic = set()
    for start in call_graph:
        seen = set()
        stack = list(call_graph.get(start, ()))
        while stack:
            f = stack.pop()
            if f == start:
                cyclic.add(start)
                break
            if f in seen:
                continue
            seen.add(f)
            stack.extend(call_graph.get(f, ()))
    return cyclic


class _Linker:
    def __init__(self, fragments: Mapping[str, PSG], call_graph: Mapping[str, Sequence[str]]):
        self.fragments = fragments
        self.cyclic = _cyclic_functions(call_graph)
        self.roots = {name: _thaw(frag) for name, frag in fragments.items()}

    def body_of(self, name: str, stack: Dict[str, _Node]) -> List[_Node]:
        if name not in self.roots:
            raise LinkError(f"call to undefined function '{name}'", function=name)
        return self.clone_seq(self.roots[name].children, stack)

    def clone_seq(self, nodes: List[_Node], stack: Dict[str, _Node]) -> List[_Node]:
        out: List[_Node] = []
        for node in nodes:
            if node.kind == VertexKind.CALLSITE and node.callee is not None:
                out.extend(self.expand_call(node, stack))
                continue
            copy = node.copy_shallow()
            copy.origins = []
            copy.children = self.clone_seq(node.children, stack)
            copy.orelse = self.clone_seq(node.orelse, stack)
            out.append(copy)
        return out

    def expand_call(self, site: _Node, stack: Dict[str, _Node]) -> List[_Node]:
        callee = site.callee
        if callee in stack:
            rec = site.copy_shallow()
            rec.origins = []
            rec.recursive = True
            rec.back_target = stack[callee]
            return [rec]
        if callee in self.cyclic:
            wrapper = site.copy_shallow()
            wrapper.origins = []
            wrapper.children = self.body_of(callee, {**stack, callee: wrapper})
            return [wrapper]
        return self.body_of(callee, stack)


def link_program(fragments: Mapping[str, PSG], call_graph: Mapping[str, Sequence[str]],
                 entry: str = "main") -> PSG:
    """
    Inline local PSGs top-down from the entry function.

    Acyclic callees are spliced in place of their CallSite with fresh ids.
    Functions on a call-graph cycle are inlined under a CallSite vertex
    that serves as the function root; a call reaching an active function
    stays a recursive CallSite with a back-edge to that root.

    Raises:
        LinkError: missing entry function or undefined callee
    """
    if entry not in fragments:
        raise LinkError(f"missing entry function '{entry}'", entry=entry)
    linker = _Linker(fragments, call_graph)
    main = linker.roots[entry]
    root = main.copy_shallow()
    root.origins = []
    root.children = linker.body_of(entry, {entry: root})
    return _freeze(root)


def build_program_psg(program: ProgramSketch) -> PSG:
    return link_program(build_fragments(program), program.call_graph(), program.entry)


# ---------------------------------------------------------------------------
# Indirect calls
# ---------------------------------------------------------------------------

def _rank_set_cond(ranks: Sequence[int]) -> Expr:
    cond: Optional[Expr] = None
    for r in ranks:
        term = BinOp("==", Var("rank"), Num(r))
        cond = term if cond is None else BinOp("or", cond, term)
    return cond if cond is not None else ZERO


def resolve_indirect_calls(psg: PSG, records: Iterable[Tuple[str, int, str]],
                           fragments: Mapping[str, PSG],
                           call_graph: Mapping[str, Sequence[str]]) -> PSG:
    """
    Replace `icall` vertices by the callee bodies observed at runtime.

    Args:
        records: (slot, rank, resolved function) triples

    A slot observed with one callee becomes an ordinary inlined call; a
    slot with several callees becomes a chain of synthetic Branches keyed
    on the ranks that observed each callee. Slots without records turn
    into a zero-cost Comp leaf.

    Raises:
        LinkError: a record names an unknown function
    """
    observed: Dict[str, Dict[str, set]] = defaultdict(lambda: defaultdict(set))
    for slot, rank, fn in records:
        if fn not in fragments:
            raise LinkError(f"indirect call slot '{slot}' resolved to unknown function '{fn}'",
                            slot=slot, function=fn)
        observed[slot][fn].add(int(rank))

    linker = _Linker(fragments, call_graph)
    root = _thaw(psg)

    def rewrite(nodes: List[_Node]) -> List[_Node]:
        out: List[_Node] = []
        for node in nodes:
            node.children = rewrite(node.children)
            node.orelse = rewrite(node.orelse)
            if node.kind != VertexKind.CALLSITE or node.slot is None:
                out.append(node)
                continue
            callees = observed.get(node.slot)
            if not callees:
                logger.warning("No runtime records for indirect call slot '%s' at %s; treating it as an opaque leaf",
                               node.slot, node.loc)
                out.append(_Node(VertexKind.COMP, node.loc, label=f"icall_{node.slot}", function=node.function,
                                 cost=ZERO, origins=node.origins))
                continue
            ordered = sorted(callees.items(), key=lambda kv: (min(kv[1]), kv[0]))
            if len(ordered) == 1:
                site = _Node(VertexKind.CALLSITE, node.loc, label=ordered[0][0], function=node.function,
                             callee=ordered[0][0])
                out.extend(linker.expand_call(site, {}))
                continue
            chain: List[_Node] = []
            for fn, ranks in reversed(ordered):
                site = _Node(VertexKind.CALLSITE, node.loc, label=fn, function=node.function, callee=fn)
                ranks = tuple(sorted(ranks))
                chain = [_Node(VertexKind.BRANCH, node.loc, label=f"icall_{node.slot}:{fn}",
                               function=node.function, cond=_rank_set_cond(ranks), synthetic=True,
                               observed=ranks, children=linker.expand_call(site, {}), orelse=chain)]
            chain[0].origins = list(node.origins)
            out.extend(chain)
        return out

    root.children = rewrite(root.children)
    return _freeze(root)


def load_icall_records(path: str) -> List[Tuple[str, int, str]]:
    """
    Read indirect-call records: a JSON list of {"slot", "rank", "function"} objects.

    Raises:
        ProfileFormatError: unreadable file or malformed record
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ProfileFormatError(f"invalid indirect-call records: {e}", path=str(path))
    if isinstance(doc, dict):
        doc = doc.get("records", [])
    records = []
    for i, item in enumerate(doc):
        try:
            records.append((str(item["slot"]), int(item["rank"]), str(item["function"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ProfileFormatError(f"record {i}: {e!r}", path=str(path))
    return records


# ---------------------------------------------------------------------------
# Contraction
# ---------------------------------------------------------------------------

def _is_structural(node: _Node) -> bool:
    return node.kind == VertexKind.MPI or (node.kind == VertexKind.CALLSITE and node.recursive)


def _has_structural(node: _Node) -> bool:
    if _is_structural(node):
        return True
    return any(_has_structural(c) for c in node.children + node.orelse)


def _cost_parts(node: _Node) -> List[CostPart]:
    if node.kind == VertexKind.COMP:
        return list(node.parts) if node.parts else [CostPart("comp", node.cost if node.cost is not None else ZERO)]
    if node.kind == VertexKind.LOOP:
        return [CostPart("loop", node.trip, _seq_parts(node.children))]
    if node.kind == VertexKind.BRANCH:
        return [CostPart("branch", node.cond, _seq_parts(node.children), _seq_parts(node.orelse))]
    if node.kind == VertexKind.CALLSITE:
        return _seq_parts(node.children)
    return []


def _seq_parts(nodes: List[_Node]) -> Tuple[CostPart, ...]:
    parts: List[CostPart] = []
    for n in nodes:
        parts.extend(_cost_parts(n))
    return tuple(parts)


class _Contractor:
    def __init__(self, max_loop_depth: int):
        self.max_loop_depth = max_loop_depth

    def mergeable(self, node: _Node, loop_depth: int) -> bool:
        """
        Whether `node` may fold into a neighbouring Comp run.

        `loop_depth` counts the loops enclosing `node`, so a loop sits on
        level loop_depth + 1 and its own level counts toward the limit:
        with max_loop_depth = 1 an outermost MPI-free loop is kept and a
        loop nested in it folds; with 0 every MPI-free loop folds.
        """
        if node.kind in (VertexKind.ROOT, VertexKind.MPI) or _has_structural(node):
            return False
        if node.kind == VertexKind.LOOP:
            return loop_depth + 1 > self.max_loop_depth
        return True

    def seq(self, nodes: List[_Node], loop_depth: int) -> List[_Node]:
        out: List[_Node] = []
        run: List[_Node] = []
        for node in nodes:
            if self.mergeable(node, loop_depth):
                run.append(node)
                continue
            out.extend(self.flush(run))
            run = []
            out.append(self.keep(node, loop_depth))
        out.extend(self.flush(run))
        return out

    def keep(self, node: _Node, loop_depth: int) -> _Node:
        inner = loop_depth + (1 if node.kind == VertexKind.LOOP else 0)
        node.children = self.seq(node.children, inner)
        node.orelse = self.seq(node.orelse, inner)
        return node

    def flush(self, run: List[_Node]) -> List[_Node]:
        if not run:
            return []
        if len(run) == 1 and run[0].kind == VertexKind.COMP:
            return run
        first, last = run[0], run[-1]
        end = max(n.loc.last_line for n in run)
        loc = Location(first.loc.file, first.loc.line, end if end != first.loc.line else None)
        labels = [n.label for n in run]
        label = labels[0] if len(labels) == 1 else f"{labels[0]}..{labels[-1]}"
        origins: List[int] = []
        for n in run:
            origins.extend(n.subtree_origins())
        return [_Node(VertexKind.COMP, loc, label=f"merged[{label}]", function=first.function,
                      parts=_seq_parts(run), origins=origins)]


def contract(psg: PSG, max_loop_depth: int) -> PSG:
    """
    Contract a linked PSG.

    A Loop's nesting level counts itself (an outermost loop is level 1);
    MPI-free loops survive while their level is <= max_loop_depth.
    The returned graph's id_map sends every old id to its new vertex,
    folded vertices to the Comp that absorbed them.
    """
    root = _thaw(psg)
    root = _Contractor(max_loop_depth).keep(root, 0)
    contracted = _freeze(root)
    logger.debug("Contracted PSG from %d to %d vertices (MaxLoopDepth=%d)",
                 len(psg), len(contracted), max_loop_depth)
    return contracted


def contraction_stats(before: PSG, after: PSG) -> Dict:
    reduction = 1.0 - len(after) / len(before) if len(before) else 0.0
    return {
        "before": len(before),
        "after": len(after),
        "reduction": round(reduction, 4),
        "before_kinds": before.kind_counts(),
        "after_kinds": after.kind_counts(),
    }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _expr_str(e: Optional[Expr]) -> Optional[str]:
    return None if e is None else format_expr(e)


def _part_to_dict(p: CostPart) -> Dict:
    d = {"kind": p.kind, "expr": format_expr(p.expr)}
    if p.body:
        d["body"] = [_part_to_dict(c) for c in p.body]
    if p.orelse:
        d["orelse"] = [_part_to_dict(c) for c in p.orelse]
    return d


def _part_from_dict(d: Dict) -> CostPart:
    return CostPart(d["kind"], parse_expr(d["expr"]),
                    tuple(_part_from_dict(c) for c in d.get("body", [])),
                    tuple(_part_from_dict(c) for c in d.get("orelse", [])))


def _args_to_dict(a: MpiArgs) -> Dict:
    d = {}
    for name in ("peer", "tag", "size", "source"):
        value = getattr(a, name)
        if value is not None:
            d[name] = format_expr(value)
    if a.request:
        d["request"] = a.request
    if a.requests:
        d["requests"] = list(a.requests)
    d["participants"] = format_expr(a.participants)
    return d


def _args_from_dict(d: Dict) -> MpiArgs:
    exprs = {name: parse_expr(d[name]) for name in ("peer", "tag", "size", "source") if name in d}
    return MpiArgs(request=d.get("request"), requests=tuple(d.get("requests", ())),
                   participants=parse_expr(d.get("participants", "1")), **exprs)


def vertex_to_dict(v: StructureVertex) -> Dict:
    payload = {"label": v.label, "function": v.function}
    for name in ("cost", "trip", "cond"):
        if getattr(v, name) is not None:
            payload[name] = _expr_str(getattr(v, name))
    if v.args is not None:
        payload["args"] = _args_to_dict(v.args)
    if v.parts:
        payload["parts"] = [_part_to_dict(p) for p in v.parts]
    if v.callee:
        payload["callee"] = v.callee
    if v.slot:
        payload["slot"] = v.slot
    if v.synthetic:
        payload["synthetic"] = True
    if v.observed:
        payload["observed"] = list(v.observed)
    d = {"id": v.id, "kind": v.kind_name, "loc": str(v.loc), "children": list(v.children),
         "depth": v.depth, "payload": payload}
    if v.orelse:
        d["orelse"] = list(v.orelse)
    return d


def vertex_from_dict(d: Dict) -> StructureVertex:
    kind_text, _, qualifier = d["kind"].partition(":")
    kind = VertexKind(kind_text)
    p = d.get("payload", {})
    return StructureVertex(
        id=int(d["id"]), kind=kind, loc=Location.parse(d["loc"]),
        children=tuple(d.get("children", ())), orelse=tuple(d.get("orelse", ())),
        depth=int(d.get("depth", 0)), label=p.get("label", ""), function=p.get("function", ""),
        mpi=MpiKind(qualifier) if kind == VertexKind.MPI else None,
        args=_args_from_dict(p["args"]) if "args" in p else None,
        cost=parse_expr(p["cost"]) if "cost" in p else None,
        trip=parse_expr(p["trip"]) if "trip" in p else None,
        cond=parse_expr(p["cond"]) if "cond" in p else None,
        parts=tuple(_part_from_dict(x) for x in p.get("parts", ())),
        callee=p.get("callee"), slot=p.get("slot"),
        recursive=(qualifier == "recursive"), synthetic=bool(p.get("synthetic", False)),
        observed=tuple(p.get("observed", ())),
    )


def psg_to_dict(psg: PSG) -> Dict:
    return {
        "version": SCHEMA_VERSION,
        "vertices": [vertex_to_dict(v) for v in sorted(psg.vertices, key=lambda v: v.id)],
        "root": psg.root,
        "back_edges": [list(e) for e in psg.back_edges],
        "id_map": [list(e) for e in psg.id_map],
    }


def psg_from_dict(doc: Dict) -> PSG:
    if doc.get("version") != SCHEMA_VERSION:
        raise ProfileFormatError(f"unsupported PSG version {doc.get('version')!r}")
    vertices = tuple(sorted((vertex_from_dict(v) for v in doc["vertices"]), key=lambda v: v.id))
    if [v.id for v in vertices] != list(range(len(vertices))):
        raise ProfileFormatError("PSG vertex ids are not dense")
    return PSG(vertices, int(doc.get("root", 0)),
               tuple(tuple(e) for e in doc.get("back_edges", ())),
               tuple(tuple(e) for e in doc.get("id_map", ())))


def psg_json(psg: PSG) -> str:
    return json.dumps(psg_to_dict(psg), indent=2, sort_keys=True) + "\n"


def psg_hash(psg: PSG) -> str:
    """Hash of the structure only (the id_map of the last contraction is ignored)."""
    doc = psg_to_dict(psg)
    doc.pop("id_map")
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def dump_psg(psg: PSG, path: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(psg_json(psg), encoding="utf-8")
    tmp.replace(path)


def load_psg(path: str) -> PSG:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ProfileFormatError(f"invalid PSG JSON: {e}", path=path)
    return psg_from_dict(doc)


def build_psg(program: ProgramSketch, max_loop_depth: int = 10,
              icall_records: Iterable[Tuple[str, int, str]] = ()) -> Tuple[PSG, Dict]:
    """Link, resolve indirect calls and contract; returns the PSG and its contraction stats."""
    fragments = build_fragments(program)
    call_graph = program.call_graph()
    linked = link_program(fragments, call_graph, program.entry)
    if program.icall_slots():
        linked = resolve_indirect_calls(linked, icall_records, fragments, call_graph)
    contracted = contract(linked, max_loop_depth)
    stats = contraction_stats(linked, contracted)
    logger.info("PSG built: %d vertices, %d after contraction (max loop depth %d)",
                stats["before"], stats["after"], max_loop_depth)
    return contracted, stats
