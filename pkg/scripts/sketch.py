"""
SPMD sketch language.

A small textual stand-in for a compiler front end: each function is an
ordered body of comp/loop/branch/call/MPI statements with integer
expressions over `rank`, `P` and `iter`.

Grammar (whitespace-insensitive, `#` starts a line comment):

    program := func+
    func    := "func" NAME "(" ")" block
    block   := "{" stmt* "}"
    stmt    := "comp" NAME "cost" expr ";"
             | "loop" expr block
             | "branch" expr block ("else" block)?
             | "call" NAME "(" ")" ";"
             | "icall" NAME ";"
             | mpi ";"
    mpi     := ("send"|"recv") "(" expr "," expr "," expr ")"
             | ("isend"|"irecv") "(" expr "," expr "," expr ")" "as" NAME
             | "sendrecv" "(" expr "," expr "," expr "," expr ")"
             | "wait" "(" NAME ")" | "waitall" "(" NAME ("," NAME)* ")"
             | ("barrier"|"bcast"|"allreduce"|"reduce") ("(" expr ")")?
"""

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

from errors import EvalError, SketchError

ANY_SOURCE = -1


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" | "not"
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Var, Unary, BinOp]

ONE = Num(1)
ZERO = Num(0)

_PRECEDENCE = {
    "or": 1, "and": 2,
    "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
    "+": 4, "-": 4,
    "*": 5, "/": 5, "mod": 5,
}
_UNARY_PREC = 6


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def eval_expr(e: Expr, env: Mapping[str, int]) -> int:
    """
    Evaluate an expression over integers.

    Division and mod truncate toward zero (C semantics); comparisons and
    logical operators yield 0 or 1.

    Raises:
        EvalError: division/mod by zero or an unbound identifier
    """
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return int(env[e.name])
        except KeyError:
            raise EvalError(f"unbound identifier '{e.name}'", name=e.name)
    if isinstance(e, Unary):
        v = eval_expr(e.operand, env)
        return -v if e.op == "neg" else int(v == 0)
    if isinstance(e, BinOp):
        op = e.op
        if op == "and":
            return int(eval_expr(e.left, env) != 0 and eval_expr(e.right, env) != 0)
        if op == "or":
            return int(eval_expr(e.left, env) != 0 or eval_expr(e.right, env) != 0)
        a = eval_expr(e.left, env)
        b = eval_expr(e.right, env)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op in ("/", "mod"):
            if b == 0:
                raise EvalError(f"{'division' if op == '/' else 'mod'} by zero in '{format_expr(e)}'")
            q = _trunc_div(a, b)
            return q if op == "/" else a - b * q
        if op == "==":
            return int(a == b)
        if op == "!=":
            return int(a != b)
        if op == "<":
            return int(a < b)
        if op == "<=":
            return int(a <= b)
        if op == ">":
            return int(a > b)
        if op == ">=":
            return int(a >= b)
    raise EvalError(f"not an expression: {e!r}")


def variables(e: Expr) -> FrozenSet[str]:
    if isinstance(e, Var):
        return frozenset([e.name])
    if isinstance(e, Unary):
        return variables(e.operand)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    return frozenset()


def format_expr(e: Expr, parent_prec: int = 0) -> str:
    if isinstance(e, Num):
        return str(e.value) if e.value >= 0 else f"-{-e.value}"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        inner = format_expr(e.operand, _UNARY_PREC)
        text = f"-{inner}" if e.op == "neg" else f"not {inner}"
        return f"({text})" if parent_prec > _UNARY_PREC else text
    prec = _PRECEDENCE[e.op]
    text = f"{format_expr(e.left, prec)} {e.op} {format_expr(e.right, prec + 1)}"
    return f"({text})" if parent_prec > prec else text


# ---------------------------------------------------------------------------
# Statements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Location:
    file: str
    line: int
    end_line: Optional[int] = None

    def __str__(self):
        if self.end_line is not None and self.end_line != self.line:
            return f"{self.file}:{self.line}-{self.end_line}"
        return f"{self.file}:{self.line}"

    @property
    def last_line(self) -> int:
        return self.end_line if self.end_line is not None else self.line

    @classmethod
    def parse(cls, text: str) -> "Location":
        file, _, lines = text.rpartition(":")
        if not file:
            raise ValueError(f"bad location '{text}'")
        first, _, last = lines.partition("-")
        return cls(file, int(first), int(last) if last else None)


class MpiKind(str, Enum):
    SEND = "Send"
    RECV = "Recv"
    ISEND = "Isend"
    IRECV = "Irecv"
    WAIT = "Wait"
    WAITALL = "Waitall"
    SENDRECV = "Sendrecv"
    BARRIER = "Barrier"
    BCAST = "Bcast"
    ALLREDUCE = "Allreduce"
    REDUCE = "Reduce"

    @property
    def is_collective(self) -> bool:
        return self in (MpiKind.BARRIER, MpiKind.BCAST, MpiKind.ALLREDUCE, MpiKind.REDUCE)

    @property
    def is_blocking_p2p(self) -> bool:
        return self in (MpiKind.SEND, MpiKind.RECV, MpiKind.SENDRECV)

    @property
    def is_nonblocking(self) -> bool:
        return self in (MpiKind.ISEND, MpiKind.IRECV)

    @property
    def is_wait(self) -> bool:
        return self in (MpiKind.WAIT, MpiKind.WAITALL)


@dataclass(frozen=True)
class MpiArgs:
    peer: Optional[Expr] = None
    tag: Optional[Expr] = None
    size: Optional[Expr] = None
    source: Optional[Expr] = None  # Sendrecv receive leg
    request: Optional[str] = None
    requests: Tuple[str, ...] = ()
    participants: Expr = ONE


@dataclass(frozen=True)
class Comp:
    label: str
    cost: Expr
    loc: Location = field(compare=False)


@dataclass(frozen=True)
class Loop:
    trip: Expr
    body: Tuple["Stmt", ...]
    loc: Location = field(compare=False)


@dataclass(frozen=True)
class Branch:
    cond: Expr
    then: Tuple["Stmt", ...]
    orelse: Tuple["Stmt", ...]
    loc: Location = field(compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    loc: Location = field(compare=False)


@dataclass(frozen=True)
class ICall:
    slot: str
    loc: Location = field(compare=False)


@dataclass(frozen=True)
class Mpi:
    kind: MpiKind
    args: MpiArgs
    loc: Location = field(compare=False)


Stmt = Union[Comp, Loop, Branch, Call, ICall, Mpi]


@dataclass(frozen=True)
class Function:
    name: str
    body: Tuple[Stmt, ...]
    loc: Location = field(compare=False)


@dataclass(frozen=True)
class ProgramSketch:
    functions: Tuple[Function, ...]
    filename: str = field(default="<sketch>", compare=False)
    entry: str = "main"

    def function(self, name: str) -> Function:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise KeyError(name)

    def has_function(self, name: str) -> bool:
        return any(fn.name == name for fn in self.functions)

    def call_graph(self) -> Dict[str, Tuple[str, ...]]:
        """Direct call edges per function, in order of first appearance."""
        graph = {}
        for fn in self.functions:
            callees: List[str] = []
            for stmt in walk(fn.body):
                if isinstance(stmt, Call) and stmt.name not in callees:
                    callees.append(stmt.name)
            graph[fn.name] = tuple(callees)
        return graph

    def icall_slots(self) -> Tuple[str, ...]:
        slots: List[str] = []
        for fn in self.functions:
            for stmt in walk(fn.body):
                if isinstance(stmt, ICall) and stmt.slot not in slots:
                    slots.append(stmt.slot)
        return tuple(slots)


def walk(body: Tuple[Stmt, ...]):
    """Pre-order traversal over a statement sequence."""
    for stmt in body:
        yield stmt
        if isinstance(stmt, Loop):
            yield from walk(stmt.body)
        elif isinstance(stmt, Branch):
            yield from walk(stmt.then)
            yield from walk(stmt.orelse)


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

KEYWORDS = frozenset([
    "func", "comp", "cost", "loop", "branch", "else", "call", "icall", "as",
    "send", "recv", "isend", "irecv", "sendrecv", "wait", "waitall",
    "barrier", "bcast", "allreduce", "reduce", "mod", "and", "or", "not",
])

_COLLECTIVE_WORDS = {
    "barrier": MpiKind.BARRIER,
    "bcast": MpiKind.BCAST,
    "allreduce": MpiKind.ALLREDUCE,
    "reduce": MpiKind.REDUCE,
}

_OP_ALIASES = {"%": "mod", "&&": "and", "||": "or", "!": "not"}

_TOKEN_RE = re.compile(r"""
    (?P<newline>\n)
  | (?P<space>[ \t\r\f\v]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>[0-9]+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|&&|\|\||[-+*/%<>(){},;!])
  | (?P<bad>.)
""", re.VERBOSE | re.DOTALL)


@dataclass(frozen=True)
class Token:
    kind: str  # number | name | keyword | op | eof
    value: str
    line: int
    column: int


def tokenize(text: str, filename: str = "<sketch>") -> List[Token]:
    tokens = []
    line = 1
    line_start = 0
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        value = m.group()
        column = m.start() - line_start + 1
        if kind == "newline":
            line += 1
            line_start = m.end()
        elif kind in ("space", "comment"):
            continue
        elif kind == "bad":
            raise SketchError(f"unexpected character {value!r}", filename, line, column)
        elif kind == "name" and value in KEYWORDS:
            tokens.append(Token("keyword", value, line, column))
        elif kind == "op":
            tokens.append(Token("op", _OP_ALIASES.get(value, value), line, column))
        else:
            tokens.append(Token(kind, value, line, column))
    tokens.append(Token("eof", "", line, len(text) - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, tokens: List[Token], filename: str):
        self.tokens = tokens
        self.pos = 0
        self.filename = filename

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, message: str, tok: Optional[Token] = None):
        tok = tok or self.peek()
        raise SketchError(message, self.filename, tok.line, tok.column)

    def at(self, value: str) -> bool:
        tok = self.peek()
        return tok.kind in ("op", "keyword") and tok.value == value

    def expect(self, value: str) -> Token:
        tok = self.peek()
        if not self.at(value):
            found = tok.value or "end of input"
            self.error(f"expected '{value}', found '{found}'")
        return self.advance()

    def expect_name(self, what: str) -> Token:
        tok = self.peek()
        if tok.kind != "name":
            found = tok.value or "end of input"
            self.error(f"expected {what}, found '{found}'")
        return self.advance()

    def loc(self, tok: Token) -> Location:
        return Location(self.filename, tok.line)

    # program / functions -------------------------------------------------

    def program(self) -> List[Function]:
        functions = []
        if self.peek().kind == "eof":
            self.error("expected at least one function")
        while self.peek().kind != "eof":
            functions.append(self.function())
        return functions

    def function(self) -> Function:
        start = self.expect("func")
        name = self.expect_name("function name")
        self.expect("(")
        self.expect(")")
        body = self.block()
        return Function(name.value, body, self.loc(start))

    def block(self) -> Tuple[Stmt, ...]:
        self.expect("{")
        stmts = []
        while not self.at("}"):
            if self.peek().kind == "eof":
                self.error("unterminated block, expected '}'")
            stmts.append(self.statement())
        self.expect("}")
        return tuple(stmts)

    # statements ------------------------------------------------------------

    def statement(self) -> Stmt:
        tok = self.peek()
        if tok.kind != "keyword":
            self.error(f"expected a statement, found '{tok.value or 'end of input'}'")
        word = tok.value
        if word == "comp":
            self.advance()
            label = self.expect_name("comp label")
            self.expect("cost")
            cost = self.expr()
            self.expect(";")
            return Comp(label.value, cost, self.loc(tok))
        if word == "loop":
            self.advance()
            trip = self.expr()
            return Loop(trip, self.block(), self.loc(tok))
        if word == "branch":
            self.advance()
            cond = self.expr()
            then = self.block()
            orelse: Tuple[Stmt, ...] = ()
            if self.at("else"):
                self.advance()
                orelse = self.block()
            return Branch(cond, then, orelse, self.loc(tok))
        if word == "call":
            self.advance()
            name = self.expect_name("function name")
            self.expect("(")
            self.expect(")")
            self.expect(";")
            return Call(name.value, self.loc(tok))
        if word == "icall":
            self.advance()
            slot = self.expect_name("indirect call slot")
            self.expect(";")
            return ICall(slot.value, self.loc(tok))
        stmt = self.mpi()
        self.expect(";")
        return stmt

    def mpi(self) -> Mpi:
        tok = self.advance()
        word = tok.value
        loc = self.loc(tok)
        if word in ("send", "recv", "isend", "irecv"):
            self.expect("(")
            peer = self.expr()
            self.expect(",")
            tag = self.expr()
            self.expect(",")
            size = self.expr()
            self.expect(")")
            kind = MpiKind(word.capitalize()) if word in ("send", "recv") else MpiKind("I" + word[1:])
            request = None
            if kind.is_nonblocking:
                self.expect("as")
                request = self.expect_name("request slot").value
            return Mpi(kind, MpiArgs(peer=peer, tag=tag, size=size, request=request), loc)
        if word == "sendrecv":
            self.expect("(")
            dest = self.expr()
            self.expect(",")
            source = self.expr()
            self.expect(",")
            tag = self.expr()
            self.expect(",")
            size = self.expr()
            self.expect(")")
            return Mpi(MpiKind.SENDRECV, MpiArgs(peer=dest, source=source, tag=tag, size=size), loc)
        if word in ("wait", "waitall"):
            self.expect("(")
            names = [self.expect_name("request slot").value]
            while word == "waitall" and self.at(","):
                self.advance()
                names.append(self.expect_name("request slot").value)
            self.expect(")")
            kind = MpiKind.WAIT if word == "wait" else MpiKind.WAITALL
            return Mpi(kind, MpiArgs(requests=tuple(names)), loc)
        if word in _COLLECTIVE_WORDS:
            size = None
            if self.at("("):
                self.advance()
                size = self.expr()
                self.expect(")")
            return Mpi(_COLLECTIVE_WORDS[word], MpiArgs(size=size), loc)
        self.error(f"expected a statement, found '{word}'", tok)

    # expressions -----------------------------------------------------------

    def expr(self) -> Expr:
        return self.binary(1)

    def binary(self, level: int) -> Expr:
        if level > 5:
            return self.unary()
        left = self.binary(level + 1)
        while True:
            tok = self.peek()
            if tok.kind not in ("op", "keyword") or _PRECEDENCE.get(tok.value) != level:
                return left
            self.advance()
            right = self.binary(level + 1)
            left = BinOp(tok.value, left, right)

    def unary(self) -> Expr:
        if self.at("-"):
            self.advance()
            return Unary("neg", self.unary())
        if self.at("not"):
            self.advance()
            return Unary("not", self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return Num(int(tok.value))
        if tok.kind == "name":
            self.advance()
            return Var(tok.value)
        if self.at("("):
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        self.error(f"expected an expression, found '{tok.value or 'end of input'}'")


def _check_semantics(functions: List[Function], filename: str):
    seen: Dict[str, Function] = {}
    for fn in functions:
        if fn.name in seen:
            raise SketchError(f"duplicate function '{fn.name}' (first defined at {seen[fn.name].loc})",
                              filename, fn.loc.line, 1)
        seen[fn.name] = fn
    for fn in functions:
        declared = set()
        for stmt in walk(fn.body):
            if isinstance(stmt, Call) and stmt.name not in seen:
                raise SketchError(f"call to undefined function '{stmt.name}'", filename, stmt.loc.line, 1)
            if isinstance(stmt, Mpi):
                if stmt.args.request:
                    declared.add(stmt.args.request)
                for slot in stmt.args.requests:
                    if slot not in declared:
                        raise SketchError(f"{stmt.kind.value.lower()} on undeclared request slot '{slot}'",
                                          filename, stmt.loc.line, 1)


def parse_sketch(text: Union[str, bytes], filename: str = "<sketch>") -> ProgramSketch:
    """
    Parse sketch source into a ProgramSketch.

    Raises:
        SketchError: syntax error (with line/column), duplicate function,
            call to an undefined function, wait on an undeclared slot
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise SketchError(f"input is not valid UTF-8: {e.reason}", filename, 1, e.start + 1)
    try:
        parser = _Parser(tokenize(text, filename), filename)
        functions = parser.program()
    except RecursionError:
        raise SketchError("nesting too deep", filename, 0, 0)
    _check_semantics(functions, filename)
    return ProgramSketch(tuple(functions), filename)


def parse_expr(text: str) -> Expr:
    """Parse a standalone expression (used when reloading serialized graphs)."""
    try:
        parser = _Parser(tokenize(text, "<expr>"), "<expr>")
        e = parser.expr()
    except RecursionError:
        raise SketchError("expression nesting too deep", "<expr>", 0, 0)
    if parser.peek().kind != "eof":
        parser.error(f"unexpected '{parser.peek().value}' after expression")
    return e


# ---------------------------------------------------------------------------
# Pretty printer
# ---------------------------------------------------------------------------

def _format_mpi(stmt: Mpi) -> str:
    a = stmt.args
    word = stmt.kind.value.lower()
    if stmt.kind in (MpiKind.SEND, MpiKind.RECV, MpiKind.ISEND, MpiKind.IRECV):
        text = f"{word}({format_expr(a.peer)}, {format_expr(a.tag)}, {format_expr(a.size)})"
        if a.request:
            text += f" as {a.request}"
        return text
    if stmt.kind == MpiKind.SENDRECV:
        return (f"sendrecv({format_expr(a.peer)}, {format_expr(a.source)}, "
                f"{format_expr(a.tag)}, {format_expr(a.size)})")
    if stmt.kind.is_wait:
        return f"{word}({', '.join(a.requests)})"
    if a.size is None:
        return word
    return f"{word}({format_expr(a.size)})"


def _format_body(body: Tuple[Stmt, ...], indent: int, out: List[str]):
    pad = "    " * indent
    for stmt in body:
        if isinstance(stmt, Comp):
            out.append(f"{pad}comp {stmt.label} cost {format_expr(stmt.cost)};")
        elif isinstance(stmt, Loop):
            out.append(f"{pad}loop {format_expr(stmt.trip)} {{")
            _format_body(stmt.body, indent + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(stmt, Branch):
            out.append(f"{pad}branch {format_expr(stmt.cond)} {{")
            _format_body(stmt.then, indent + 1, out)
            if stmt.orelse:
                out.append(f"{pad}}} else {{")
                _format_body(stmt.orelse, indent + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(stmt, Call):
            out.append(f"{pad}call {stmt.name}();")
        elif isinstance(stmt, ICall):
            out.append(f"{pad}icall {stmt.slot};")
        else:
            out.append(f"{pad}{_format_mpi(stmt)};")


def format_sketch(program: ProgramSketch) -> str:
    out: List[str] = []
    for i, fn in enumerate(program.functions):
        if i:
            out.append("")
        out.append(f"func {fn.name}() {{")
        _format_body(fn.body, 1, out)
        out.append("}")
    return "\n".join(out) + "\n"
