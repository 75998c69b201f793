import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import PROPERTY_SETTINGS, fixture_text
from errors import EvalError, SketchError
from sketch import (
    ANY_SOURCE, BinOp, Branch, Call, Comp, Location, Loop, Mpi, MpiKind, Num, Unary, Var,
    eval_expr, format_expr, format_sketch, parse_expr, parse_sketch, variables,
)


class TestExpressions:
    def test_precedence(self):
        assert eval_expr(parse_expr("1 + 2 * 3"), {}) == 7
        assert eval_expr(parse_expr("(1 + 2) * 3"), {}) == 9
        assert eval_expr(parse_expr("10 - 4 - 3"), {}) == 3

    def test_division_truncates_toward_zero(self):
        assert eval_expr(parse_expr("7 / 2"), {}) == 3
        assert eval_expr(parse_expr("-7 / 2"), {}) == -3
        assert eval_expr(parse_expr("-7 mod 2"), {}) == -1
        assert eval_expr(parse_expr("7 % 3"), {}) == 1

    def test_comparisons_and_logic_yield_bits(self):
        env = {"rank": 3, "P": 8}
        assert eval_expr(parse_expr("rank mod 2 == 1 and P > 4"), env) == 1
        assert eval_expr(parse_expr("rank < 2 || P == 4"), env) == 0
        assert eval_expr(parse_expr("!rank"), env) == 0

    def test_unary_minus_is_any_source(self):
        assert eval_expr(parse_expr("-1"), {}) == ANY_SOURCE

    def test_division_by_zero(self):
        with pytest.raises(EvalError):
            eval_expr(parse_expr("P / (rank - rank)"), {"P": 4, "rank": 1})
        with pytest.raises(EvalError):
            eval_expr(parse_expr("3 mod 0"), {})

    def test_unbound_identifier(self):
        with pytest.raises(EvalError) as exc:
            eval_expr(parse_expr("rank + nope"), {"rank": 0})
        assert exc.value.detail["name"] == "nope"

    def test_variables(self):
        assert variables(parse_expr("(rank + 1) mod P")) == {"rank", "P"}
        assert variables(parse_expr("42")) == frozenset()

    def test_trailing_garbage(self):
        with pytest.raises(SketchError):
            parse_expr("1 + 2 )")


_atoms = st.one_of(st.integers(min_value=0, max_value=50).map(Num), st.sampled_from(["rank", "P", "iter"]).map(Var))


def _exprs():
    return st.recursive(
        _atoms,
        lambda inner: st.one_of(
            st.builds(BinOp, st.sampled_from(["+", "-", "*", "==", "<", "and", "or"]), inner, inner),
            st.builds(Unary, st.just("neg"), inner),
        ),
        max_leaves=12,
    )


class TestExpressionProperties:
    @PROPERTY_SETTINGS
    @given(_exprs(), st.integers(0, 7), st.integers(1, 16), st.integers(0, 9))
    def test_printed_expression_evaluates_the_same(self, e, rank, nprocs, it):
        env = {"rank": rank, "P": nprocs, "iter": it}
        assert eval_expr(parse_expr(format_expr(e)), env) == eval_expr(e, env)


class TestParser:
    def test_nested_structure(self):
        program = parse_sketch(fixture_text("nested.sk"), "nested.sk")
        assert [fn.name for fn in program.functions] == ["main", "foo"]
        main = program.function("main")
        outer, call, bcast = main.body
        assert isinstance(outer, Loop) and outer.loc == Location("nested.sk", 2)
        assert [type(s) for s in outer.body] == [Comp, Loop, Loop]
        assert isinstance(call, Call) and call.name == "foo"
        assert isinstance(bcast, Mpi) and bcast.kind == MpiKind.BCAST
        branch = program.function("foo").body[0]
        assert isinstance(branch, Branch)
        assert branch.then[0].kind == MpiKind.SEND and branch.orelse[0].kind == MpiKind.RECV
        assert branch.orelse[0].loc.line == 19

    def test_call_graph_and_slots(self):
        program = parse_sketch("""
            func main() { call a(); icall hook; call a(); }
            func a() { call b(); }
            func b() { comp x cost 1; }
        """)
        assert program.call_graph() == {"main": ("a",), "a": ("b",), "b": ()}
        assert program.icall_slots() == ("hook",)

    def test_nonblocking_and_collectives(self):
        program = parse_sketch("""
            func main() {
                isend(0, 1, 8) as s;
                irecv(-1, 1, 8) as r;
                waitall(s, r);
                sendrecv(1, 0, 2, 16);
                barrier;
                allreduce(8 * P);
            }
        """)
        kinds = [s.kind for s in program.function("main").body]
        assert kinds == [MpiKind.ISEND, MpiKind.IRECV, MpiKind.WAITALL, MpiKind.SENDRECV,
                         MpiKind.BARRIER, MpiKind.ALLREDUCE]
        waitall = program.function("main").body[2]
        assert waitall.args.requests == ("s", "r")

    def test_bytes_input(self):
        program = parse_sketch(b"func main() { comp x cost 1; }")
        assert program.function("main").body[0].label == "x"

    @pytest.mark.parametrize("text, line, column", [
        ("func main() { comp x cost ; }", 1, 27),
        ("func main() {\n  loop 3 {\n    comp x cost 1;\n", 4, 1),
        ("func main() { send(0, 1) ; }", 1, 24),
        ("func main() { comp x cost 1 $ }", 1, 29),
    ])
    def test_syntax_errors_carry_position(self, text, line, column):
        with pytest.raises(SketchError) as exc:
            parse_sketch(text, "bad.sk")
        assert (exc.value.file, exc.value.line, exc.value.column) == ("bad.sk", line, column)

    def test_empty_input(self):
        with pytest.raises(SketchError):
            parse_sketch("   # nothing here\n")

    def test_invalid_utf8(self):
        with pytest.raises(SketchError):
            parse_sketch(b"func main() { comp \xff cost 1; }")

    def test_semantic_errors(self):
        with pytest.raises(SketchError, match="undefined function"):
            parse_sketch("func main() { call missing(); }")
        with pytest.raises(SketchError, match="duplicate function"):
            parse_sketch("func main() { barrier; } func main() { barrier; }")
        with pytest.raises(SketchError, match="undeclared request slot"):
            parse_sketch("func main() { wait(r); }")

    def test_format_round_trip(self):
        for name in ("nested.sk", "cg_ring.sk", "anysource.sk", "recursive.sk"):
            program = parse_sketch(fixture_text(name), name)
            assert parse_sketch(format_sketch(program), name) == program

    def test_location_parse(self):
        assert Location.parse("nested.sk:3-7") == Location("nested.sk", 3, 7)
        assert str(Location("nested.sk", 3, 7)) == "nested.sk:3-7"
        assert Location.parse("dir/a:b.sk:12").file == "dir/a:b.sk"
        with pytest.raises(ValueError):
            Location.parse("nowhere")
