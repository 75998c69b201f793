import json

import pytest

from conftest import FIXTURES, build, build_fixture, fixture_text, linked
from errors import DeadlockError, ScenarioError, SimulationError
from ppg import aggregate_records
from psg import VertexKind
from simulator import Injection, Scenario, load_scenario, locate, scenario_from_dict, simulate
from sketch import MpiKind, parse_expr

CG = {"root": 0, "spmv": 2, "send6": 4, "recv7": 5, "recv9": 6, "send10": 7, "allreduce": 8}


def perf_by_vertex(profile):
    perf, _ = aggregate_records(profile.records)
    return perf


@pytest.fixture(scope="module")
def cg_ring_p8():
    psg = build_fixture("cg_ring.sk")
    return psg, simulate(psg, load_scenario(str(FIXTURES / "cg_ring.scenario.json")))


class TestRing:
    def test_vertex_layout(self, cg_ring_p8):
        psg, _ = cg_ring_p8
        assert psg.vertex(CG["spmv"]).label == "spmv"
        assert psg.vertex(CG["allreduce"]).mpi == MpiKind.ALLREDUCE
        assert [psg.vertex(CG[k]).loc.line for k in ("send6", "recv7", "recv9", "send10")] == [6, 7, 9, 10]

    def test_root_time_is_the_makespan(self, cg_ring_p8):
        _, profile = cg_ring_p8
        perf = perf_by_vertex(profile)
        assert [perf[(r, CG["root"])].time_us for r in range(8)] == [24000.0] * 8

    def test_injected_rank_computes_longer(self, cg_ring_p8):
        _, profile = cg_ring_p8
        perf = perf_by_vertex(profile)
        spmv = [perf[(r, CG["spmv"])].time_us for r in range(8)]
        assert spmv == [4000.0] * 4 + [24000.0] + [4000.0] * 3
        assert all(perf[(r, CG["spmv"])].wait_us == 0.0 for r in range(8))

    def test_waits_propagate_around_the_ring(self, cg_ring_p8):
        _, profile = cg_ring_p8
        perf = perf_by_vertex(profile)

        def waits(name):
            return {r: perf[(r, CG[name])].wait_us for r in range(8)
                    if (r, CG[name]) in perf and perf[(r, CG[name])].wait_us > 0}

        assert waits("send6") == {2: 15000.0}
        assert waits("recv7") == {0: 15000.0, 6: 20000.0}
        assert waits("recv9") == {5: 20000.0, 7: 15000.0}
        assert waits("send10") == {1: 15000.0, 3: 20000.0}
        assert waits("allreduce") == {0: 5000.0, 1: 5000.0, 2: 5000.0, 7: 5000.0}

    def test_compute_plus_wait_equals_final_clock(self, cg_ring_p8):
        psg, profile = cg_ring_p8
        perf = perf_by_vertex(profile)
        for r in range(8):
            compute = sum(perf[(r, v.id)].time_us for v in psg.vertices
                          if v.kind == VertexKind.COMP and (r, v.id) in perf)
            waiting = sum(perf[(r, v.id)].wait_us for v in psg.vertices
                          if v.kind == VertexKind.MPI and (r, v.id) in perf)
            assert compute + waiting == perf[(r, CG["root"])].time_us

    def test_deterministic(self, cg_ring_p8):
        psg, profile = cg_ring_p8
        assert simulate(psg, load_scenario(str(FIXTURES / "cg_ring.scenario.json"))) == profile

    def test_channel_events_per_rank(self, cg_ring_p8):
        _, profile = cg_ring_p8
        sends = [e for e in profile.comm if e.rank == 0 and e.kind == MpiKind.SEND]
        assert [(e.peer, e.tag, e.size, e.seq) for e in sends] == [(1, 0, 1024, i) for i in range(4)]
        collectives = [e for e in profile.comm if e.kind == MpiKind.ALLREDUCE]
        assert len(collectives) == 8


class TestMessageModel:
    def test_link_costs(self):
        psg = linked(fixture_text("nested.sk"), "nested.sk")
        profile = simulate(psg, Scenario(2, latency_us=10.0, per_byte_us=0.5))
        perf = perf_by_vertex(profile)
        # send completes at 10100 + 64 * 0.5 + 10, bcast adds one latency
        assert perf[(0, 0)].time_us == perf[(1, 0)].time_us == 10152.0
        assert perf[(1, 9)].wait_us == 42.0

    def test_anysource_status(self):
        psg = build_fixture("anysource.sk")
        profile = simulate(psg, Scenario(4))
        waits = [e for e in profile.comm if e.kind == MpiKind.WAIT]
        assert [(e.peer, e.tag, e.request) for e in waits] == [(1, 5, "r"), (2, 5, "r"), (3, 5, "r")]
        irecvs = [e for e in profile.comm if e.kind == MpiKind.IRECV]
        assert {e.peer for e in irecvs} == {-1}

    def test_blocking_anysource_records_resolved_peer(self):
        profile = simulate(build_fixture("anysource_blocking.sk"), Scenario(4))
        recvs = [e for e in profile.comm if e.kind == MpiKind.RECV]
        assert [(e.peer, e.resolved_peer) for e in recvs] == [(-1, 1), (-1, 2), (-1, 3)]

    def test_recursion(self):
        psg = build_fixture("recursive.sk")
        profile = simulate(psg, Scenario(4))
        comp = next(v for v in psg.vertices if v.kind == VertexKind.COMP)
        contexts = [r.context for r in profile.records if r.rank == 0 and r.vertex_id == comp.id]
        assert len(contexts) == 4
        perf = perf_by_vertex(profile)
        assert perf[(0, comp.id)].time_us == 40.0
        tags = [e.tag for e in profile.comm if e.rank == 0 and e.kind == MpiKind.SENDRECV and e.leg == "send"]
        assert tags == [0, 1, 2]

    def test_recursion_limit(self):
        with pytest.raises(SimulationError, match="recursion"):
            simulate(build_fixture("recursive.sk"), Scenario(4, max_recursion=2))

    def test_sampling_keeps_collectives(self):
        psg = linked(fixture_text("nested.sk"), "nested.sk")
        profile = simulate(psg, Scenario(2, sampling_rate=0.0))
        assert {e.kind for e in profile.comm} == {MpiKind.BCAST}
        assert perf_by_vertex(profile)[(0, 0)].time_us == 10100.0

    def test_counters(self):
        psg = linked(fixture_text("nested.sk"), "nested.sk")
        scenario = Scenario(2, counters={"nested.sk:3": {"flops": parse_expr("2")}})
        perf = perf_by_vertex(simulate(psg, scenario))
        assert perf[(0, 2)].counters == {"flops": 200}
        assert perf[(0, 4)].counters == {}


class TestFailures:
    def test_deadlock(self):
        psg = build("func main() {\n  recv((rank + 1) mod P, 0, 8);\n  send((rank + 1) mod P, 0, 8);\n}\n")
        with pytest.raises(DeadlockError) as exc:
            simulate(psg, Scenario(2))
        assert exc.value.stuck == {0: "Recv@t.sk:2", 1: "Recv@t.sk:2"}

    def test_peer_out_of_range(self):
        with pytest.raises(SimulationError, match="out of range"):
            simulate(build("func main() { send(rank + 1, 0, 8); }"), Scenario(1))

    def test_collective_mismatch(self):
        psg = build("func main() { branch rank == 0 { barrier; } else { allreduce(8); } }")
        with pytest.raises(SimulationError, match="different vertices"):
            simulate(psg, Scenario(2))

    def test_negative_trip_count(self):
        psg = build("func main() { loop rank - 1 { barrier; } }")
        with pytest.raises(SimulationError, match="negative trip count"):
            simulate(psg, Scenario(2))

    def test_unwaited_request(self):
        psg = build("func main() { isend((rank + 1) mod P, 0, 8) as s; irecv((rank + 1) mod P, 0, 8) as r; }")
        with pytest.raises(SimulationError, match="unwaited"):
            simulate(psg, Scenario(2))

    def test_injection_must_hit_a_comp(self):
        psg = linked(fixture_text("nested.sk"), "nested.sk")
        scenario = Scenario(2, injections=(Injection("nested.sk:99", parse_expr("1"), parse_expr("5")),))
        with pytest.raises(ScenarioError):
            simulate(psg, scenario)


class TestScenario:
    def test_from_dict(self):
        scenario = scenario_from_dict({"P": 8, "seed": 3, "injections": [{"where": "a.sk:4", "cost": "P * 2"}],
                                       "link": {"latency_us": 1.5}}, nprocs=4)
        assert scenario.nprocs == 4 and scenario.latency_us == 1.5
        assert scenario.injections[0].ranks == parse_expr("1")
        assert scenario.run_id == "run-P4"

    def test_at_scale_derives_seed(self):
        scenario = Scenario(4, seed=7, name="cg")
        assert scenario.at_scale(8).seed == 7 ^ 8
        assert scenario.at_scale(8).run_id == "cg-P8"

    @pytest.mark.parametrize("data", [
        {"P": 0},
        {"P": 4, "sampling_rate": 2},
        {"P": 4, "injections": [{"where": "a.sk:1", "cost": "1 +"}]},
        {"P": 4, "injections": [{"where": "a.sk:1"}]},
        [],
    ])
    def test_invalid(self, data):
        with pytest.raises(ScenarioError):
            scenario_from_dict(data)

    def test_load_uses_file_stem_without_name(self, tmp_path):
        path = tmp_path / "weak_scaling.json"
        path.write_text(json.dumps({"P": 2}))
        assert load_scenario(str(path)).name == "weak_scaling"
        assert load_scenario(str(FIXTURES / "cg_ring.scenario.json"), 4).run_id == "cg_ring-P4"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError):
            load_scenario(str(tmp_path / "nope.json"))

    def test_locate_prefers_innermost(self):
        psg = linked(fixture_text("nested.sk"), "nested.sk")
        assert locate(psg, "nested.sk:5").id == 4
        assert locate(psg, "nested.sk:2", VertexKind.LOOP).id == 1
        with pytest.raises(ScenarioError):
            locate(psg, "nested.sk:2", VertexKind.COMP)
