from dataclasses import replace

import pytest

from backtrack import (
    COLLECTIVE, NO_EDGE, PATH_COLORS, ROOT, PathStep, PpgView, RootCausePath, ScanState, backtrack_from,
    find_root_causes, load_report, paths_to_dot, prune_comm_edges, rank_paths, report_json, terminal_imbalance,
)
from config import DetectionConfig
from conftest import linked, synthetic_ppg
from errors import ProfileFormatError
from ppg import COMM_DEP, PpgVertexRef
from psg import VertexKind
from simulator import locate

CG = {"loop": 1, "spmv": 2, "branch": 3, "send6": 4, "recv7": 5, "recv9": 6, "send10": 7, "allreduce": 8}
WAIT_THRESHOLD = 100.0  # the ring_report fixture uses the same threshold


def chain(path):
    return [path.seed] + [s.ref for s in path.steps]


class TestRingRootCause:
    def test_top_path_ends_at_injected_compute(self, cg_ring_campaign, ring_report):
        psg, _, _ = cg_ring_campaign
        _, _, report = ring_report
        top = report.paths[0]
        assert top.terminal == PpgVertexRef(4, locate(psg, "cg_ring.sk:4", VertexKind.COMP).id)
        assert top.terminal.vid == CG["spmv"]
        assert len(top.ranks) >= 2 and top.comm_hops >= 1

    def test_top_score(self, ring_report):
        _, _, report = ring_report
        top = report.paths[0]
        # 24000 on rank 4 against a median of 4000
        assert top.terminal_time_us == 24000.0
        assert top.imbalance == pytest.approx(6.0)
        assert top.score == pytest.approx(144000.0)

    def test_paths_are_sorted_by_score(self, ring_report):
        _, _, report = ring_report
        scores = [p.score for p in report.paths]
        assert scores == sorted(scores, reverse=True)

    def test_every_step_follows_a_surviving_edge(self, ring_report):
        ppg, _, report = ring_report
        view = PpgView(ppg, WAIT_THRESHOLD)
        for path in report.paths:
            refs = chain(path)
            for prev, step in zip(refs, path.steps):
                if not step.kind:
                    continue
                assert view.has_edge(prev, step.ref, step.kind, step.role)

    def test_walks_are_bounded(self, ring_report):
        ppg, _, report = ring_report
        for path in report.paths:
            assert len(path.steps) <= ppg.nprocs * len(ppg.psg)
            refs = [s.ref for s in path.steps]
            assert len(refs) == len(set(refs))

    def test_leaves_are_scanned_once(self, ring_report):
        ppg, _, report = ring_report
        seen = set()
        for path in report.paths:
            for step in path.steps:
                if ppg.psg.vertex(step.ref.vid).is_container:
                    continue
                assert step.ref not in seen
                seen.add(step.ref)

    def test_origins(self, ring_report):
        _, _, report = ring_report
        assert {p.origin for p in report.paths} <= {"N", "A"}
        assert report.notes[0].startswith("non-scalable seeds")


class TestPruning:
    def test_threshold_hides_comm_edges(self, ring_report):
        ppg, _, _ = ring_report
        assert prune_comm_edges(ppg, 0.0).comm_edges()
        assert prune_comm_edges(ppg, 1e12).comm_edges() == []
        assert all(e.wait_us > 15000.0 for e in prune_comm_edges(ppg, 15000.0).comm_edges())

    def test_without_comm_edges_walks_stay_on_one_rank(self, ring_report):
        ppg, problems, _ = ring_report
        report = find_root_causes(ppg, problems, 1e12)
        for path in report.paths:
            assert path.comm_hops == 0
            assert len(path.ranks) == 1

    def test_comm_hop_prefers_largest_wait(self, ring_report):
        ppg, _, _ = ring_report
        view = PpgView(ppg, WAIT_THRESHOLD)
        path = backtrack_from(PpgVertexRef(6, CG["recv7"]), view, ScanState())
        hop = path.steps[1]
        assert path.steps[0].ref == PpgVertexRef(6, CG["recv7"])
        assert hop.kind == COMM_DEP and hop.role == "recv"
        assert hop.ref == PpgVertexRef(5, CG["send10"])


class TestWalk:
    def test_collective_stops_a_walk(self, ring_report):
        ppg, _, _ = ring_report
        path = backtrack_from(PpgVertexRef(0, CG["allreduce"]), PpgView(ppg), ScanState())
        assert path.reason == COLLECTIVE and path.steps == ()
        assert path.terminal == PpgVertexRef(0, CG["allreduce"])

    def test_scanned_leaf_stops_a_later_walk(self, ring_report):
        ppg, _, _ = ring_report
        view = PpgView(ppg, WAIT_THRESHOLD)
        state = ScanState()
        first = backtrack_from(PpgVertexRef(4, CG["send6"]), view, state)
        assert PpgVertexRef(4, CG["spmv"]) in state
        second = backtrack_from(PpgVertexRef(4, CG["send6"]), view, state)
        assert second.reason == "Scanned" and second.steps == ()
        assert first.terminal == PpgVertexRef(4, CG["spmv"])

    def test_shared_comm_target_stops_the_second_walk(self, ring_report):
        ppg, _, _ = ring_report
        view = PpgView(ppg, WAIT_THRESHOLD)
        state = ScanState()
        backtrack_from(PpgVertexRef(4, CG["recv7"]), view, state)
        sender = PpgVertexRef(3, CG["send10"])
        targets = {e.dst for e in view.out_edges(sender, COMM_DEP)}
        assert targets == {PpgVertexRef(4, CG["recv7"])}
        second = backtrack_from(sender, view, state)
        assert second.reason == "Scanned"
        assert [s.ref for s in second.steps] == [sender]

    def test_walk_can_end_on_a_container(self, ring_report):
        ppg, _, _ = ring_report
        view = PpgView(ppg, WAIT_THRESHOLD)
        state = ScanState({PpgVertexRef(0, CG["recv7"])})
        path = backtrack_from(PpgVertexRef(0, CG["loop"]), view, state)
        assert [s.ref.vid for s in path.steps] == [CG["loop"], CG["branch"]]
        assert path.reason == "Scanned"
        assert path.terminal == PpgVertexRef(0, CG["branch"])
        assert path.cause is None


class TestRanking:
    def test_imbalance_outweighs_raw_time(self):
        psg = linked("func main() { comp a cost 1; comp b cost 1; }")
        ppg = synthetic_ppg(psg, 3, {1: [100000, 50000, 50000], 2: [150000] * 3})
        flat = RootCausePath(PpgVertexRef(0, 2), (PathStep(PpgVertexRef(0, 2)),), ROOT)
        skewed = RootCausePath(PpgVertexRef(1, 1), (PathStep(PpgVertexRef(1, 1)),), ROOT)
        first, second = rank_paths([flat, skewed], ppg, DetectionConfig())
        assert first.terminal.vid == 1 and first.score == pytest.approx(200000.0)
        assert second.terminal.vid == 2 and second.score == pytest.approx(150000.0)

    def test_waiting_terminal_scores_its_wait(self):
        psg = linked("func main() { recv((rank + 1) mod P, 0, 8); }")
        ppg = synthetic_ppg(psg, 3, {1: [3000, 1000, 1000]}, waits={1: [3000, 1000, 1000]})
        path = RootCausePath(PpgVertexRef(0, 1), (PathStep(PpgVertexRef(0, 1)),), NO_EDGE)
        (scored,) = rank_paths([path], ppg, DetectionConfig())
        assert scored.terminal_time_us == 3000.0
        assert scored.imbalance == pytest.approx(3.0)
        assert scored.score == pytest.approx(9000.0)

    def test_equal_scores_prefer_the_slowest_rank(self, ring_report):
        ppg, _, _ = ring_report
        paths = [RootCausePath(PpgVertexRef(r, CG["spmv"]), (PathStep(PpgVertexRef(r, CG["spmv"])),), ROOT)
                 for r in (0, 4)]
        ranked = rank_paths(paths, ppg, DetectionConfig())
        assert [p.terminal.rank for p in ranked] == [4, 0]
        assert ranked[0].score == ranked[1].score == pytest.approx(144000.0)

    def test_zero_median_falls_back_to_mean(self, ring_report):
        ppg, _, _ = ring_report
        # only rank 2 of the even ranks waits in its send
        t, imbalance, slowest = terminal_imbalance(ppg, CG["send6"], 10.0)
        assert (t, slowest) == (15000.0, 2)
        assert imbalance == pytest.approx(4.0)

    def test_idle_terminal(self):
        psg = linked("func main() { comp a cost 1; }")
        ppg = synthetic_ppg(psg, 2, {1: [0, 0]})
        assert terminal_imbalance(ppg, 1, 10.0) == (0.0, 1.0, 0)


class TestReport:
    def test_mismatched_psg(self, ring_report):
        ppg, problems, _ = ring_report
        with pytest.raises(ProfileFormatError):
            find_root_causes(ppg, replace(problems, psg_hash="f" * 64), WAIT_THRESHOLD)

    def test_json_round_trip(self, tmp_path, ring_report):
        _, _, report = ring_report
        path = tmp_path / "paths.json"
        path.write_text(report_json(report))
        loaded = load_report(str(path))
        assert report_json(loaded) == report_json(report)
        assert loaded.paths[0].terminal == report.paths[0].terminal
        assert loaded.paths[0].cause == report.paths[0].cause == PpgVertexRef(4, CG["spmv"])

    def test_malformed_report(self, tmp_path):
        path = tmp_path / "paths.json"
        path.write_text('{"paths": []}')
        with pytest.raises(ProfileFormatError):
            load_report(str(path))
        path.write_text("{")
        with pytest.raises(ProfileFormatError):
            load_report(str(path))

    def test_dot_overlay(self, ring_report):
        ppg, _, report = ring_report
        text = paths_to_dot(ppg, report, top=1)
        assert text.startswith("digraph PPG {")
        assert PATH_COLORS[0] in text
        assert PATH_COLORS[1] not in text
