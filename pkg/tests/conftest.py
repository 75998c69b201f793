"""Shared fixtures and helpers for the test suite."""

import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parent.parent
sys.path.append(os.path.join(ROOT, 'scripts'))
sys.path.append(str(ROOT))

from backtrack import find_root_causes  # noqa: E402
from config import DetectionConfig  # noqa: E402
from detect import detect_problems  # noqa: E402
from ppg import PPG, assemble_ppg  # noqa: E402
from profiling import PerfVector  # noqa: E402
from psg import PSG, build_psg, build_program_psg  # noqa: E402
from simulator import Scenario, load_scenario, run_campaign, simulate  # noqa: E402
from sketch import parse_sketch  # noqa: E402

FIXTURES = Path(__file__).resolve().parent / "fixtures"

PROPERTY_SETTINGS = settings(
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much],
)
# generated whole programs, per process count
PROGRAM_SETTINGS = settings(PROPERTY_SETTINGS, max_examples=200)


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def build(text: str, filename: str = "t.sk", max_loop_depth: int = 10) -> PSG:
    psg, _ = build_psg(parse_sketch(text, filename), max_loop_depth)
    return psg


def build_fixture(name: str, max_loop_depth: int = 10) -> PSG:
    return build(fixture_text(name), name, max_loop_depth)


def linked(text: str, filename: str = "t.sk") -> PSG:
    return build_program_psg(parse_sketch(text, filename))


def run(psg: PSG, nprocs: int, **kwargs) -> PPG:
    """Simulate and assemble in one go."""
    return assemble_ppg(psg, simulate(psg, Scenario(nprocs, **kwargs)))


def synthetic_ppg(psg: PSG, nprocs: int, times, run_id: str = None, waits=None) -> PPG:
    """
    A PPG without edges from per-(rank, vid) times.

    Args:
        times: {vid: [time per rank]}
    """
    perf = {}
    for vid, per_rank in times.items():
        for rank, t in enumerate(per_rank):
            w = waits[vid][rank] if waits and vid in waits else 0.0
            perf[(rank, vid)] = PerfVector(float(t), float(w))
    return PPG(run_id or f"synthetic-P{nprocs}", nprocs, psg, perf, ())


@pytest.fixture
def nested_psg() -> PSG:
    return linked(fixture_text("nested.sk"), "nested.sk")


@pytest.fixture(scope="session")
def cg_ring_campaign():
    """CG-like ring at P = 4 and 8 with extra cost on rank P/2 (rank 4 at P = 8)."""
    psg = build_fixture("cg_ring.sk")
    base = load_scenario(str(FIXTURES / "cg_ring.scenario.json"), 4)
    profiles = run_campaign(psg, base, [4, 8])
    runs = [assemble_ppg(psg, p) for p in profiles]
    return psg, profiles, runs


@pytest.fixture(scope="session")
def cg_ring_late_campaign():
    """Ring variant whose injected spmv on rank 4 runs right after that rank's send."""
    psg = build_fixture("cg_ring_late.sk")
    base = load_scenario(str(FIXTURES / "cg_ring_late.scenario.json"), 4)
    runs = [assemble_ppg(psg, p) for p in run_campaign(psg, base, [4, 8])]
    return psg, runs


@pytest.fixture
def default_cfg() -> DetectionConfig:
    return DetectionConfig()


@pytest.fixture(scope="session")
def ring_report(cg_ring_campaign):
    """(P = 8 PPG, problems over both scales, path report at a 100 us wait threshold)."""
    _, _, runs = cg_ring_campaign
    problems = detect_problems(runs, DetectionConfig())
    return runs[1], problems, find_root_causes(runs[1], problems, 100.0)
