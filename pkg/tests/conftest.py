import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from gridzsl.bench import (
    Benchmark,
    ResultsTable,
    ScenarioKind,
    SearchSpace,
    baseline_mse,
    generate_bench_data,
    grid_search,
)
from gridzsl.gnn import LayerKind
from gridzsl.grid_model import load_grid

DATA = Path(__file__).resolve().parents[1] / "src" / "gridzsl" / "data"

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def mv30():
    return load_grid(DATA / "mv30.json")


@pytest.fixture(scope="session")
def mv15():
    return load_grid(DATA / "mv15.json")


@dataclass
class Sweep:
    bench: Benchmark
    space: SearchSpace
    table: ResultsTable
    baseline: float
    seconds: float


@pytest.fixture(scope="session")
def fixture_sweep(mv30):
    """OD, TC1 and TC2 over the reduced space on a two-day 30-bus series."""
    start = time.perf_counter()
    bench = Benchmark(generate_bench_data(mv30, None, 192, seed=0))
    space = SearchSpace(models=tuple(LayerKind), layers=(1, 2, 3))
    baseline = baseline_mse(bench, space)
    outcome = grid_search([ScenarioKind.OD, ScenarioKind.TC1, ScenarioKind.TC2], space, bench)
    assert not outcome.errors
    return Sweep(bench, space, outcome.table, baseline, time.perf_counter() - start)


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[_VERDICTS]

    def record(number: int, passed: bool, detail: str) -> None:
        lines.append((number, f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_VERDICTS]
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
