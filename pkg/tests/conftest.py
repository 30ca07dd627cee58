import time

import numpy as np
import pytest
import torch

from cycletrack.backbone import EncoderConfig
from cycletrack.data import SceneSpec, generate

FAST_SUITE_BUDGET_S = 600.0

torch.set_num_threads(1)

_durations = {"fast": 0.0, "slow": 0.0}
ACCEPTANCE_LINES: list[str] = []
RUN_LAST = "test_fast_suite_budget"


def pytest_collection_modifyitems(session, config, items):
    # the suite-time criterion has to see every other test first
    last = [i for i in items if i.name == RUN_LAST]
    items[:] = [i for i in items if i.name != RUN_LAST] + last


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_protocol(item, nextitem):
    t0 = time.perf_counter()
    yield
    key = "slow" if item.get_closest_marker("slow") else "fast"
    _durations[key] += time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    terminalreporter.write_line(
        f"time in non-slow tests: {_durations['fast']:.1f} s (budget {FAST_SUITE_BUDGET_S:.0f} s); "
        f"slow tests: {_durations['slow']:.1f} s")


def fast_suite_seconds():
    return _durations["fast"]


@pytest.fixture
def criterion():
    """``criterion(n, name, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""
    def record(n, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


@pytest.fixture
def tiny_cfg():
    """Small encoder for tests that train."""
    return EncoderConfig(embed_dim=32, depth=1, num_heads=2)


@pytest.fixture
def static_sequence():
    spec = SceneSpec(speed=0.0, length=5, start=(80.0, 80.0))
    seq = generate(spec, 3)
    seq.name = "static"
    return seq


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
