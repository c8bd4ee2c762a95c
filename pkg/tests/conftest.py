import functools

import pytest

from busleak.emulator import EmulationConfig, emulate
from busleak.emulator.models import REFERENCE_MODELS
from busleak.emulator.probes import header_probe_runs, model_probe_runs
from busleak.knowledge import build_knowledge_db
from busleak.traffic import process_traffic


@functools.lru_cache(maxsize=None)
def profiled_db(platform: str):
    """Knowledge DB built from probe captures only (no reference model involved)."""
    hr = [(process_traffic(r.trace), issued) for r, issued in header_probe_runs(platform)]
    mr = [(process_traffic(r.trace), r.launch_log, m) for r, m in model_probe_runs(platform)]
    return build_knowledge_db(hr, mr, platform)


@functools.lru_cache(maxsize=8)
def emulated(name: str, seed: int = 0, platform: str = "A"):
    return emulate(REFERENCE_MODELS[name](), EmulationConfig(platform_profile=platform, rng_seed=seed))


@pytest.fixture(scope="session")
def db_a():
    return profiled_db("A")


@pytest.fixture(scope="session")
def db_b():
    return profiled_db("B")


# -- acceptance summary: one line per criterion ------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and (rep.when == "call" or rep.failed):
        ok = rep.passed and _CRITERIA.get(mark.args[0], True)
        _CRITERIA[mark.args[0]] = ok


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
