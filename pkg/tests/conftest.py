import pytest

from j1939sim.attacks import catalog, run_scenario

ACCEPTANCE_SEED = 42
_RESULTS = {}
CRITERIA: dict[int, tuple[bool, str]] = {}


def scenario(sid, seed=ACCEPTANCE_SEED):
    """Run (once per session) and return the result of catalog scenario ``sid``."""
    key = (sid, seed)
    if key not in _RESULTS:
        spec = next(s for s in catalog() if s.id == sid)
        _RESULTS[key] = run_scenario(spec, seed=seed)
    return _RESULTS[key]


@pytest.fixture
def run():
    return scenario


@pytest.fixture
def criterion():
    def record(n, ok, detail=""):
        CRITERIA[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
