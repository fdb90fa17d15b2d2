import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dpcn", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dpcn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    def emit(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
