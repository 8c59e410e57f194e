import numpy as np
import pytest

from hivfit import model, simlab


@pytest.fixture(scope="session")
def truth_scenario():
    return simlab.ScenarioSpec(n=200, sigma1_sq=0.0, sigma2_sq=0.0, runs=1, spacing="linear")


@pytest.fixture(scope="session")
def noiseless_obs(truth_scenario):
    return simlab.generate_dataset(truth_scenario, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def reference_truth():
    return model.REFERENCE_PARAMS, model.REFERENCE_INIT


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(capsys):
    """Print one pass/fail line and keep it for the session summary."""

    def _report(label: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
