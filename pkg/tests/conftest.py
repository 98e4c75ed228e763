import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from robustfilter.config import ExperimentConfig, ModelConfig  # noqa: E402

# Acceptance tests append (criterion, passed, detail) here; printed at the end of the run.
CRITERIA: list = []


@pytest.fixture(scope="session")
def validated_cfg() -> ExperimentConfig:
    """A setting where every standing hypothesis holds: tau = 4, iota = 0.9."""
    return ExperimentConfig(model=ModelConfig(tau=4.0), delta=3.0, iota=0.9)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(CRITERIA, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
