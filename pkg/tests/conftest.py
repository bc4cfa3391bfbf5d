import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest  # noqa: E402


@pytest.fixture(scope="session")
def desk_records():
    """16 frames: four sequences of four frames from a fixed seed."""
    from quadbev.synthworld import generate_samples
    return generate_samples(0, 4, 4)


def pytest_terminal_summary(terminalreporter):
    import helpers
    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in helpers.ACCEPTANCE:
            terminalreporter.write_line(line)
