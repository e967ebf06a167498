import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quantseg.data import SynthConfig, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_samples():
    return generate_synthetic(SynthConfig(n_images=6, size=(32, 32), seed=3))


@pytest.fixture(scope="session")
def tiny_spec():
    from quantseg.model import ModelSpec, Stage

    return ModelSpec(
        input_channels=3,
        trunk=[Stage(4, 3, 1), Stage(8, 3, 2)],
        upsample=[Stage(4, 4, 2)],
        head_channels=4,
        seed=0,
    )


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    seen = []

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        seen.append(line)
        request.config.stash[VERDICTS].append(line)
        print(line)
        assert ok, line

    yield record
    if not seen:
        line = f"FAIL  {request.node.name}: raised before a verdict"
        request.config.stash[VERDICTS].append(line)
        print(line)
