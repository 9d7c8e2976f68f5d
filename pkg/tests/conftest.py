import pytest

from mrdiffusion.datagen import build_dataset


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    """16 pairs at 32x32, accel 4."""
    root = tmp_path_factory.mktemp("micro")
    return build_dataset(16, 4, "single", 32, 32, 123, root / "train")


_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; returns a reporter."""
    lines = request.config.stash.setdefault(_LINES, [])

    def report(name, ok, detail, elapsed=None, budget=None):
        in_time = budget is None or elapsed <= budget
        timing = "" if elapsed is None else f" [{elapsed:.1f}s / {budget:.0f}s]"
        line = f"{name} {'PASS' if ok and in_time else 'FAIL'}: {detail}{timing}"
        lines.append(line)
        print(line)
        return ok and in_time

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
