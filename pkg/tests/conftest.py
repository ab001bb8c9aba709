import pytest

from dotdfs.harness import spawn_loopback


@pytest.fixture
def loopback():
    with spawn_loopback() as fx:
        yield fx


@pytest.fixture
def tmp_file(tmp_path):
    from dotdfs.harness import write_random_file

    def make(size, seed=0, name="src.bin"):
        path = tmp_path / name
        digest = write_random_file(path, size, seed)
        return path, digest

    return make


def wait_until(pred, timeout=10.0, step=0.01):
    import time

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return pred()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
