import time

import pytest

from letac import cli

SMOKE_INI = """\
[collect]
trials_per_material = 6
[model]
N = 5
M = 4
hidden = 8
[train]
epochs = 4
steps_per_epoch = 20
checkpoint_every = 2
[scenario]
seeds = 2
[bench]
steps = 50
"""


@pytest.fixture(scope="session")
def smoke_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "smoke.ini"
    path.write_text(SMOKE_INI)
    return path


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory, smoke_ini):
    """collect + train with the tiny config; returns (out dir, train seconds)."""
    out = tmp_path_factory.mktemp("smoke")
    assert cli.main(["--config", str(smoke_ini), "--out", str(out), "collect"]) == 0
    t0 = time.perf_counter()
    assert cli.main(["--config", str(smoke_ini), "--out", str(out), "train"]) == 0
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """collect + train with the default configuration; returns (out dir, seconds)."""
    out = tmp_path_factory.mktemp("default")
    t0 = time.perf_counter()
    assert cli.main(["--out", str(out), "collect"]) == 0
    assert cli.main(["--out", str(out), "train"]) == 0
    return out, time.perf_counter() - t0


ACCEPTANCE = {}


@pytest.fixture
def criterion(capsys):
    """record(number, ok, detail): print the verdict line, remember it, then assert."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
