import time
from pathlib import Path

import pytest

from dcemu import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# (criterion, PASS/FAIL, detail) lines filled in by test_acceptance
ACCEPTANCE_LINES = []


def run_pipeline(tmp_dir, config_name, commands, edit=None):
    """Copy a shipped config into ``tmp_dir`` and run CLI commands against it.

    ``edit`` optionally rewrites the config text first.  Returns the config
    path and the wall time of each command.
    """
    tmp_dir = Path(tmp_dir)
    conf = tmp_dir / config_name
    text = (CONFIGS / config_name).read_text()
    conf.write_text(edit(text) if edit else text)
    timings = {}
    for cmd in commands:
        argv = [cmd[0], "--config", str(conf), *cmd[1:]] if isinstance(cmd, tuple) else [cmd, "--config", str(conf)]
        t0 = time.perf_counter()
        code = cli.main(argv)
        timings[argv[0]] = time.perf_counter() - t0
        if code != 0:
            raise RuntimeError(f"emu {' '.join(argv)} exited with {code}")
    return conf, timings


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Smoke configuration: generate, train 5 epochs, Bayesian inference, evaluate."""
    root = tmp_path_factory.mktemp("smoke")
    conf, timings = run_pipeline(root, "smoke.ini", ["generate", "train", "infer", "evaluate"])
    return root, conf, timings


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """Desk-scale oracle-recovery run on 8 training tiles."""
    root = tmp_path_factory.mktemp("accept")
    conf, timings = run_pipeline(root, "acceptance.ini", ["generate", "train", "infer", "evaluate"])
    return root, conf, timings


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{status} criterion {number}: {detail}")


def pytest_collection_modifyitems(items):
    for item in items:
        if {"smoke_run", "acceptance_run"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
