import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def ncc_model():
    from vc_intervene.ncc_filter import train_ncc
    return train_ncc(seed=0)


@pytest.fixture(scope="session")
def desk():
    from vc_intervene.experiments import desk_task
    return desk_task()


@pytest.fixture(scope="session")
def reference_world():
    from vc_intervene.scm_sim import fixture_world
    return fixture_world("reference_world")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
