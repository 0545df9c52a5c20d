import numpy as np
import pytest
import torch

from thunderface.corpus import CorpusConfig, build_corpus
from thunderface.face_model import make_synthetic_template

torch.set_num_threads(1)

CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])


@pytest.fixture
def criterion(capsys):
    """Record (and print) one pass/fail line per acceptance criterion."""

    def report(number, name, ok, detail=""):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        CRITERIA[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


@pytest.fixture(scope="session")
def template():
    return make_synthetic_template(0)


SMALL = dict(n_train=12, n_val=4, n_test=4, min_frames=20, max_frames=30)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(CorpusConfig(**SMALL))


@pytest.fixture(scope="session")
def corpus():
    return build_corpus()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
