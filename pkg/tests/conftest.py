import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).resolve().parents[1] / "src" / "invprop" / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def toy():
    from invprop.network import load_box, load_network, load_output_set
    return (load_network(DATA / "toy_network.json"), load_box(DATA / "toy_box.json"),
            load_output_set(DATA / "toy_outset.json"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
