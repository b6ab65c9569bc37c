import math

import numpy as np
import pytest

from sparse_bvm.family import KINDS, get_family


def make_family(kind):
    return get_family(kind, 2.0 if kind == "negbin_log" else None)


def proper_tau(family, rng):
    return 1.0 if family.discrete else float(rng.uniform(0.5, 2.0))


@pytest.fixture(params=KINDS)
def family(request):
    return make_family(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def normalized_design(n, G, seed=0, sizes=None):
    from sparse_bvm.design import GroupedDesign

    sizes = sizes or [1] * G
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, sum(sizes)))
    x *= math.sqrt(n) / np.linalg.norm(x, axis=0)
    return GroupedDesign(x, sizes)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
