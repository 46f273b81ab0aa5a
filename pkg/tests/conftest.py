import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pctelescope.comm import spawn_world

settings.register_profile(
    "repo", deadline=None, max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "40")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def run(n, fn, *args, **kwargs):
    """Run ``fn(comm, *args)`` on ``n`` ranks and return the per-rank results."""
    return spawn_world(n, fn, *args, **kwargs)


def run0(n, fn, *args, **kwargs):
    return spawn_world(n, fn, *args, **kwargs)[0]


def random_sparse(rng, n, m=None, density=0.2):
    import scipy.sparse as sp

    m = n if m is None else m
    A = sp.random(n, m, density=density, random_state=np.random.RandomState(rng.integers(2**31)), format="csr")
    A.sum_duplicates()
    A.sort_indices()
    return A


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def rank_error(n, fn, *args, **kwargs):
    """Run on ``n`` ranks and return the exception the first failing rank raised."""
    from pctelescope.comm import RankFailure

    with pytest.raises(RankFailure) as info:
        spawn_world(n, fn, *args, **kwargs)
    return info.value.error


# ------------------------------------------------------ acceptance summary
_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    prev = _CRITERIA.get(num, (title, True, 0.0))
    _CRITERIA[num] = (title, prev[1] and rep.passed, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok, secs = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  ({secs:6.1f} s)  {title}")
