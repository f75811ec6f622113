import numpy as np
import pytest

from serpbandit.clicklog import Click, LabeledSerp


def make_serp(
    serp_id=0,
    query_id=0,
    time_passed=0,
    terms=(1, 2),
    urls=None,
    clicks=(),
):
    """Build a labeled serp; clicks are (url_id, grade) pairs."""
    if urls is None:
        urls = tuple(range(10, 20))
    serp = LabeledSerp(
        serp_id=serp_id,
        query_id=query_id,
        time_passed=time_passed,
        terms=tuple(terms),
        results=tuple((u, u) for u in urls),
    )
    t = time_passed + 1
    for url_id, grade in clicks:
        serp.clicks.append(Click(url_id=url_id, time_passed=t, dwell=0, grade=grade))
        t += 1
    return serp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
