import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtvrp.core import AttributeSet, Instance

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_instance(coords, demands=None, **kw):
    coords = np.asarray(coords, dtype=float)
    if demands is None:
        demands = np.zeros(len(coords))
    return Instance(coords=coords, demands=np.asarray(demands, dtype=float), **kw)


def tw_instance(coords, early, late, service, horizon=4.6, open_=False, demands=None):
    return make_instance(coords, demands, attrs=AttributeSet(tw_active=True, open_active=open_),
                         tw_early=np.asarray(early, float), tw_late=np.asarray(late, float),
                         service=np.asarray(service, float), depot_horizon=horizon)


@pytest.fixture
def square():
    # depot (0,0); customers (1,0), (0,1), (1,1)
    return make_instance([[0, 0], [1, 0], [0, 1], [1, 1]], [0, 0.1, 0.1, 0.1])


def pytest_terminal_summary(terminalreporter):
    try:
        from accept_support import summary_lines
    except ImportError:
        return
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
