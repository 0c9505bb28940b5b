import numpy as np
import pytest

from magloc.mfmap import map_from_function
from magloc.sim import DEFAULT_BASE_FIELD, DipoleSource, hex_rig, random_dipoles, world_field


@pytest.fixture(scope="session")
def dipoles():
    # a few strong sources below a 2 m x 2 m patch
    return random_dipoles(6, (-1.5, -1.5, -1.5, 1.5, 1.5, -1.0), (100.0, 300.0), rng=11)


@pytest.fixture(scope="session")
def exact_map(dipoles):
    """Field sampled exactly at cell centers over a thin slab around z = 0."""
    return map_from_function(lambda p: world_field(dipoles, DEFAULT_BASE_FIELD, p),
                             (-1.0, -1.0, -0.1, 1.0, 1.0, 0.1), 0.05, DEFAULT_BASE_FIELD)


@pytest.fixture(scope="session")
def rig7():
    return hex_rig(7, 0.13)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotvec(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


# acceptance criteria: each test marked ``acceptance(name)`` gets one summary
# line; ``criterion_detail`` attaches the measured numbers to it
_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion reported in the summary")
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion_detail(request):
    def note(text):
        request.node.user_properties.append(("detail", text))
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    item.config.stash[_RESULTS][mark.args[0]] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        ok, detail = results[name]
        terminalreporter.write_line("%s  %s  %s" % ("PASS" if ok else "FAIL", name, detail))
