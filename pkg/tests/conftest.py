import pytest

_RESULTS_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")
    config.stash[_RESULTS_KEY] = {}


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with the numbers it measured."""
    d = {}
    request.node.stash[_RESULTS_KEY] = d
    return d


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call":
        return
    detail = item.stash.get(_RESULTS_KEY, {})
    item.config.stash[_RESULTS_KEY][mark.args[0]] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS_KEY, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in detail.items())
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {info}")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)
