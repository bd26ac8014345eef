import pytest

from bagdg.bench.config import TrainConfig
from bagdg.bench.training import train_source
from bagdg.scm import SOURCE, TARGET, default_config, generate

# small but real pipeline used by several modules' tests
SMALL = dict(epochs=120, n_source=1500, n_target=500)

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: runs the full multi-seed benchmark")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _, ok, notes = _criteria.get(num, (text, True, []))
        notes = notes + [str(v) for k, v in item.user_properties if k == "measured"]
        _criteria[num] = (text, ok and rep.outcome == "passed", notes)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        text, ok, notes = _criteria[num]
        detail = f" ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {text}{detail}")


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(**SMALL, seed=3)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    scm = default_config(small_cfg.seed)
    return generate(scm, small_cfg.n_source, SOURCE, 3), generate(scm, small_cfg.n_target, TARGET, 3)


@pytest.fixture(scope="session")
def small_trained(small_cfg, small_data):
    return train_source(small_cfg, small_data[0])


class _DefaultRuns:
    """Default-config data and trained BAG models, built once per seed."""

    def __init__(self):
        self._cache = {}

    def __call__(self, seed):
        if seed not in self._cache:
            cfg = TrainConfig(seed=seed)
            scm = default_config(seed)
            source = generate(scm, cfg.n_source, SOURCE, seed)
            target = generate(scm, cfg.n_target, TARGET, seed)
            self._cache[seed] = (cfg, source, target, train_source(cfg, source))
        return self._cache[seed]


@pytest.fixture(scope="session")
def default_runs():
    return _DefaultRuns()


@pytest.fixture(scope="session")
def default_setup(default_runs):
    return default_runs(0)
