import numpy as np
import pytest

from oah.model import init_params, toy_config
from oah.seeding import rng_stream

CRITERIA = {
    1: "CTC loss matches brute-force alignment enumeration",
    2: "prefix beam search is exact with a wide beam",
    3: "latency formula",
    4: "causality and streaming equivalence",
    5: "two-stage scoring equivalences",
    6: "gradient checks",
    7: "toy OAH gain over OPS",
    8: "trend reproduction (beam, epsilon, alpha)",
    9: "RTF harness ordering",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        result = "xfailed" if hasattr(rep, "wasxfail") else rep.outcome
        _outcomes.setdefault(mark.args[0], []).append(result)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        res = _outcomes.get(n)
        if res is None:
            status = "NOT RUN"
        elif all(r == "passed" for r in res):
            status = "PASS"
        elif all(r in ("passed", "xfailed") for r in res):
            status = "FAIL (known, marked xfail)"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")


@pytest.fixture(scope="session")
def tiny_config():
    return toy_config(vocab_size=9, feat_dim=6, tau=3, epsilon=2, d_model=16, heads=2,
                      enc_blocks=2, dec_blocks=1, ffn_hidden=24, conv_channels=8)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, rng_stream(0, "init"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
