import numpy as np
import pytest

from falkon_ooc.kernels import eval_kernel_block

# criterion number -> (passed, description, detail)
CRITERIA = {}


def pytest_addoption(parser):
    parser.addoption("--nightly", action="store_true", default=False, help="run dataset-backed nightly checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "nightly: needs downloaded datasets")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--nightly"):
        return
    skip = pytest.mark.skip(reason="nightly check; pass --nightly and set FALKON_DATA_DIR")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        ok, desc, detail = CRITERIA[num]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:>2} {status}: {desc} [{detail}]")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dense_kernel(kernel, X1, X2):
    return eval_kernel_block(kernel, X1, X2)


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))
