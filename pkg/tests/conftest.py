import numpy as np
import pytest

from gale import models as M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grad_cfg():
    """Smallest configuration the gradient checks run on."""
    return M.ModelConfig(mode="multimodal", d_model=8, n_heads=2, d_ff=12, n_enc_layers=1,
                         n_dec_layers=1, d_w=2, d_a=3, L_enc=6, L_pred=2, dropout=0.0)


def rel_err(a, b, floor=1e-6):
    """Max abs difference relative to the larger gradient scale.

    ``floor`` keeps analytically-zero gradients (attention key biases cancel
    in the softmax) from dividing finite-difference noise by itself.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion after the run
# ---------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    ok = rep.passed and rep.when == "call"
    prev = _CRITERIA.get(number)
    if prev is None or prev[0]:
        _CRITERIA[number] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
