import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cvet.experiments import TransformerSettings
from cvet.model import ModelConfig, init_model

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Small transformer used by the synthetic experiments and CLI tests.
TOY = TransformerSettings(max_len=16, d_model=32, n_heads=2, n_layers=2, d_ff=64, dropout_rate=0.1)


@pytest.fixture
def tiny_state():
    """d_model=8, 2 layers, 2 heads, max_len=8; parameters jittered off their init."""
    cfg = ModelConfig(vocab_size=20, max_len=8, d_model=8, n_heads=2, n_layers=2, d_ff=16, dropout_rate=0.0)
    state = init_model(cfg, seed=11)
    rng = np.random.default_rng(5)
    for name, value in state.params.items():
        state.params[name] = value + rng.normal(0.0, 0.3, value.shape)
    return state


_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        label, text = marker.args
        _ACCEPTANCE.append((label, "PASS" if report.passed else "FAIL", text))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, text in sorted(_ACCEPTANCE, key=lambda r: (int(r[0].rstrip("ab")), r[0])):
        terminalreporter.write_line(f"[{status}] criterion {label}: {text}")
