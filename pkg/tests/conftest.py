import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pipelearn import nn

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for name, value in report.user_properties:
        if name == "criterion":
            _CRITERIA.setdefault(value, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")


@pytest.fixture
def criterion(record_property):
    def mark(name: str):
        record_property("criterion", name)
    return mark


def random_model(rng: np.random.Generator, Q: int, out_act: str = "softmax", width=(1, 6)):
    widths = [int(rng.integers(*width, endpoint=True)) for _ in range(Q + 1)]
    if out_act == "softmax":
        widths[-1] = max(widths[-1], 2)
    acts = [str(rng.choice(["relu", "identity"])) for _ in range(Q - 1)] + [out_act]
    return nn.init_model(widths, acts, seed=int(rng.integers(1 << 31)))


def labels_for(model, rows: int, rng: np.random.Generator):
    k = model.out_features
    if nn.loss_kind(model) == "cross_entropy":
        return np.eye(k)[rng.integers(0, k, rows)]
    return rng.normal(size=(rows, k))
