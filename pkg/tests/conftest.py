import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    from malign.data import synth_split

    return synth_split("gauss-blobs", 600, 200, separation=0.2)


@pytest.fixture(scope="session")
def trained_trio(blobs):
    """Three independently seeded mlp-L models on the small blob task."""
    from malign.models import TrainConfig, build_model, train

    train_ds, _ = blobs
    return [train(build_model("mlp-L", s), train_ds, TrainConfig(epochs=8, seed=s))[0] for s in (1, 2, 3)]


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
