import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from guidednet.data import default_phantom_spec, generate_phantom, preprocess_split  # noqa: E402
from guidednet.trainer import TrainConfig  # noqa: E402

settings.register_profile(
    "guidednet",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("guidednet")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    """Preprocessed 3-class phantoms at 16^3: 2 labelled, 2 unlabelled."""
    spec = default_phantom_spec(3, dims=(16, 16, 16), seed=7)
    return preprocess_split(generate_phantom(spec, 4, 2))


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises every loss term."""
    return TrainConfig(
        num_classes=3, base_channels=2, depth=1, n_l=1, n_u=1, crop=(8, 8, 8),
        max_iter=20, ramp_len=5, eval_patch=(8, 8, 8), eval_stride=(4, 4, 4),
    )


ACCEPTANCE = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def emit(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
