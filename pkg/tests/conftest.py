import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedanon.anonymizer import Anonymizer, Batch, LossWeights, ModelConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_config(private=(2,), latent=3, hidden=(8,), disc_hidden=(6,), channels=2, window=4, public=3, **kw):
    return ModelConfig(channels, window, public, private, latent, hidden=hidden, disc_hidden=disc_hidden, **kw)


@pytest.fixture
def tiny_model():
    return Anonymizer(tiny_config(), LossWeights(), seed=3, dtype=np.float64)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    return Batch(rng.standard_normal((6, 8)), rng.integers(0, 3, 6), rng.integers(0, 2, (6, 1)))


# acceptance results, one line per criterion, echoed after the run
ACCEPTANCE: list[str] = []


def record_criterion(number, ok, detail: str) -> bool:
    status = ok if isinstance(ok, str) else "PASS" if ok else "FAIL"
    line = f"criterion {number:>2}: {status}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
