import numpy as np
import pytest
from hypothesis import settings

from patchpose.synthgen import SynthConfig, generate_with_retry, identity_view, noise_free

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def scene():
    return generate_with_retry(SynthConfig(seed=1))


@pytest.fixture(scope="session")
def identity_scene():
    return generate_with_retry(identity_view(SynthConfig(seed=3)))


@pytest.fixture(scope="session")
def clean_scene():
    return generate_with_retry(noise_free(SynthConfig(seed=5)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record a criterion result for the end-of-run summary, then assert it."""
    def record(number, label, ok, detail=""):
        line = f"criterion {number:>2} {label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
