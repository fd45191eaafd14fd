import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from guidelab.denoiser import MlpDenoiser
from guidelab.gmm import GaussianMixture, sym_pair

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def pair() -> GaussianMixture:
    return sym_pair()


@pytest.fixture
def small_net(pair) -> MlpDenoiser:
    model = MlpDenoiser.for_mixture(pair, width=8, depth=2, emb_dim=8, seed=3)
    model.metadata["p_drop"] = 0.1
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, printed now and again in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, title: str, passed: bool, detail: str, seconds: float,
               budget: float) -> bool:
        ok = bool(passed) and seconds < budget
        timing = f"{seconds:.1f} s of {budget:g} s"
        line = f"{'PASS' if ok else 'FAIL'}  C{number:<2d} {title}: {detail} ({timing})"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
